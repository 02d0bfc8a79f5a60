//! Checkpoint directories: packed little-endian weight files next to a JSON
//! manifest. The manifest is the compatibility contract.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

pub fn write_manifest<M: Serialize>(dir: &Path, manifest: &M) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::file(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest<M: DeserializeOwned>(dir: &Path) -> Result<M> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(&path, format!("corrupt manifest: {e}")))
}

pub fn write_blob(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn read_blob(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn check_schema(dir: &Path, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::file(
            dir.join(MANIFEST),
            format!("schema version {found}, expected {expected}"),
        ));
    }
    Ok(())
}

pub fn check_dtype(dir: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::file(
            dir.join(MANIFEST),
            format!("weights are {found}, loader expects {expected}"),
        ));
    }
    Ok(())
}
