//! `frame_%06d.png` directories.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cbs_core::Frame;

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    (digits.len() == 6 && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok())?
}

/// Frame files of `dir` in index order; other files are ignored.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading frame directory {}", dir.display()))? {
        let entry = entry.with_context(|| format!("reading frame directory {}", dir.display()))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            found.push((i, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    list_frames(dir)?.iter().map(|p| Ok(Frame::load_png(p)?)).collect()
}

pub fn write_frame(dir: &Path, index: usize, frame: &Frame) -> Result<()> {
    Ok(frame.save_png(&dir.join(frame_name(index)))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_others_are_skipped() {
        assert_eq!(frame_name(42), "frame_000042.png");
        assert_eq!(frame_index("frame_000042.png"), Some(42));
        for bad in ["frame_42.png", "frame_00004x.png", "frame_000042.jpg", "img_000001.png"] {
            assert_eq!(frame_index(bad), None, "{bad}");
        }
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::filled(2, 2, 0.5).unwrap();
        for i in [3, 1, 2] {
            write_frame(dir.path(), i, &f).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let names: Vec<_> = list_frames(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["frame_000001.png", "frame_000002.png", "frame_000003.png"]);
    }
}
