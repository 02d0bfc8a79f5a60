//! Run configuration file and model source resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use cbs_core::pipeline::stubs::{ConstantStyle, IdentityStyle, UniformSeg};
use cbs_core::pipeline::{Mode, PipelineConfig, SegBranch, StyleBranch, STUB_CLASSES};
use cbs_core::{ClassId, Pipeline, Real, SegModel, StyleAssignment, StyleModel};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA: u32 = 1;

fn default_mode() -> Mode {
    Mode::Parallel
}

fn default_port() -> u16 {
    8080
}

fn default_workers() -> usize {
    4
}

fn default_interval() -> u64 {
    30
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub class: ClassId,
    pub style: String,
}

pub fn entries_of(assignment: &StyleAssignment) -> Vec<AssignmentEntry> {
    assignment.iter().map(|(class, style)| AssignmentEntry { class, style: style.to_string() }).collect()
}

/// Builds an assignment, rejecting a class listed twice.
pub fn assignment_of(entries: &[AssignmentEntry]) -> cbs_core::Result<StyleAssignment> {
    StyleAssignment::from_entries(entries.iter().map(|e| (e.class, e.style.clone())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    /// Checkpoint directory, or `stub:uniform:<class>`.
    pub seg_model: String,
    /// Style id → checkpoint directory, `stub:identity` or `stub:constant:r,g,b`.
    pub style_models: BTreeMap<String, String>,
    pub input_frames: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub assignment: Vec<AssignmentEntry>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub feather_radius: i64,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Pause between streamed frames in `serve`.
    #[serde(default = "default_interval")]
    pub frame_interval_ms: u64,
    /// Directory relative paths are resolved against (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            bail!("schema {} is not supported (expected {CONFIG_SCHEMA})", self.schema);
        }
        if self.feather_radius < 0 {
            bail!("feather_radius must be non-negative, got {}", self.feather_radius);
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        let assignment = assignment_of(&self.assignment)?;
        for (class, style) in assignment.iter() {
            if !self.style_models.contains_key(style) {
                bail!("assignment of class {class} references undeclared style `{style}`");
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn input_dir(&self) -> PathBuf {
        self.resolve(&self.input_frames)
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_deref().map(|p| self.resolve(p))
    }

    pub fn assignment(&self) -> Result<StyleAssignment> {
        Ok(assignment_of(&self.assignment)?)
    }

    pub fn pipeline_config(&self, mode: Mode) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            assignment: self.assignment()?,
            feather_radius: self.feather_radius as usize,
            mode,
            worker_budget: self.workers,
        })
    }

    pub fn build_pipeline(&self, mode: Mode) -> Result<Pipeline> {
        let seg = self.load_seg()?;
        let mut styles = BTreeMap::new();
        for (id, source) in &self.style_models {
            styles.insert(id.clone(), self.load_style(source).with_context(|| format!("style `{id}`"))?);
        }
        Ok(Pipeline::new(seg, styles, &self.pipeline_config(mode)?)?)
    }

    fn load_seg(&self) -> Result<Arc<dyn SegBranch<Real>>> {
        if let Some(rest) = self.seg_model.strip_prefix("stub:") {
            let class = rest
                .strip_prefix("uniform:")
                .and_then(|c| c.parse::<ClassId>().ok())
                .filter(|&c| (c as usize) < STUB_CLASSES.len())
                .ok_or_else(|| anyhow!("unknown segmentation stub `{}`", self.seg_model))?;
            let class_names = STUB_CLASSES.iter().map(|s| s.to_string()).collect();
            return Ok(Arc::new(UniformSeg { class, class_names }));
        }
        let dir = self.resolve(Path::new(&self.seg_model));
        Ok(Arc::new(SegModel::load(&dir).with_context(|| format!("segmentation model {}", dir.display()))?))
    }

    fn load_style(&self, source: &str) -> Result<Arc<dyn StyleBranch<Real>>> {
        match source.strip_prefix("stub:") {
            Some("identity") => Ok(Arc::new(IdentityStyle)),
            Some(rest) if rest.starts_with("constant:") => {
                let rgb = parse_rgb(&rest["constant:".len()..])
                    .ok_or_else(|| anyhow!("bad constant stub `{source}`, expected stub:constant:r,g,b"))?;
                Ok(Arc::new(ConstantStyle { rgb }))
            }
            Some(_) => bail!("unknown style stub `{source}`"),
            None => {
                let dir = self.resolve(Path::new(source));
                Ok(Arc::new(StyleModel::load(&dir).with_context(|| format!("loading {}", dir.display()))?))
            }
        }
    }
}

fn parse_rgb(s: &str) -> Option<[f64; 3]> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    let rgb: [f64; 3] = v.try_into().ok()?;
    rgb.iter().all(|c| (0.0..=1.0).contains(c)).then_some(rgb)
}
