//! Per-frame orchestration: segmentation and every distinct styling pass run
//! concurrently, then the class masks select styled pixels.

pub mod stubs;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{self, ClassId, ClassMask, Frame, SoftMask, StyleAssignment, StyleId};
use crate::scalar::Scalar;
use crate::segmenter::{self, ProbMap, SegModel};
use crate::styler::StyleModel;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MIN_BENCH_FRAMES: usize = 10;

pub trait SegBranch<T: Scalar>: Send + Sync {
    fn class_names(&self) -> Vec<String>;
    fn predict(&self, frame: &Frame<T>) -> Result<ProbMap<T>>;
}

pub trait StyleBranch<T: Scalar>: Send + Sync {
    fn stylize(&self, frame: &Frame<T>) -> Result<Frame<T>>;
}

impl<T: Scalar> SegBranch<T> for SegModel<T> {
    fn class_names(&self) -> Vec<String> {
        SegModel::class_names(self).to_vec()
    }

    fn predict(&self, frame: &Frame<T>) -> Result<ProbMap<T>> {
        segmenter::predict(frame, self)
    }
}

impl<T: Scalar> StyleBranch<T> for StyleModel<T> {
    fn stylize(&self, frame: &Frame<T>) -> Result<Frame<T>> {
        StyleModel::stylize(self, frame)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Parallel,
    Sequential,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Parallel => "parallel",
            Mode::Sequential => "sequential",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "sequential" => Ok(Mode::Sequential),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub assignment: StyleAssignment,
    pub feather_radius: usize,
    pub mode: Mode,
    pub worker_budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { assignment: StyleAssignment::new(), feather_radius: 0, mode: Mode::Parallel, worker_budget: 4 }
    }
}

/// Wall-clock milliseconds spent per stage of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTimings {
    pub frame_index: usize,
    pub t_seg: f64,
    pub t_style: f64,
    pub t_composite: f64,
    pub t_total: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub struct Pipeline<T: Scalar> {
    seg: Arc<dyn SegBranch<T>>,
    styles: BTreeMap<StyleId, Arc<dyn StyleBranch<T>>>,
    class_names: Vec<String>,
    mode: Mode,
    feather_radius: usize,
    pool: rayon::ThreadPool,
}

type SegOutcome = Result<(Vec<ClassMask>, Duration)>;
type StyleOutcome<T> = Result<(Frame<T>, Duration)>;

impl<T: Scalar> Pipeline<T> {
    pub fn new(
        seg: Arc<dyn SegBranch<T>>,
        styles: BTreeMap<StyleId, Arc<dyn StyleBranch<T>>>,
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        if cfg.worker_budget == 0 {
            return Err(Error::InvalidArgument("worker budget must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.worker_budget)
            .thread_name(|i| format!("cbs-worker-{i}"))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        let class_names = seg.class_names();
        let p = Pipeline { seg, styles, class_names, mode: cfg.mode, feather_radius: cfg.feather_radius, pool };
        p.validate(&cfg.assignment)?;
        Ok(p)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn style_ids(&self) -> impl Iterator<Item = &str> {
        self.styles.keys().map(String::as_str)
    }

    pub fn style(&self, id: &str) -> Option<&Arc<dyn StyleBranch<T>>> {
        self.styles.get(id)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Every assigned class must exist and every style must be loaded.
    pub fn validate(&self, assignment: &StyleAssignment) -> Result<()> {
        for (class, style) in assignment.iter() {
            if class as usize >= self.class_names.len() {
                return Err(Error::UnknownClass(class));
            }
            if !self.styles.contains_key(style) {
                return Err(Error::MissingStyle { class, style: style.to_string() });
            }
        }
        Ok(())
    }

    fn run_seg(&self, frame: &Frame<T>, classes: &[ClassId]) -> SegOutcome {
        let start = Instant::now();
        let stage = |e: Error| Error::Stage { stage: "segmentation".into(), message: e.to_string() };
        let prob = self.seg.predict(frame).map_err(stage)?;
        if prob.height() != frame.height() || prob.width() != frame.width() {
            return Err(stage(Error::Shape(format!(
                "probability map {}x{} for frame {}x{}",
                prob.height(),
                prob.width(),
                frame.height(),
                frame.width()
            ))));
        }
        let masks = classes
            .iter()
            .map(|&c| segmenter::extract_mask(&prob, c))
            .collect::<Result<Vec<_>>>()
            .map_err(stage)?;
        Ok((masks, start.elapsed()))
    }

    fn run_style(&self, frame: &Frame<T>, id: &str) -> StyleOutcome<T> {
        let start = Instant::now();
        let stage = |e: Error| Error::Stage { stage: format!("styling `{id}`"), message: e.to_string() };
        let branch = self.styles.get(id).ok_or_else(|| stage(Error::Model("style not loaded".into())))?;
        let out = branch.stylize(frame).map_err(stage)?;
        if out.height() != frame.height() || out.width() != frame.width() {
            return Err(stage(Error::Shape("styled frame size differs from input".into())));
        }
        Ok((out, start.elapsed()))
    }

    /// Segments, stylizes once per distinct assigned style, and composites.
    pub fn process_frame(
        &self,
        frame_index: usize,
        frame: &Frame<T>,
        assignment: &StyleAssignment,
    ) -> Result<(Frame<T>, FrameTimings)> {
        let start = Instant::now();
        self.validate(assignment)?;
        if assignment.is_empty() {
            let t_total = ms(start.elapsed());
            return Ok((frame.clone(), FrameTimings { frame_index, t_total, ..FrameTimings::default() }));
        }
        let classes: Vec<ClassId> = assignment.classes().collect();
        let style_ids = assignment.styles();

        let (seg, styled) = match self.mode {
            Mode::Sequential => {
                let seg = self.run_seg(frame, &classes);
                let styled: Vec<StyleOutcome<T>> = style_ids.iter().map(|id| self.run_style(frame, id)).collect();
                (seg, styled)
            }
            Mode::Parallel => {
                let mut seg: Option<SegOutcome> = None;
                let mut styled: Vec<Option<StyleOutcome<T>>> = style_ids.iter().map(|_| None).collect();
                self.pool.scope(|s| {
                    let seg_slot = &mut seg;
                    let classes = &classes;
                    s.spawn(move |_| *seg_slot = Some(self.run_seg(frame, classes)));
                    for (slot, id) in styled.iter_mut().zip(&style_ids) {
                        s.spawn(move |_| *slot = Some(self.run_style(frame, id)));
                    }
                });
                (
                    seg.expect("segmentation branch ran"),
                    styled.into_iter().map(|r| r.expect("styling branch ran")).collect(),
                )
            }
        };
        let (masks, seg_time) = seg?;
        let mut styled_frames = BTreeMap::new();
        let mut style_times = Vec::with_capacity(style_ids.len());
        for (id, result) in style_ids.iter().zip(styled) {
            let (f, t) = result?;
            styled_frames.insert(id.to_string(), f);
            style_times.push(t);
        }
        let t_style = match self.mode {
            Mode::Sequential => style_times.iter().map(|&d| ms(d)).sum(),
            Mode::Parallel => style_times.iter().map(|&d| ms(d)).fold(0.0, f64::max),
        };

        let comp_start = Instant::now();
        let stage = |e: Error| Error::Stage { stage: "composite".into(), message: e.to_string() };
        let out = if self.feather_radius == 0 {
            image_core::composite_multi(frame, &styled_frames, &masks, assignment)
        } else {
            let soft: Vec<SoftMask<T>> =
                masks.iter().map(|m| image_core::feather_mask(m, self.feather_radius)).collect();
            image_core::composite_multi_soft(frame, &styled_frames, &soft, assignment)
        }
        .map_err(stage)?;
        let t_composite = ms(comp_start.elapsed());
        let timings = FrameTimings { frame_index, t_seg: ms(seg_time), t_style, t_composite, t_total: ms(start.elapsed()) };
        Ok((out, timings))
    }

    /// Processes frames in order. Assignment updates received on `control`
    /// are validated and applied between frames only; invalid updates are
    /// dropped. A failing frame yields an error item and the stream goes on.
    pub fn process_stream<I, F>(
        &self,
        frames: I,
        initial: StyleAssignment,
        control: &Receiver<StyleAssignment>,
        mut sink: F,
    ) -> Result<StreamSummary>
    where
        I: IntoIterator<Item = Result<Frame<T>>>,
        F: FnMut(StreamItem<T>) -> ControlFlow<()>,
    {
        self.validate(&initial)?;
        let mut current = Arc::new(initial);
        let mut summary = StreamSummary::default();
        for (index, source) in frames.into_iter().enumerate() {
            while let Ok(update) = control.try_recv() {
                match self.validate(&update) {
                    Ok(()) => {
                        current = Arc::new(update);
                        summary.updates_applied += 1;
                    }
                    Err(e) => {
                        log::warn!("dropping invalid assignment update: {e}");
                        summary.updates_rejected += 1;
                    }
                }
            }
            let item = match source.and_then(|f| self.process_frame(index, &f, &current)) {
                Ok((frame, timings)) => {
                    summary.frames += 1;
                    StreamItem::Frame { frame, timings, assignment: Arc::clone(&current) }
                }
                Err(error) => {
                    summary.errors += 1;
                    StreamItem::Error { index, error }
                }
            };
            if sink(item).is_break() {
                break;
            }
        }
        Ok(summary)
    }
}

#[derive(Debug)]
pub enum StreamItem<T> {
    Frame { frame: Frame<T>, timings: FrameTimings, assignment: Arc<StyleAssignment> },
    Error { index: usize, error: Error },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamSummary {
    pub frames: usize,
    pub errors: usize,
    pub updates_applied: usize,
    pub updates_rejected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: u32,
    pub mode: Mode,
    pub frames: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub mean_seg_ms: f64,
    pub mean_style_ms: f64,
    pub mean_composite_ms: f64,
}

impl BenchmarkReport {
    pub fn from_timings(mode: Mode, timings: &[FrameTimings]) -> Result<Self> {
        if timings.len() < MIN_BENCH_FRAMES {
            return Err(Error::InvalidArgument(format!(
                "benchmark needs at least {MIN_BENCH_FRAMES} frames, got {}",
                timings.len()
            )));
        }
        let n = timings.len() as f64;
        let mean = |f: fn(&FrameTimings) -> f64| timings.iter().map(f).sum::<f64>() / n;
        let mut totals: Vec<f64> = timings.iter().map(|t| t.t_total).collect();
        totals.sort_by(f64::total_cmp);
        let len = totals.len();
        let median = if len % 2 == 1 { totals[len / 2] } else { (totals[len / 2 - 1] + totals[len / 2]) / 2.0 };
        let p95 = totals[((0.95 * len as f64).ceil() as usize).clamp(1, len) - 1];
        let mean_ms = mean(|t| t.t_total);
        Ok(BenchmarkReport {
            schema: REPORT_SCHEMA_VERSION,
            mode,
            frames: timings.len(),
            mean_ms,
            median_ms: median,
            p95_ms: p95,
            fps: 1000.0 / mean_ms,
            mean_seg_ms: mean(|t| t.t_seg),
            mean_style_ms: mean(|t| t.t_style),
            mean_composite_ms: mean(|t| t.t_composite),
        })
    }
}

/// Times `pipeline` over every frame.
pub fn benchmark<T: Scalar>(
    pipeline: &Pipeline<T>,
    frames: &[Frame<T>],
    assignment: &StyleAssignment,
) -> Result<BenchmarkReport> {
    if frames.len() < MIN_BENCH_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs at least {MIN_BENCH_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let timings = frames
        .iter()
        .enumerate()
        .map(|(i, f)| pipeline.process_frame(i, f, assignment).map(|(_, t)| t))
        .collect::<Result<Vec<_>>>()?;
    BenchmarkReport::from_timings(pipeline.mode(), &timings)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StubDelays {
    pub seg_ms: f64,
    pub style_ms: f64,
}

/// Classes reported by the stub segmenter.
pub const STUB_CLASSES: [&str; 4] = ["background", "circle", "square", "triangle"];

/// Benchmarks orchestration alone: both stages are replaced by stubs that
/// sleep for the given delays. With an empty assignment, class 1 is mapped
/// to a single stub style.
pub fn benchmark_stubbed<T: Scalar>(
    frames: &[Frame<T>],
    cfg: &PipelineConfig,
    delays: StubDelays,
) -> Result<BenchmarkReport> {
    if delays.seg_ms < 0.0 || delays.style_ms < 0.0 || !delays.seg_ms.is_finite() || !delays.style_ms.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid stub delays {delays:?}")));
    }
    let assignment =
        if cfg.assignment.is_empty() { StyleAssignment::new().with(1, "stub") } else { cfg.assignment.clone() };
    let seg: Arc<dyn SegBranch<T>> = Arc::new(stubs::Delayed::new(
        stubs::UniformSeg { class: 1, class_names: STUB_CLASSES.iter().map(|s| s.to_string()).collect() },
        stubs::Delay::fixed_ms(delays.seg_ms),
    ));
    let styles: BTreeMap<StyleId, Arc<dyn StyleBranch<T>>> = assignment
        .styles()
        .into_iter()
        .map(|id| {
            let branch: Arc<dyn StyleBranch<T>> = Arc::new(stubs::Delayed::new(
                stubs::ConstantStyle::gray(0.5),
                stubs::Delay::fixed_ms(delays.style_ms),
            ));
            (id.to_string(), branch)
        })
        .collect();
    let stub_cfg = PipelineConfig { assignment: assignment.clone(), ..cfg.clone() };
    let pipeline = Pipeline::new(seg, styles, &stub_cfg)?;
    benchmark(&pipeline, frames, &assignment)
}
