//! Subcommands of the `cbs` binary.

use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cbs_core::datagen;
use cbs_core::pipeline::{self, Mode, StreamItem, StubDelays};
use cbs_core::segmenter::{self, SegHyperParams, SegNetConfig};
use cbs_core::styler::{self, LossWeights, StyleHyperParams, TransformConfig};
use cbs_core::{Frame, SegModel};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::frames;
use crate::service::{self, ServiceSetup};

#[derive(Debug, Parser)]
#[command(name = "cbs", version, about = "Class-based real-time styling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenData),
    /// Train a feed-forward style network.
    TrainStyle(TrainStyle),
    /// Train the segmentation network.
    TrainSeg(TrainSeg),
    /// Style a directory of frames as described by a run config.
    Run(Run),
    /// Measure per-frame latency and FPS.
    Bench(Bench),
    /// Stream styled frames and accept live assignment changes.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the images as `frame_%06d.png` into this directory.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainStyle {
    /// Style image (PNG).
    #[arg(long)]
    pub style: PathBuf,
    /// Dataset directory (with index.json) or frame directory.
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use at most this many content images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Box-downsample content images by this factor.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
    #[arg(long, default_value_t = 1.0)]
    pub content_weight: f64,
    #[arg(long, default_value_t = 10.0)]
    pub style_weight: f64,
    /// Channel width of the transform network.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct TrainSeg {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Held-out dataset to report mIoU on after training.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Run {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct Bench {
    #[arg(long)]
    pub frames: PathBuf,
    /// Real models and assignment; not needed with stub delays.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stub_seg_ms: Option<f64>,
    #[arg(long)]
    pub stub_style_ms: Option<f64>,
    #[arg(long, default_value = "parallel")]
    pub mode: Mode,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainStyle(a) => train_style(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let samples = datagen::generate_dataset::<f64>(a.n, a.seed, a.size)?;
    datagen::save_dataset(&a.out, &samples, a.seed)?;
    if let Some(dir) = &a.frames {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, s) in samples.iter().enumerate() {
            frames::write_frame(dir, i, &s.image)?;
        }
    }
    println!("wrote {} samples of {}x{} to {}", samples.len(), a.size, a.size, a.out.display());
    Ok(())
}

fn load_content(dir: &Path) -> Result<Vec<Frame>> {
    if dir.join("index.json").exists() {
        Ok(datagen::load_dataset::<f64>(dir)?.samples.into_iter().map(|s| s.image).collect())
    } else {
        frames::load_frames(dir)
    }
}

fn train_style(a: TrainStyle) -> Result<()> {
    let style = Frame::load_png(&a.style)?;
    let mut content = load_content(&a.content)?;
    if let Some(n) = a.limit {
        content.truncate(n);
    }
    if content.is_empty() {
        bail!("no content images in {}", a.content.display());
    }
    let content = content.iter().map(|f| f.downsample(a.downsample)).collect::<cbs_core::Result<Vec<_>>>()?;
    let hp = StyleHyperParams {
        iterations: a.iterations,
        learning_rate: a.lr,
        batch_size: a.batch,
        weights: LossWeights { content: a.content_weight, style: a.style_weight },
        seed: a.seed,
        transform: TransformConfig { width: a.width, ..TransformConfig::default() },
        ..StyleHyperParams::default()
    };
    let model = styler::train_style(&style, &content, &hp)?;
    model.save(&a.out)?;
    let m = model.meta();
    println!(
        "trained style model on {} images: loss {:.5} -> {:.5}, saved to {}",
        content.len(),
        m.initial_loss.total,
        m.final_loss.total,
        a.out.display()
    );
    Ok(())
}

fn train_seg(a: TrainSeg) -> Result<()> {
    let data = datagen::load_dataset::<f64>(&a.data)?;
    let hp = SegHyperParams {
        steps: a.steps,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        net: SegNetConfig { width: a.width, classes: data.classes.len(), ..SegNetConfig::default() },
    };
    let model = segmenter::train_seg(&data.pairs(), data.classes.clone(), &hp)?;
    model.save(&a.out)?;
    println!(
        "trained segmentation model ({} parameters): mean loss {:.5}, saved to {}",
        model.params().count(),
        model.meta().final_loss,
        a.out.display()
    );
    if let Some(dir) = &a.holdout {
        println!("held-out mIoU {:.4}", holdout_miou(&model, dir)?);
    }
    Ok(())
}

pub fn holdout_miou(model: &SegModel, dir: &Path) -> Result<f64> {
    let held = datagen::load_dataset::<f64>(dir)?;
    let preds = held.samples.iter().map(|s| model.predict(&s.image)).collect::<cbs_core::Result<Vec<_>>>()?;
    let gts: Vec<_> = held.samples.iter().map(|s| s.labels.clone()).collect();
    Ok(segmenter::mean_iou(&preds, &gts)?)
}

fn run(a: Run) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let out = a.out.or_else(|| cfg.output_dir()).context("no output directory (set output_dir or --out)")?;
    let pipeline = cfg.build_pipeline(a.mode.unwrap_or(cfg.mode))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let paths = frames::list_frames(&cfg.input_dir())?;
    let source = paths.iter().map(|p| Frame::load_png(p));
    let (_control, rx) = mpsc::channel();
    let mut failure: Option<anyhow::Error> = None;
    let summary = pipeline.process_stream(source, cfg.assignment()?, &rx, |item| match item {
        StreamItem::Frame { frame, timings, .. } => match frames::write_frame(&out, timings.frame_index, &frame) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        },
        StreamItem::Error { index, error } => {
            log::error!("frame {index}: {error}");
            ControlFlow::Continue(())
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if summary.errors > 0 {
        bail!("{} of {} frames failed", summary.errors, paths.len());
    }
    println!("styled {} frames into {}", summary.frames, out.display());
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    let input = frames::load_frames(&a.frames)?;
    let report = if a.stub_seg_ms.is_some() || a.stub_style_ms.is_some() {
        let delays = StubDelays { seg_ms: a.stub_seg_ms.unwrap_or(0.0), style_ms: a.stub_style_ms.unwrap_or(0.0) };
        let cfg = pipeline::PipelineConfig { mode: a.mode, worker_budget: a.workers, ..Default::default() };
        pipeline::benchmark_stubbed(&input, &cfg, delays)?
    } else {
        let path = a.config.as_ref().context("bench needs --config or stub delays")?;
        let cfg = RunConfig::load(path)?;
        let p = cfg.build_pipeline(a.mode)?;
        pipeline::benchmark(&p, &input, &cfg.assignment()?)?
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&a.report, text).with_context(|| format!("writing {}", a.report.display()))?;
    println!(
        "{} frames, {} mode: mean {:.2} ms, {:.1} FPS; report in {}",
        report.frames,
        report.mode,
        report.mean_ms,
        report.fps,
        a.report.display()
    );
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let pipeline = cfg.build_pipeline(cfg.mode)?;
    let setup = ServiceSetup {
        pipeline,
        initial: cfg.assignment()?,
        frames: frames::load_frames(&cfg.input_dir())?,
        frame_interval: Duration::from_millis(cfg.frame_interval_ms),
    };
    let addr = SocketAddr::new(a.host, a.port.unwrap_or(cfg.port));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let handle = service::start(setup, addr).await?;
        println!("listening on http://{}", handle.addr());
        tokio::signal::ctrl_c().await?;
        handle.shutdown().await;
        Ok(())
    })
}
