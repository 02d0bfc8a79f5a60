use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::sync::mpsc;
use std::sync::Arc;

use cbs_core::datagen::{self, ShapeKind, CLASS_NAMES};
use cbs_core::pipeline::stubs::{ConstantStyle, Delay, Delayed, FailingStyle, FixedLabelsSeg, IdentityStyle, UniformSeg};
use cbs_core::pipeline::{
    self, BenchmarkReport, FrameTimings, Mode, PipelineConfig, SegBranch, StreamItem, StubDelays, StyleBranch,
};
use cbs_core::segmenter::SegNetConfig;
use cbs_core::styler::{ExtractorConfig, StyleHyperParams, TransformConfig};
use cbs_core::{Error, Frame, Pipeline, SegModel, StyleAssignment, StyleModel};

type Styles = BTreeMap<String, Arc<dyn StyleBranch<f64>>>;

fn names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn frames(n: usize) -> Vec<Frame> {
    datagen::generate_dataset(n, 31, 32).unwrap().into_iter().map(|s| s.image).collect()
}

fn cfg(mode: Mode, assignment: StyleAssignment) -> PipelineConfig {
    PipelineConfig { assignment, mode, ..PipelineConfig::default() }
}

fn colors() -> Styles {
    let mut m: Styles = BTreeMap::new();
    m.insert("red".into(), Arc::new(ConstantStyle { rgb: [1.0, 0.0, 0.0] }));
    m.insert("blue".into(), Arc::new(ConstantStyle { rgb: [0.0, 0.0, 1.0] }));
    m.insert("identity".into(), Arc::new(IdentityStyle));
    m
}

fn uniform(class: u32) -> Arc<dyn SegBranch<f64>> {
    Arc::new(UniformSeg { class, class_names: names() })
}

#[test]
fn empty_assignment_returns_input() {
    let p = Pipeline::new(uniform(1), colors(), &PipelineConfig::default()).unwrap();
    let f = &frames(1)[0];
    let (out, t) = p.process_frame(0, f, &StyleAssignment::new()).unwrap();
    assert_eq!(&out, f);
    assert_eq!(t.t_style, 0.0);
}

#[test]
fn identity_style_on_full_mask_returns_input() {
    let p = Pipeline::new(uniform(2), colors(), &PipelineConfig::default()).unwrap();
    let f = &frames(1)[0];
    let (out, _) = p.process_frame(0, f, &StyleAssignment::new().with(2, "identity")).unwrap();
    assert_eq!(&out, f);
}

#[test]
fn constant_style_fills_exactly_the_circle() {
    let sample = datagen::generate_dataset::<f64>(40, 3, 48)
        .unwrap()
        .into_iter()
        .find(|s| s.shapes.iter().any(|sh| sh.kind == ShapeKind::Circle))
        .unwrap();
    let seg: Arc<dyn SegBranch<f64>> =
        Arc::new(FixedLabelsSeg { labels: sample.labels.clone(), class_names: names() });
    let mut styles = colors();
    styles.insert("gray".into(), Arc::new(ConstantStyle::gray(0.9)));
    let assign = StyleAssignment::new().with(datagen::CIRCLE, "gray");
    for mode in [Mode::Parallel, Mode::Sequential] {
        let p = Pipeline::new(Arc::clone(&seg), styles.clone(), &cfg(mode, assign.clone())).unwrap();
        let (out, _) = p.process_frame(0, &sample.image, &assign).unwrap();
        for y in 0..48i64 {
            for x in 0..48i64 {
                let in_circle = sample.shapes.iter().any(|sh| {
                    sh.kind == ShapeKind::Circle && (x - sh.cx).pow(2) + (y - sh.cy).pow(2) <= sh.extent.pow(2)
                });
                let want = if in_circle { [0.9; 3] } else { sample.image.pixel(y as usize, x as usize) };
                assert_eq!(out.pixel(y as usize, x as usize), want);
            }
        }
    }
}

#[test]
fn invalid_assignments_and_configs_are_rejected() {
    assert!(matches!(
        Pipeline::new(uniform(1), colors(), &cfg(Mode::Parallel, StyleAssignment::new().with(1, "nope"))),
        Err(Error::MissingStyle { .. })
    ));
    assert!(matches!(
        Pipeline::new(uniform(1), colors(), &cfg(Mode::Parallel, StyleAssignment::new().with(9, "red"))),
        Err(Error::UnknownClass(9))
    ));
    let zero = PipelineConfig { worker_budget: 0, ..PipelineConfig::default() };
    assert!(Pipeline::new(uniform(1), colors(), &zero).is_err());
}

#[test]
fn stage_failures_name_the_stage() {
    let mut styles = colors();
    styles.insert("bad".into(), Arc::new(FailingStyle("boom".into())));
    let p = Pipeline::new(uniform(1), styles, &PipelineConfig::default()).unwrap();
    match p.process_frame(0, &frames(1)[0], &StyleAssignment::new().with(1, "bad")) {
        Err(Error::Stage { stage, message }) => {
            assert!(stage.contains("bad"), "{stage}");
            assert!(message.contains("boom"));
        }
        other => panic!("{other:?}"),
    }
    let seg: Arc<dyn SegBranch<f64>> = Arc::new(FixedLabelsSeg {
        labels: cbs_core::segmenter::LabelMap::new(2, 2, 4, vec![0; 4]).unwrap(),
        class_names: names(),
    });
    let p = Pipeline::new(seg, colors(), &PipelineConfig::default()).unwrap();
    match p.process_frame(0, &frames(1)[0], &StyleAssignment::new().with(1, "red")) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "segmentation"),
        other => panic!("{other:?}"),
    }
}

fn tiny_models() -> (SegModel, StyleModel) {
    let seg = SegModel::init(SegNetConfig { width: 6, dilations: vec![2, 4], classes: 4 }, names(), 7).unwrap();
    let hp = StyleHyperParams {
        iterations: 2,
        batch_size: 2,
        transform: TransformConfig { width: 4, residual_blocks: 1 },
        extractor: ExtractorConfig { widths: vec![4, 4, 4, 4], seed: 1 },
        ..StyleHyperParams::default()
    };
    let fs = frames(2);
    let style = cbs_core::styler::train_style(&fs[0], &fs, &hp).unwrap();
    (seg, style)
}

#[test]
fn modes_are_bit_identical_on_real_models() {
    let (seg, style) = tiny_models();
    let seg: Arc<dyn SegBranch<f64>> = Arc::new(seg);
    let style: Arc<dyn StyleBranch<f64>> = Arc::new(style);
    let mut styles = colors();
    styles.insert("learned".into(), style);
    let assign = StyleAssignment::new().with(0, "learned").with(1, "red").with(2, "learned").with(3, "blue");
    let par = Pipeline::new(Arc::clone(&seg), styles.clone(), &cfg(Mode::Parallel, assign.clone())).unwrap();
    let seq = Pipeline::new(seg, styles, &cfg(Mode::Sequential, assign.clone())).unwrap();
    for (i, f) in frames(6).iter().enumerate() {
        let (a, ta) = par.process_frame(i, f, &assign).unwrap();
        let (b, tb) = seq.process_frame(i, f, &assign).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(ta.t_total >= ta.t_seg.max(ta.t_style) && ta.t_total >= ta.t_composite);
        assert!(tb.t_total >= tb.t_seg + tb.t_style);
    }
}

#[test]
fn feathered_pipeline_blends_boundaries() {
    let sample = &datagen::generate_dataset::<f64>(1, 5, 32).unwrap()[0];
    let seg: Arc<dyn SegBranch<f64>> = Arc::new(FixedLabelsSeg { labels: sample.labels.clone(), class_names: names() });
    let assign = StyleAssignment::new().with(0, "red");
    let c = PipelineConfig { feather_radius: 2, ..cfg(Mode::Parallel, assign.clone()) };
    let p = Pipeline::new(seg, colors(), &c).unwrap();
    let (out, _) = p.process_frame(0, &sample.image, &assign).unwrap();
    assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.pixel(0, 0), [1.0, 0.0, 0.0]);
}

fn stream(p: &Pipeline, input: Vec<cbs_core::Result<Frame>>, initial: StyleAssignment, updates: &[(usize, StyleAssignment)]) -> Vec<StreamItem<f64>> {
    let (tx, rx) = mpsc::channel();
    let mut out = Vec::new();
    p.process_stream(input, initial, &rx, |item| {
        let done = match &item {
            StreamItem::Frame { timings, .. } => timings.frame_index,
            StreamItem::Error { index, .. } => *index,
        };
        for (after, a) in updates {
            if *after == done {
                tx.send(a.clone()).unwrap();
            }
        }
        out.push(item);
        ControlFlow::Continue(())
    })
    .unwrap();
    out
}

#[test]
fn stream_preserves_order_and_applies_updates_between_frames() {
    let seg: Arc<dyn SegBranch<f64>> =
        Arc::new(Delayed::new(UniformSeg { class: 1, class_names: names() }, Delay::jitter_ms(0.0, 4.0, 1)));
    let mut styles: Styles = BTreeMap::new();
    for (id, rgb) in [("red", [1.0, 0.0, 0.0]), ("blue", [0.0, 0.0, 1.0])] {
        styles.insert(id.into(), Arc::new(Delayed::new(ConstantStyle { rgb }, Delay::jitter_ms(0.0, 4.0, rgb[2] as u64))));
    }
    let a = StyleAssignment::new().with(1, "red");
    let b = StyleAssignment::new().with(1, "blue");
    let p = Pipeline::new(seg, styles, &cfg(Mode::Parallel, a.clone())).unwrap();
    let input = frames(10).into_iter().map(Ok).collect();
    let out = stream(&p, input, a.clone(), &[(4, b.clone())]);
    assert_eq!(out.len(), 10);
    for (i, item) in out.iter().enumerate() {
        let StreamItem::Frame { frame, timings, assignment } = item else { panic!("error item") };
        assert_eq!(timings.frame_index, i);
        let want = if i < 5 { ([1.0, 0.0, 0.0], &a) } else { ([0.0, 0.0, 1.0], &b) };
        assert_eq!(assignment.as_ref(), want.1);
        assert!(frame.pixels().chunks(3).all(|px| px == want.0));
    }
}

#[test]
fn stream_handles_empty_input_errors_and_bad_updates() {
    let p = Pipeline::new(uniform(1), colors(), &PipelineConfig::default()).unwrap();
    assert!(stream(&p, vec![], StyleAssignment::new(), &[]).is_empty());

    let mut input: Vec<cbs_core::Result<Frame>> = frames(4).into_iter().map(Ok).collect();
    input[1] = Err(Error::InvalidValue("unreadable".into()));
    let bad = StyleAssignment::new().with(1, "missing");
    let out = stream(&p, input, StyleAssignment::new().with(1, "red"), &[(0, bad)]);
    assert_eq!(out.len(), 4);
    assert!(matches!(out[1], StreamItem::Error { index: 1, .. }));
    for i in [0, 2, 3] {
        let StreamItem::Frame { frame, .. } = &out[i] else { panic!() };
        assert!(frame.pixels().chunks(3).all(|px| px == [1.0, 0.0, 0.0]));
    }
}

#[test]
fn stream_stops_when_sink_breaks() {
    let p = Pipeline::new(uniform(1), colors(), &PipelineConfig::default()).unwrap();
    let (_tx, rx) = mpsc::channel();
    let mut seen = 0;
    let summary = p
        .process_stream(frames(5).into_iter().map(Ok), StyleAssignment::new(), &rx, |_| {
            seen += 1;
            if seen == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
        })
        .unwrap();
    assert_eq!((seen, summary.frames), (2, 2));
}

#[test]
fn report_statistics() {
    let timings: Vec<FrameTimings> = (0..20)
        .map(|i| FrameTimings { frame_index: i, t_seg: 1.0, t_style: 2.0, t_composite: 0.5, t_total: (i + 1) as f64 })
        .collect();
    let r = BenchmarkReport::from_timings(Mode::Sequential, &timings).unwrap();
    assert_eq!((r.frames, r.mean_ms, r.median_ms, r.p95_ms), (20, 10.5, 10.5, 19.0));
    assert!((r.fps - 1000.0 / 10.5).abs() < 1e-9);
    assert_eq!((r.mean_seg_ms, r.mean_style_ms, r.mean_composite_ms), (1.0, 2.0, 0.5));
    assert!(BenchmarkReport::from_timings(Mode::Parallel, &timings[..9]).is_err());
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["mode"], "sequential");
    assert_eq!(json["schema"], 1);
}

#[test]
fn stubbed_benchmark_parallel_beats_sequential() {
    let fs = frames(12);
    let delays = StubDelays { seg_ms: 30.0, style_ms: 30.0 };
    let seq = pipeline::benchmark_stubbed(&fs, &cfg(Mode::Sequential, StyleAssignment::new()), delays).unwrap();
    let par = pipeline::benchmark_stubbed(&fs, &cfg(Mode::Parallel, StyleAssignment::new()), delays).unwrap();
    assert!(seq.mean_ms >= 60.0, "{seq:?}");
    assert!(par.mean_ms <= 0.7 * seq.mean_ms, "{par:?} vs {seq:?}");
    assert!((par.fps * par.mean_ms / 1000.0 - 1.0).abs() < 0.01);
    assert!(pipeline::benchmark_stubbed(&fs[..5], &PipelineConfig::default(), delays).is_err());
    let neg = StubDelays { seg_ms: -1.0, style_ms: 0.0 };
    assert!(pipeline::benchmark_stubbed(&fs, &PipelineConfig::default(), neg).is_err());
}
