use std::path::Path;
use std::process::{Command, Output};

fn cbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbs")).args(args).env("CBS_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cbs(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_status_two() {
    assert_eq!(cbs(&["gen-data", "--n", "1", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(cbs(&["paint"]).status.code(), Some(2));
    assert_eq!(cbs(&[]).status.code(), Some(2));
    assert_eq!(cbs(&["bench", "--frames", "f", "--report", "r", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn failures_print_one_line() {
    let out = cbs(&["run", "--config", "/definitely/missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("missing.json"));
}

#[test]
fn gen_data_run_and_bench_with_stubs() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let frames = tmp.path().join("frames");
    ok(&["gen-data", "--n", "12", "--seed", "7", "--size", "32", "--out", p(&ds), "--frames", p(&frames)]);
    assert!(ds.join("index.json").exists());
    assert!(frames.join("frame_000011.png").exists());

    std::fs::write(
        tmp.path().join("run.json"),
        r#"{"schema": 1, "seg_model": "stub:uniform:1", "input_frames": "frames", "output_dir": "out",
            "style_models": {"g": "stub:constant:0.9,0.9,0.9"}, "assignment": [{"class": 1, "style": "g"}]}"#,
    )
    .unwrap();
    ok(&["run", "--config", p(&tmp.path().join("run.json"))]);
    let styled = cbs_core::Frame::load_png(&tmp.path().join("out/frame_000003.png")).unwrap();
    assert!(styled.to_rgb8().iter().all(|&b| b == 230));

    let report = tmp.path().join("r.json");
    ok(&[
        "bench", "--frames", p(&frames), "--stub-seg-ms", "2", "--stub-style-ms", "2", "--mode", "sequential",
        "--report", p(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!((r["schema"].as_u64(), r["mode"].as_str(), r["frames"].as_u64()), (Some(1), Some("sequential"), Some(12)));
    assert!(r["mean_ms"].as_f64().unwrap() >= 4.0);

    let few = tmp.path().join("few");
    std::fs::create_dir(&few).unwrap();
    std::fs::copy(frames.join("frame_000000.png"), few.join("frame_000000.png")).unwrap();
    let out = cbs(&["bench", "--frames", p(&few), "--stub-seg-ms", "1", "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_and_run_real_models() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let frames = tmp.path().join("frames");
    ok(&["gen-data", "--n", "10", "--seed", "1", "--size", "32", "--out", p(&ds), "--frames", p(&frames)]);
    let style = tmp.path().join("style.png");
    cbs_core::Frame::from_fn(16, 16, |y, x| if (x / 4 + y / 4) % 2 == 0 { [0.9, 0.7, 0.1] } else { [0.1, 0.2, 0.6] })
        .unwrap()
        .save_png(&style)
        .unwrap();
    let stdout = ok(&[
        "train-style", "--style", p(&style), "--content", p(&ds), "--out", p(&tmp.path().join("stripes")),
        "--iterations", "3", "--downsample", "2", "--width", "4", "--seed", "3",
    ]);
    assert!(stdout.contains("trained style model on 10 images"), "{stdout}");
    let stdout = ok(&[
        "train-seg", "--data", p(&ds), "--out", p(&tmp.path().join("seg")), "--steps", "3", "--batch", "2",
        "--width", "8", "--holdout", p(&ds),
    ]);
    assert!(stdout.contains("held-out mIoU"), "{stdout}");

    std::fs::write(
        tmp.path().join("run.json"),
        r#"{"schema": 1, "seg_model": "seg", "input_frames": "frames", "output_dir": "out",
            "style_models": {"stripes": "stripes"}, "feather_radius": 1,
            "assignment": [{"class": 0, "style": "stripes"}, {"class": 2, "style": "stripes"}]}"#,
    )
    .unwrap();
    ok(&["run", "--config", p(&tmp.path().join("run.json"))]);
    assert_eq!(std::fs::read_dir(tmp.path().join("out")).unwrap().count(), 10);
    ok(&["run", "--config", p(&tmp.path().join("run.json")), "--out", p(&tmp.path().join("seq")), "--mode", "sequential"]);
    for i in 0..10 {
        let name = format!("frame_{i:06}.png");
        assert_eq!(
            std::fs::read(tmp.path().join("out").join(&name)).unwrap(),
            std::fs::read(tmp.path().join("seq").join(&name)).unwrap()
        );
    }
    let report = tmp.path().join("real.json");
    ok(&["bench", "--frames", p(&frames), "--config", p(&tmp.path().join("run.json")), "--report", p(&report)]);
    let out = cbs(&["bench", "--frames", p(&frames), "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn negative_feather_radius_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("run.json"),
        r#"{"schema": 1, "seg_model": "stub:uniform:1", "input_frames": ".", "output_dir": "out",
            "style_models": {}, "feather_radius": -2}"#,
    )
    .unwrap();
    let out = cbs(&["run", "--config", p(&tmp.path().join("run.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("feather_radius"));
}
