use cbs_core::datagen::{self, ShapeKind, ShapeSpec, CLASS_NAMES};
use cbs_core::segmenter::LabelMap;

/// Independent rasterizer: Euclidean disc, axis-aligned square, upright
/// isosceles triangle whose half-width grows linearly from apex to base.
fn oracle_inside(s: &ShapeSpec, x: i64, y: i64) -> bool {
    let (dx, dy, e) = ((x - s.cx) as f64, (y - s.cy) as f64, s.extent as f64);
    match s.kind {
        ShapeKind::Circle => dx.hypot(dy) <= e,
        ShapeKind::Square => dx.abs().max(dy.abs()) <= e,
        ShapeKind::Triangle => {
            let t = (dy + e) / (2.0 * e); // 0 at apex, 1 at base
            (0.0..=1.0).contains(&t) && dx.abs() <= t * e
        }
    }
}

fn oracle_class(kind: ShapeKind) -> u8 {
    let name = match kind {
        ShapeKind::Circle => "circle",
        ShapeKind::Square => "square",
        ShapeKind::Triangle => "triangle",
    };
    CLASS_NAMES.iter().position(|&n| n == name).unwrap() as u8
}

#[test]
fn labels_replay_recorded_geometry() {
    for s in datagen::generate_dataset::<f64>(40, 21, 48).unwrap() {
        assert!((1..=3).contains(&s.shapes.len()));
        for y in 0..48 {
            for x in 0..48 {
                let hits: Vec<_> = s.shapes.iter().filter(|sh| oracle_inside(sh, x, y)).collect();
                assert!(hits.len() <= 1, "sample {}: shapes overlap at ({x}, {y})", s.sample_id);
                let want = hits.first().map_or(0, |sh| oracle_class(sh.kind));
                assert_eq!(s.labels.get(y as usize, x as usize), want, "sample {} at ({x}, {y})", s.sample_id);
            }
        }
        for sh in s.shapes.iter().filter(|sh| sh.kind == ShapeKind::Circle) {
            assert_eq!(s.labels.get(sh.cy as usize, sh.cx as usize), oracle_class(ShapeKind::Circle));
        }
    }
}

#[test]
fn every_class_appears_in_a_hundred_samples() {
    let set = datagen::generate_dataset::<f64>(100, 0, 32).unwrap();
    let mut seen = [false; 4];
    for s in &set {
        for &l in s.labels.labels() {
            seen[l as usize] = true;
        }
    }
    assert_eq!(seen, [true; 4]);
}

#[test]
fn pixels_are_in_unit_range_and_on_the_byte_grid() {
    for s in datagen::generate_dataset::<f64>(20, 3, 32).unwrap() {
        for &v in s.image.pixels() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }
}

#[test]
fn parallel_generation_matches_sequential() {
    let par = datagen::generate_dataset::<f64>(12, 77, 32).unwrap();
    for s in &par {
        assert_eq!(&datagen::generate_sample::<f64>(s.sample_id, s.seed, 32).unwrap(), s);
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = datagen::generate_dataset::<f64>(3, 4, 32).unwrap();
    datagen::save_dataset(dir.path(), &set, 4).unwrap();
    let back = datagen::load_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(back.samples, set);
    assert_eq!(back.classes, CLASS_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    assert_eq!((back.seed, back.size), (4, 32));

    let count = |sub: &str| std::fs::read_dir(dir.path().join(sub)).unwrap().count();
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    assert_eq!(index["n"], 3);
    assert_eq!(count("images"), 3);
    assert_eq!(count("labels"), 3);
}

#[test]
fn label_png_re_encodes_to_the_original_one_hot() {
    let dir = tempfile::tempdir().unwrap();
    let set = datagen::generate_dataset::<f64>(2, 9, 32).unwrap();
    datagen::save_dataset(dir.path(), &set, 9).unwrap();
    for s in &set {
        let img = image::open(dir.path().join(format!("labels/{:06}.png", s.sample_id))).unwrap().to_luma8();
        let one_hot: Vec<u8> = img.pixels().flat_map(|p| (0..4u8).map(move |c| u8::from(p.0[0] == c))).collect();
        assert_eq!(LabelMap::from_one_hot(32, 32, 4, &one_hot).unwrap(), s.labels);
        assert_eq!(one_hot, s.labels.one_hot());
    }
}

#[test]
fn corrupt_or_missing_index_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = datagen::load_dataset::<f64>(dir.path()).unwrap_err().to_string();
    assert!(err.contains("index.json"), "{err}");
    std::fs::write(dir.path().join("index.json"), "[1, 2").unwrap();
    let err = datagen::load_dataset::<f64>(dir.path()).unwrap_err().to_string();
    assert!(err.contains("index.json"), "{err}");
}

#[test]
fn missing_image_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    datagen::save_dataset(dir.path(), &datagen::generate_dataset::<f64>(2, 1, 32).unwrap(), 1).unwrap();
    std::fs::remove_file(dir.path().join("images/000001.png")).unwrap();
    let err = datagen::load_dataset::<f64>(dir.path()).unwrap_err().to_string();
    assert!(err.contains("000001.png"), "{err}");
}

#[test]
fn f32_samples_match_f64_on_the_byte_grid() {
    let a = datagen::generate_dataset::<f64>(3, 2, 32).unwrap();
    let b = datagen::generate_dataset::<f32>(3, 2, 32).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.to_rgb8(), y.image.to_rgb8());
        assert_eq!(x.labels, y.labels);
    }
}

#[test]
fn explicit_shapes_render_with_their_labels() {
    let circle = ShapeSpec { kind: ShapeKind::Circle, cx: 32, cy: 32, extent: 10, color: [0.8, 0.2, 0.3] };
    let (image, labels) = datagen::render_shapes::<f64>(&[circle.clone()], 64, 5).unwrap();
    assert_eq!(labels.get(32, 32), oracle_class(ShapeKind::Circle));
    assert_eq!(labels.labels().iter().filter(|&&l| l != 0).count(), (0..64 * 64).filter(|i| oracle_inside(&circle, i % 64, i / 64)).count());
    assert_eq!((image.height(), image.width()), (64, 64));
    assert_eq!(datagen::render_shapes::<f64>(&[circle], 64, 5).unwrap().0, image);
    assert!(datagen::render_shapes::<f64>(&[], 16, 0).is_err());
}
