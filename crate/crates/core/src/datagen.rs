//! Deterministic synthetic shapes dataset (background, circle, square,
//! triangle) and its on-disk layout.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{ClassId, Frame};
use crate::scalar::Scalar;
use crate::segmenter::LabelMap;

pub const SCHEMA_VERSION: u32 = 1;
pub const CLASS_NAMES: [&str; 4] = ["background", "circle", "square", "triangle"];
pub const BACKGROUND: ClassId = 0;
pub const CIRCLE: ClassId = 1;
pub const SQUARE: ClassId = 2;
pub const TRIANGLE: ClassId = 3;
pub const MIN_SIZE: usize = 32;

const NOISE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn class_id(self) -> ClassId {
        match self {
            ShapeKind::Circle => CIRCLE,
            ShapeKind::Square => SQUARE,
            ShapeKind::Triangle => TRIANGLE,
        }
    }
}

/// Geometry of one rendered shape. `extent` is the radius of a circle, the
/// half side of a square, or the half height (and half base) of an upright
/// isosceles triangle. The centre is an integer pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: i64,
    pub cy: i64,
    pub extent: i64,
    pub color: [f64; 3],
}

impl ShapeSpec {
    /// Whether the pixel centred at `(x, y)` is inside the shape.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let (dx, dy, e) = (x - self.cx, y - self.cy, self.extent);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= e * e,
            ShapeKind::Square => dx.abs() <= e && dy.abs() <= e,
            // apex at (cx, cy - e), base at cy + e with half width e
            ShapeKind::Triangle => dy.abs() <= e && 2 * dx.abs() <= dy + e,
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Circle => self.extent as f64,
            ShapeKind::Square | ShapeKind::Triangle => self.extent as f64 * std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    pub sample_id: usize,
    pub seed: u64,
    pub image: Frame<T>,
    pub labels: LabelMap,
    pub shapes: Vec<ShapeSpec>,
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 of (seed, index)
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Solid fill of random hue; class identity is carried by geometry only.
fn shape_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(rng.random_range(0.0..1.0), rng.random_range(0.45..0.95), rng.random_range(0.55..0.95))
}

/// Renders one sample; fully determined by `(seed, size)`.
pub fn generate_sample<T: Scalar>(sample_id: usize, seed: u64, size: usize) -> Result<SyntheticSample<T>> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("image size {size} below minimum {MIN_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as i64;
    let count = rng.random_range(1..=3);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(count);
    let (min_e, max_e) = ((s / 10).max(3), (s / 6).max(4));
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let extent = rng.random_range(min_e..=max_e);
        let margin = extent + 1;
        let cx = rng.random_range(margin..s - margin);
        let cy = rng.random_range(margin..s - margin);
        let color = shape_color(&mut rng);
        let cand = ShapeSpec { kind, cx, cy, extent, color };
        let clear = shapes.iter().all(|o| {
            let d = (((o.cx - cx).pow(2) + (o.cy - cy).pow(2)) as f64).sqrt();
            d > o.bounding_radius() + cand.bounding_radius() + 2.0
        });
        if clear {
            shapes.push(cand);
        }
    }

    let (image, labels) = paint(&shapes, size, &mut rng)?;
    Ok(SyntheticSample { sample_id, seed, image, labels, shapes })
}

/// Renders the given shapes over a random background; the background and
/// noise are drawn from `seed`. Shapes are painted in order, earlier ones on top.
pub fn render_shapes<T: Scalar>(shapes: &[ShapeSpec], size: usize, seed: u64) -> Result<(Frame<T>, LabelMap)> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("image size {size} below minimum {MIN_SIZE}")));
    }
    paint(shapes, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn paint<T: Scalar>(shapes: &[ShapeSpec], size: usize, rng: &mut ChaCha8Rng) -> Result<(Frame<T>, LabelMap)> {
    let s = size as i64;
    let bg_base = rng.random_range(0.25..0.6);
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut labels = vec![BACKGROUND as u8; size * size];
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..s {
        for x in 0..s {
            let inside = shapes.iter().find(|sh| sh.contains(x, y));
            let fill = match inside {
                Some(sh) => {
                    labels[(y * s + x) as usize] = sh.kind.class_id() as u8;
                    sh.color
                }
                None => {
                    let ramp = gx * (x as f64 / s as f64 - 0.5) + gy * (y as f64 / s as f64 - 0.5);
                    bg_tint.map(|t| bg_base + t + ramp)
                }
            };
            for c in fill {
                let v = (c + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0);
                // 8-bit grid so PNG round trips are exact
                pixels.push(T::of((v * 255.0 + 0.5).floor() / 255.0));
            }
        }
    }
    Ok((Frame::new(size, size, pixels)?, LabelMap::new(size, size, CLASS_NAMES.len(), labels)?))
}

/// `n` samples whose per-sample seeds derive from `(seed, index)`, so
/// generation order does not affect the output.
pub fn generate_dataset<T: Scalar>(n: usize, seed: u64, size: usize) -> Result<Vec<SyntheticSample<T>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("image size {size} below minimum {MIN_SIZE}")));
    }
    (0..n).into_par_iter().map(|i| generate_sample(i, sample_seed(seed, i), size)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    schema: u32,
    n: usize,
    seed: u64,
    size: usize,
    classes: Vec<String>,
    samples: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: usize,
    seed: u64,
    shapes: Vec<ShapeSpec>,
}

fn file_name(id: usize) -> String {
    format!("{id:06}.png")
}

pub fn save_dataset<T: Scalar>(dir: &Path, samples: &[SyntheticSample<T>], seed: u64) -> Result<()> {
    let size = samples.first().map(|s| s.image.height()).unwrap_or(0);
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        s.image.save_png(&dir.join("images").join(file_name(s.sample_id)))?;
        let path = dir.join("labels").join(file_name(s.sample_id));
        image::save_buffer(
            &path,
            s.labels.labels(),
            s.labels.width() as u32,
            s.labels.height() as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::file(&path, e))
    })?;
    let index = DatasetIndex {
        schema: SCHEMA_VERSION,
        n: samples.len(),
        seed,
        size,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        samples: samples.iter().map(|s| IndexEntry { id: s.sample_id, seed: s.seed, shapes: s.shapes.clone() }).collect(),
    };
    let path = dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index).map_err(|e| Error::file(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// A loaded dataset plus its class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub classes: Vec<String>,
    pub seed: u64,
    pub size: usize,
    pub samples: Vec<SyntheticSample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn pairs(&self) -> Vec<(Frame<T>, LabelMap)> {
        self.samples.iter().map(|s| (s.image.clone(), s.labels.clone())).collect()
    }
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::file(&path, format!("corrupt index: {e}")))?;
    if index.schema != SCHEMA_VERSION {
        return Err(Error::file(&path, format!("schema version {}, expected {SCHEMA_VERSION}", index.schema)));
    }
    if index.samples.len() != index.n {
        return Err(Error::file(&path, format!("index lists {} samples but n = {}", index.samples.len(), index.n)));
    }
    let classes = index.classes.len();
    let samples = index
        .samples
        .par_iter()
        .map(|entry| -> Result<SyntheticSample<T>> {
            let image = Frame::load_png(&dir.join("images").join(file_name(entry.id)))?;
            let lpath = dir.join("labels").join(file_name(entry.id));
            let img = image::open(&lpath).map_err(|e| Error::file(&lpath, e))?.to_luma8();
            let labels = LabelMap::new(img.height() as usize, img.width() as usize, classes, img.into_raw())
                .map_err(|e| Error::file(&lpath, e))?;
            Ok(SyntheticSample { sample_id: entry.id, seed: entry.seed, image, labels, shapes: entry.shapes.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { classes: index.classes, seed: index.seed, size: index.size, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = generate_dataset::<f64>(5, 7, 32).unwrap();
        let b = generate_dataset::<f64>(5, 7, 32).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset::<f64>(5, 8, 32).unwrap());
        assert!(generate_dataset::<f64>(1, 0, 31).is_err());
        assert!(generate_dataset::<f64>(0, 0, 64).is_err());
    }

    #[test]
    fn shapes_are_disjoint_and_labelled() {
        for s in generate_dataset::<f64>(40, 3, 64).unwrap() {
            assert!((1..=3).contains(&s.shapes.len()));
            for y in 0..64 {
                for x in 0..64 {
                    let hits: Vec<_> = s.shapes.iter().filter(|sh| sh.contains(x, y)).collect();
                    assert!(hits.len() <= 1);
                    let want = hits.first().map_or(BACKGROUND, |sh| sh.kind.class_id());
                    assert_eq!(u32::from(s.labels.get(y as usize, x as usize)), want);
                }
            }
        }
    }

    #[test]
    fn triangle_contains_its_centre() {
        let t = ShapeSpec { kind: ShapeKind::Triangle, cx: 10, cy: 10, extent: 4, color: [0.0; 3] };
        assert!(t.contains(10, 10));
        assert!(t.contains(10, 6));
        assert!(!t.contains(9, 6));
        assert!(t.contains(6, 14) && t.contains(14, 14));
        assert!(!t.contains(10, 15));
    }
}
