//! Frames, class masks and the masked compositing operator
//! `U = R ⊙ T + (1 − R) ⊙ I`.

use std::collections::BTreeMap;
use std::path::Path;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ClassId = u32;
pub type StyleId = String;

/// An `H × W × 3` image with channel values in `[0, 1]`, stored interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("frame must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 frame needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::InvalidValue(format!("pixel value {v} at index {i} outside [0, 1]")));
        }
        Ok(Frame { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn filled_rgb(height: usize, width: usize, rgb: [T; 3]) -> Result<Self> {
        Self::new(height, width, rgb.iter().copied().cycle().take(height * width * 3).collect())
    }

    /// Builds a frame from `f(y, x) -> [r, g, b]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Converts to another scalar precision.
    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    fn same_size<U>(&self, other: &Frame<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Planar `[3, H, W]` tensor for the networks.
    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.height * self.width;
        let mut data = vec![T::zero(); 3 * n];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + p] = px[c];
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("frame tensor")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped to `[0, 1]`
    /// and NaN is rejected.
    pub fn from_tensor_clamped(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let n = h * w;
        let d = t.data();
        let mut pixels = Vec::with_capacity(3 * n);
        for p in 0..n {
            for ch in 0..3 {
                let v = d[ch * n + p];
                if v.is_nan() {
                    return Err(Error::InvalidValue("NaN in network output".into()));
                }
                pixels.push(v.max(T::zero()).min(T::one()));
            }
        }
        Self::new(h, w, pixels)
    }

    /// Box-average downsampling by an integer factor (dimensions must divide).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = T::of((factor * factor) as f64);
        Self::from_fn(h, w, |y, x| {
            let mut acc = [T::zero(); 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.pixel(y * factor + dy, x * factor + dx);
                    for c in 0..3 {
                        acc[c] = acc[c] + p[c];
                    }
                }
            }
            acc.map(|v| (v / norm).min(T::one()))
        })
    }

    /// Quantize every value to the nearest multiple of 1/255 (round half up).
    pub fn quantized(&self) -> Self {
        let pixels = self.pixels.iter().map(|&v| T::of(f64::from(to_u8(v)) / 255.0)).collect();
        Frame { height: self.height, width: self.width, pixels }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::InvalidValue(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::InvalidValue(format!("png decode: {e}")))?
            .to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }
}

/// `[0, 1]` → `0..=255`, rounding half up.
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    let scaled = (v.to_f64_lossy() * 255.0 + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

/// Binary membership mask `R_c` for one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    class_id: ClassId,
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl ClassMask {
    pub fn new(class_id: ClassId, height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} mask needs {} entries, got {}", height * width, bits.len())));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidValue(format!("mask entry {v} is not 0 or 1")));
        }
        Ok(ClassMask { class_id, height, width, bits })
    }

    pub fn from_fn(class_id: ClassId, height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| u8::from(f(i / width, i % width))).collect();
        ClassMask { class_id, height, width, bits }
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self.bits.iter().map(|&b| b * 255).collect();
        image::save_buffer(path, &data, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(|e| Error::file(path, e))
    }

    /// Reads an 8-bit grayscale PNG where 0 is outside and 255 inside.
    pub fn load_png(class_id: ClassId, path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::file(path, e))?.to_luma8();
        let bits = img
            .as_raw()
            .iter()
            .map(|&v| match v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::file(path, format!("mask value {other} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(class_id, img.height() as usize, img.width() as usize, bits)
    }
}

/// Feathered mask with weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T> {
    class_id: ClassId,
    height: usize,
    width: usize,
    weights: Vec<T>,
}

impl<T: Scalar> SoftMask<T> {
    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl<T: Scalar> From<&ClassMask> for SoftMask<T> {
    fn from(m: &ClassMask) -> Self {
        let weights = m.bits.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }).collect();
        SoftMask { class_id: m.class_id, height: m.height, width: m.width, weights }
    }
}

/// Live class → style mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleAssignment {
    entries: BTreeMap<ClassId, StyleId>,
}

impl StyleAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects duplicate class ids.
    pub fn from_entries(entries: impl IntoIterator<Item = (ClassId, StyleId)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (c, s) in entries {
            if map.insert(c, s).is_some() {
                return Err(Error::InvalidArgument(format!("class {c} assigned twice")));
            }
        }
        Ok(StyleAssignment { entries: map })
    }

    pub fn with(mut self, class: ClassId, style: impl Into<StyleId>) -> Self {
        self.entries.insert(class, style.into());
        self
    }

    pub fn get(&self, class: ClassId) -> Option<&str> {
        self.entries.get(&class).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &str)> {
        self.entries.iter().map(|(&c, s)| (c, s.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Distinct style ids, sorted.
    pub fn styles(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.values().map(String::as_str).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }
}

/// Single-class compositing: styled pixels where `mask` is 1, original elsewhere.
pub fn composite_single<T: Scalar>(input: &Frame<T>, styled: &Frame<T>, mask: &ClassMask) -> Result<Frame<T>> {
    composite_soft(input, styled, &SoftMask::from(mask))
}

/// Single-class compositing with a feathered mask; linear per-pixel blend.
pub fn composite_soft<T: Scalar>(input: &Frame<T>, styled: &Frame<T>, mask: &SoftMask<T>) -> Result<Frame<T>> {
    if !input.same_size(styled) || input.height != mask.height || input.width != mask.width {
        return Err(Error::Shape(format!(
            "input {}x{}, styled {}x{}, mask {}x{}",
            input.height, input.width, styled.height, styled.width, mask.height, mask.width
        )));
    }
    let one = T::one();
    let pixels = input
        .pixels
        .chunks_exact(3)
        .zip(styled.pixels.chunks_exact(3))
        .zip(&mask.weights)
        .flat_map(|((i, t), &r)| (0..3).map(move |c| unit(r * t[c] + (one - r) * i[c])))
        .collect();
    Ok(Frame { height: input.height, width: input.width, pixels })
}

/// Multi-class compositing over disjoint binary masks:
/// `U = Σ_c R_c ⊙ T_{a(c)} + (1 − Σ_c R_c) ⊙ I` for every assigned class `c`.
pub fn composite_multi<T: Scalar>(
    input: &Frame<T>,
    styled: &BTreeMap<StyleId, Frame<T>>,
    masks: &[ClassMask],
    assign: &StyleAssignment,
) -> Result<Frame<T>> {
    check_disjoint(masks)?;
    let soft: Vec<SoftMask<T>> = masks.iter().map(SoftMask::from).collect();
    composite_multi_soft(input, styled, &soft, assign)
}

/// Multi-class compositing with arbitrary (e.g. feathered) weights. The caller
/// guarantees the assigned weights sum to at most 1 per pixel.
pub fn composite_multi_soft<T: Scalar>(
    input: &Frame<T>,
    styled: &BTreeMap<StyleId, Frame<T>>,
    masks: &[SoftMask<T>],
    assign: &StyleAssignment,
) -> Result<Frame<T>> {
    let mut layers: Vec<(&SoftMask<T>, &Frame<T>)> = Vec::with_capacity(assign.len());
    for (class, style) in assign.iter() {
        let mask = masks
            .iter()
            .find(|m| m.class_id == class)
            .ok_or(Error::MissingMask(class))?;
        let frame = styled
            .get(style)
            .ok_or_else(|| Error::MissingStyle { class, style: style.to_string() })?;
        if !input.same_size(frame) || mask.height != input.height || mask.width != input.width {
            return Err(Error::Shape(format!(
                "class {class}: input {}x{}, styled {}x{}, mask {}x{}",
                input.height, input.width, frame.height, frame.width, mask.height, mask.width
            )));
        }
        layers.push((mask, frame));
    }
    let one = T::one();
    let mut pixels = Vec::with_capacity(input.pixels.len());
    for (p, i) in input.pixels.chunks_exact(3).enumerate() {
        let mut acc = [T::zero(); 3];
        let mut coverage = T::zero();
        for (mask, frame) in &layers {
            let r = mask.weights[p];
            let t = &frame.pixels[p * 3..p * 3 + 3];
            for c in 0..3 {
                acc[c] = acc[c] + r * t[c];
            }
            coverage = coverage + r;
        }
        for c in 0..3 {
            pixels.push(unit(acc[c] + (one - coverage) * i[c]));
        }
    }
    Ok(Frame { height: input.height, width: input.width, pixels })
}

/// Guards soft blends against rounding just outside `[0, 1]`; exact on binary masks.
fn unit<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn check_disjoint(masks: &[ClassMask]) -> Result<()> {
    for (ai, a) in masks.iter().enumerate() {
        for b in &masks[ai + 1..] {
            if a.height != b.height || a.width != b.width {
                return Err(Error::Shape(format!(
                    "masks for classes {} and {} differ in size",
                    a.class_id, b.class_id
                )));
            }
            if a.bits.iter().zip(&b.bits).any(|(&x, &y)| x & y == 1) {
                return Err(Error::OverlappingMasks { a: a.class_id, b: b.class_id });
            }
        }
    }
    Ok(())
}

/// Normalized `(2r+1) × (2r+1)` box filter with replicate padding.
pub fn feather_mask<T: Scalar>(mask: &ClassMask, radius: usize) -> SoftMask<T> {
    let (h, w) = (mask.height, mask.width);
    let src: Vec<T> = SoftMask::<T>::from(mask).weights;
    let r = radius as isize;
    let window = T::of((2 * radius + 1) as f64);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let s: T = (-r..=r).map(|d| src[y * w + clampi(x as isize + d, w)]).sum();
            horiz[y * w + x] = s / window;
        }
    }
    let mut weights = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let s: T = (-r..=r).map(|d| horiz[clampi(y as isize + d, h) * w + x]).sum();
            weights[y * w + x] = (s / window).min(T::one());
        }
    }
    SoftMask { class_id: mask.class_id, height: h, width: w, weights }
}
