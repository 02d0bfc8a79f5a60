//! Feature pyramids, Gram matrices and the perceptual loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::image_core::Frame;
use crate::scalar::Scalar;
use crate::styler::extractor::FeatureExtractor;
use crate::tensor::Tensor;

/// Index (0-based) of the pyramid level used for the content term.
pub const CONTENT_LEVEL: usize = 1;

/// One `C × H × W` level of a feature pyramid (`level` is 1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    level: usize,
    values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(level: usize, values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 3 || values.shape().contains(&0) {
            return Err(Error::Shape(format!("feature map must be non-empty CHW, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::InvalidValue(format!("non-finite value in level {level} features")));
        }
        Ok(FeatureMap { level, values })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<FeatureMap<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<FeatureMap<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        if levels.windows(2).any(|w| w[0].level >= w[1].level) {
            return Err(Error::InvalidArgument("pyramid levels must be strictly increasing".into()));
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[FeatureMap<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, index: usize) -> &FeatureMap<T> {
        &self.levels[index]
    }

    pub fn grams(&self) -> Vec<GramMatrix<T>> {
        self.levels.iter().map(gram).collect()
    }
}

/// Channel co-activation matrix of one pyramid level, `C × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    level: usize,
    size: usize,
    values: Vec<T>,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn new(level: usize, size: usize, values: Vec<T>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::Shape(format!("gram of size {size} with {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite gram entry".into()));
        }
        Ok(GramMatrix { level, size, values })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.size + j]
    }

    pub(crate) fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.size, self.size], self.values.clone()).expect("gram tensor")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { content: 1.0, style: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(content: f64, style: f64, weights: LossWeights) -> Self {
        LossBreakdown { content, style, total: weights.content * content + weights.style * style }
    }
}

pub fn extract_features<T: Scalar>(image: &Frame<T>, extractor: &dyn FeatureExtractor<T>) -> Result<FeaturePyramid<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(image.to_tensor());
    let vars = extractor.forward(&mut tape, x)?;
    let levels = vars
        .iter()
        .enumerate()
        .map(|(l, &v)| FeatureMap::new(l + 1, tape.value(v).clone()))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// `G_ij = (1 / (H W)) Σ_{h,w} F_{h,w,i} F_{h,w,j}`.
pub fn gram<T: Scalar>(features: &FeatureMap<T>) -> GramMatrix<T> {
    let c = features.channels();
    let g = autograd::gram_matrix(&features.values);
    GramMatrix { level: features.level, size: c, values: g.into_data() }
}

/// `‖F_gen − F_in‖² / (C H W)`.
pub fn content_loss<T: Scalar>(generated: &FeatureMap<T>, input: &FeatureMap<T>) -> Result<T> {
    if generated.values.shape() != input.values.shape() {
        return Err(Error::Shape(format!(
            "content features {:?} vs {:?}",
            generated.values.shape(),
            input.values.shape()
        )));
    }
    let n = T::of(generated.values.len() as f64);
    let s: T = generated
        .values
        .data()
        .iter()
        .zip(input.values.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / n)
}

/// `Σ_l ‖G_gen,l − G_style,l‖²_F / C_l`.
pub fn style_loss<T: Scalar>(generated: &FeaturePyramid<T>, style_grams: &[GramMatrix<T>]) -> Result<T> {
    if generated.len() != style_grams.len() {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, style has {} grams",
            generated.len(),
            style_grams.len()
        )));
    }
    let mut total = T::zero();
    for (fm, target) in generated.levels.iter().zip(style_grams) {
        if fm.channels() != target.size {
            return Err(Error::Shape(format!(
                "level {}: {} channels vs style gram {}",
                fm.level,
                fm.channels(),
                target.size
            )));
        }
        let g = gram(fm);
        let fro: T = g.values.iter().zip(&target.values).map(|(&a, &b)| (a - b) * (a - b)).sum();
        total = total + fro / T::of(target.size as f64);
    }
    Ok(total)
}

/// Content term on the content level of `(output, input)` plus the style term
/// over every level of `output`.
pub fn perceptual_loss<T: Scalar>(
    input: &Frame<T>,
    output: &Frame<T>,
    style_grams: &[GramMatrix<T>],
    weights: LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossBreakdown> {
    if input.height() != output.height() || input.width() != output.width() {
        return Err(Error::Shape(format!(
            "input {}x{} vs output {}x{}",
            input.height(),
            input.width(),
            output.height(),
            output.width()
        )));
    }
    let f_in = extract_features(input, extractor)?;
    let f_out = extract_features(output, extractor)?;
    if f_in.len() <= CONTENT_LEVEL {
        return Err(Error::InvalidArgument(format!("extractor has {} levels; content level needs 2", f_in.len())));
    }
    let content = content_loss(f_out.level(CONTENT_LEVEL), f_in.level(CONTENT_LEVEL))?;
    let style = style_loss(&f_out, style_grams)?;
    Ok(LossBreakdown::combine(content.to_f64_lossy(), style.to_f64_lossy(), weights))
}

/// Loss nodes recorded on a tape by [`perceptual_loss_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub content: Var,
    pub style: Var,
    pub total: Var,
}

/// Tape version of [`perceptual_loss`]: `output` is a differentiable node,
/// `input_content` the precomputed content-level features of the input.
pub fn perceptual_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    output: Var,
    input_content: &Tensor<T>,
    style_grams: &[GramMatrix<T>],
    weights: LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossVars> {
    let feats = extractor.forward(tape, output)?;
    if feats.len() != style_grams.len() || feats.len() <= CONTENT_LEVEL {
        return Err(Error::Shape(format!("{} levels vs {} style grams", feats.len(), style_grams.len())));
    }
    let target = tape.constant(input_content.clone());
    let n = tape.value(feats[CONTENT_LEVEL]).len();
    let content = tape.sq_dist(feats[CONTENT_LEVEL], target, T::one() / T::of(n as f64))?;
    let mut style: Option<Var> = None;
    for (&f, g) in feats.iter().zip(style_grams) {
        let gv = tape.gram(f);
        let gt = tape.constant(g.to_tensor());
        let term = tape.sq_dist(gv, gt, T::one() / T::of(g.size as f64))?;
        style = Some(match style {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let style = style.expect("at least one level");
    let wc = tape.scale(content, T::of(weights.content));
    let ws = tape.scale(style, T::of(weights.style));
    let total = tape.add(wc, ws)?;
    Ok(LossVars { content, style, total })
}
