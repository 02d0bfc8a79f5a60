//! Feed-forward style transfer: perceptual loss, training and single-pass
//! inference.

mod extractor;
mod loss;
mod transform;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use extractor::{ConvExtractor, ExtractorConfig, FeatureExtractor};
pub use loss::{
    content_loss, extract_features, gram, perceptual_loss, perceptual_loss_on_tape, style_loss, FeatureMap,
    FeaturePyramid, GramMatrix, LossBreakdown, LossVars, LossWeights, CONTENT_LEVEL,
};
pub use transform::{TransformConfig, TransformNet};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image_core::Frame;
use crate::nn::{self, Adam, AdamConfig, Params};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const GRAMS: &str = "grams.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleHyperParams {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub transform: TransformConfig,
    pub extractor: ExtractorConfig,
}

impl Default for StyleHyperParams {
    fn default() -> Self {
        StyleHyperParams {
            iterations: 200,
            learning_rate: 0.005,
            batch_size: 4,
            weights: LossWeights::default(),
            seed: 0,
            transform: TransformConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainingMeta {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Mean loss over the content set before the first update.
    pub initial_loss: LossBreakdown,
    /// Mean loss over the content set after the last update.
    pub final_loss: LossBreakdown,
}

/// A trained transform network together with the style it was trained for.
#[derive(Clone, Debug)]
pub struct StyleModel<T> {
    net: TransformNet,
    params: Params<T>,
    extractor: ConvExtractor<T>,
    style_grams: Vec<GramMatrix<T>>,
    style_image_ref: String,
    meta: StyleTrainingMeta,
}

impl<T: Scalar> StyleModel<T> {
    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn net(&self) -> &TransformNet {
        &self.net
    }

    pub fn extractor(&self) -> &ConvExtractor<T> {
        &self.extractor
    }

    pub fn style_grams(&self) -> &[GramMatrix<T>] {
        &self.style_grams
    }

    pub fn style_image_ref(&self) -> &str {
        &self.style_image_ref
    }

    pub fn meta(&self) -> &StyleTrainingMeta {
        &self.meta
    }

    pub fn stylize(&self, image: &Frame<T>) -> Result<Frame<T>> {
        stylize(image, self)
    }

    /// Loss of `output` as a stylization of `input` under this model's style.
    pub fn loss(&self, input: &Frame<T>, output: &Frame<T>) -> Result<LossBreakdown> {
        perceptual_loss(input, output, &self.style_grams, self.meta.weights, &self.extractor)
    }

    /// Mean loss of the current network over `frames`.
    pub fn evaluate(&self, frames: &[Frame<T>]) -> Result<LossBreakdown> {
        let losses = frames
            .par_iter()
            .map(|f| self.loss(f, &self.stylize(f)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_loss(&losses, self.meta.weights))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = StyleManifest {
            schema: SCHEMA_VERSION,
            kind: "style".into(),
            dtype: T::DTYPE.into(),
            level_count: self.style_grams.len(),
            channel_widths: self.extractor.config().widths.clone(),
            extractor_seed: self.extractor.config().seed,
            transform: self.net.config(),
            weights: self.meta.weights,
            seed: self.meta.seed,
            iterations: self.meta.iterations,
            learning_rate: self.meta.learning_rate,
            batch_size: self.meta.batch_size,
            style_image_hash: self.style_image_ref.clone(),
            initial_loss: self.meta.initial_loss,
            final_loss: self.meta.final_loss,
        };
        checkpoint::write_manifest(dir, &manifest)?;
        checkpoint::write_blob(dir, checkpoint::WEIGHTS, &self.params.to_bytes())?;
        let grams: Vec<T> = self.style_grams.iter().flat_map(|g| g.values().iter().copied()).collect();
        checkpoint::write_blob(dir, GRAMS, &scalar::to_le_bytes(&grams))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: StyleManifest = checkpoint::read_manifest(dir)?;
        checkpoint::check_schema(dir, m.schema, SCHEMA_VERSION)?;
        checkpoint::check_dtype(dir, &m.dtype, T::DTYPE)?;
        let manifest_path = dir.join(checkpoint::MANIFEST);
        if m.kind != "style" {
            return Err(Error::file(&manifest_path, format!("checkpoint kind `{}` is not a style model", m.kind)));
        }
        if m.level_count != m.channel_widths.len() {
            return Err(Error::file(&manifest_path, "level_count disagrees with channel_widths"));
        }
        let extractor = ConvExtractor::new(ExtractorConfig { widths: m.channel_widths.clone(), seed: m.extractor_seed })?;
        let (net, mut params) = TransformNet::build::<T>(m.transform, m.seed)?;
        params
            .load_bytes(&checkpoint::read_blob(dir, checkpoint::WEIGHTS)?)
            .map_err(|e| Error::file(dir.join(checkpoint::WEIGHTS), e))?;
        let gram_path = dir.join(GRAMS);
        let flat = scalar::from_le_bytes::<T>(&checkpoint::read_blob(dir, GRAMS)?)
            .ok_or_else(|| Error::file(&gram_path, "truncated gram file"))?;
        let expected: usize = m.channel_widths.iter().map(|c| c * c).sum();
        if flat.len() != expected {
            return Err(Error::file(&gram_path, format!("{} values, expected {expected}", flat.len())));
        }
        let mut off = 0;
        let mut style_grams = Vec::with_capacity(m.level_count);
        for (l, &c) in m.channel_widths.iter().enumerate() {
            style_grams.push(GramMatrix::new(l + 1, c, flat[off..off + c * c].to_vec()).map_err(|e| Error::file(&gram_path, e))?);
            off += c * c;
        }
        Ok(StyleModel {
            net,
            params,
            extractor,
            style_grams,
            style_image_ref: m.style_image_hash,
            meta: StyleTrainingMeta {
                iterations: m.iterations,
                learning_rate: m.learning_rate,
                batch_size: m.batch_size,
                seed: m.seed,
                weights: m.weights,
                initial_loss: m.initial_loss,
                final_loss: m.final_loss,
            },
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StyleManifest {
    schema: u32,
    kind: String,
    dtype: String,
    level_count: usize,
    channel_widths: Vec<usize>,
    extractor_seed: u64,
    transform: TransformConfig,
    weights: LossWeights,
    seed: u64,
    iterations: usize,
    learning_rate: f64,
    batch_size: usize,
    style_image_hash: String,
    initial_loss: LossBreakdown,
    final_loss: LossBreakdown,
}

fn mean_loss(losses: &[LossBreakdown], weights: LossWeights) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let content = losses.iter().map(|l| l.content).sum::<f64>() / n;
    let style = losses.iter().map(|l| l.style).sum::<f64>() / n;
    LossBreakdown::combine(content, style, weights)
}

/// One forward pass of the transform network.
pub fn stylize<T: Scalar>(image: &Frame<T>, model: &StyleModel<T>) -> Result<Frame<T>> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let x = tape.constant(image.to_tensor());
    let y = model.net.forward(&mut tape, &bound, x)?;
    Frame::from_tensor_clamped(tape.value(y)).map_err(|e| Error::Model(format!("stylize: {e}")))
}

/// Content hash of a style image (SHA-256 of its 8-bit RGB bytes plus size).
pub fn style_image_hash<T: Scalar>(style: &Frame<T>) -> String {
    let mut bytes = format!("{}x{}:", style.height(), style.width()).into_bytes();
    bytes.extend(style.to_rgb8());
    checkpoint::sha256_hex(&bytes)
}

/// Loss value and parameter gradients of the perceptual loss for one image.
pub fn loss_and_grads<T: Scalar>(
    net: &TransformNet,
    params: &Params<T>,
    input: &Tensor<T>,
    style_grams: &[GramMatrix<T>],
    weights: LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let input_content = {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let feats = extractor.forward(&mut tape, x)?;
        tape.value(feats[CONTENT_LEVEL]).clone()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(input.clone());
    let y = net.forward(&mut tape, &bound, x)?;
    let vars = perceptual_loss_on_tape(&mut tape, y, &input_content, style_grams, weights, extractor)?;
    let loss = LossBreakdown::combine(
        tape.value(vars.content).item().to_f64_lossy(),
        tape.value(vars.style).item().to_f64_lossy(),
        weights,
    );
    let mut grads = tape.backward(vars.total);
    Ok((loss, params.collect_grads(&mut grads, &bound)))
}

/// Trains a transform network for style image `style` on `content` with Adam.
pub fn train_style<T: Scalar>(style: &Frame<T>, content: &[Frame<T>], hp: &StyleHyperParams) -> Result<StyleModel<T>> {
    if content.is_empty() {
        return Err(Error::InvalidArgument("content set is empty".into()));
    }
    if !(hp.learning_rate.is_finite() && hp.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", hp.learning_rate)));
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let extractor = ConvExtractor::<T>::new(hp.extractor.clone())?;
    if extractor.levels() <= CONTENT_LEVEL {
        return Err(Error::InvalidArgument("extractor needs at least two levels".into()));
    }
    let style_grams = extract_features(style, &extractor)?.grams();
    let (net, params) = TransformNet::build::<T>(hp.transform, hp.seed)?;
    let zero = LossBreakdown { content: 0.0, style: 0.0, total: 0.0 };
    let mut model = StyleModel {
        net,
        params,
        extractor,
        style_grams,
        style_image_ref: style_image_hash(style),
        meta: StyleTrainingMeta {
            iterations: hp.iterations,
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            seed: hp.seed,
            weights: hp.weights,
            initial_loss: zero,
            final_loss: zero,
        },
    };
    model.meta.initial_loss = model.evaluate(content)?;
    let tensors: Vec<Tensor<T>> = content.iter().map(Frame::to_tensor).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5717_E000);
    let mut order: Vec<usize> = (0..content.len()).collect();
    let mut cursor = order.len();
    let mut opt = Adam::new(AdamConfig::with_lr(hp.learning_rate), &model.params);
    for iteration in 0..hp.iterations {
        let mut batch = Vec::with_capacity(hp.batch_size);
        while batch.len() < hp.batch_size.min(content.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let parts = batch
            .par_iter()
            .map(|&i| {
                loss_and_grads(&model.net, &model.params, &tensors[i], &model.style_grams, hp.weights, &model.extractor)
            })
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<LossBreakdown> = parts.iter().map(|(l, _)| *l).collect();
        let loss = mean_loss(&losses, hp.weights);
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iteration, loss: loss.total });
        }
        let inv = T::one() / T::of(batch.len() as f64);
        let grads: Vec<Tensor<T>> = nn::sum_grads(parts.into_iter().map(|(_, g)| g).collect())
            .expect("non-empty batch")
            .into_iter()
            .map(|g| g.map(|v| v * inv))
            .collect();
        opt.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::Diverged { iteration, loss: loss.total });
        }
        if iteration % 50 == 0 {
            log::debug!("style iteration {iteration}: total {:.5}", loss.total);
        }
    }
    model.meta.final_loss = if hp.iterations == 0 { model.meta.initial_loss } else { model.evaluate(content)? };
    if !model.meta.final_loss.total.is_finite() {
        return Err(Error::Diverged { iteration: hp.iterations, loss: model.meta.final_loss.total });
    }
    Ok(model)
}
