//! Lightweight semantic segmentation: probability maps, the pixel-wise
//! cross-entropy objective, class masks by argmax and mean IoU.

mod net;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use net::{SegNet, SegNetConfig, PARAM_BUDGET};

use crate::autograd::{Tape, LOG_EPS};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image_core::{ClassId, ClassMask, Frame};
use crate::nn::{self, Adam, AdamConfig, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Ground truth as one class index per pixel; the one-hot view is derived.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} label map with {} labels", labels.len())));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::InvalidArgument(format!("{classes} classes")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidValue(format!("label {l} out of range for {classes} classes")));
        }
        Ok(LabelMap { height, width, classes, labels })
    }

    /// From an `H × W × K` one-hot array; every pixel must hold exactly one 1.
    pub fn from_one_hot(height: usize, width: usize, classes: usize, one_hot: &[u8]) -> Result<Self> {
        if one_hot.len() != height * width * classes {
            return Err(Error::Shape(format!("one-hot of length {} for {height}x{width}x{classes}", one_hot.len())));
        }
        let labels = one_hot
            .chunks_exact(classes)
            .enumerate()
            .map(|(p, px)| {
                let ones: Vec<usize> = px.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c).collect();
                if ones.len() != 1 || px.iter().any(|&v| v > 1) {
                    return Err(Error::InvalidValue(format!("pixel {p} is not one-hot: {px:?}")));
                }
                Ok(ones[0] as u8)
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, classes, labels)
    }

    pub fn one_hot(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.labels.len() * self.classes];
        for (p, &l) in self.labels.iter().enumerate() {
            out[p * self.classes + l as usize] = 1;
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn mask(&self, class: ClassId) -> ClassMask {
        ClassMask::from_fn(class, self.height, self.width, |y, x| u32::from(self.get(y, x)) == class)
    }
}

/// Per-pixel class probabilities, stored class-major (`[K, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    classes: usize,
    height: usize,
    width: usize,
    probs: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    /// Validates values in `[0, 1]` and per-pixel sums of 1 within 1e-6.
    pub fn new(classes: usize, height: usize, width: usize, probs: Vec<T>) -> Result<Self> {
        if classes == 0 || height == 0 || width == 0 || probs.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{classes}x{height}x{width} probability map with {} values",
                probs.len()
            )));
        }
        if let Some(v) = probs.iter().find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidValue(format!("probability {v} outside [0, 1]")));
        }
        let n = height * width;
        for p in 0..n {
            let s: f64 = (0..classes).map(|c| probs[c * n + p].to_f64_lossy()).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidValue(format!("probabilities at pixel {p} sum to {s}")));
            }
        }
        Ok(ProbMap { classes, height, width, probs })
    }

    /// Softmax over the class axis of `[K, H, W]` scores.
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        let (k, h, w) = logits.chw();
        let n = h * w;
        let z = logits.data();
        let mut probs = vec![T::zero(); k * n];
        for p in 0..n {
            let m = (0..k).map(|c| z[c * n + p]).fold(T::neg_infinity(), T::max);
            let s: T = (0..k).map(|c| (z[c * n + p] - m).exp()).sum();
            for c in 0..k {
                probs[c * n + p] = (z[c * n + p] - m).exp() / s;
            }
        }
        Self::new(k, h, w, probs)
    }

    /// Exact one-hot probabilities for a label map.
    pub fn from_labels(labels: &LabelMap) -> Self {
        let n = labels.height * labels.width;
        let mut probs = vec![T::zero(); labels.classes * n];
        for (p, &l) in labels.labels.iter().enumerate() {
            probs[l as usize * n + p] = T::one();
        }
        ProbMap { classes: labels.classes, height: labels.height, width: labels.width, probs }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> T {
        self.probs[(class * self.height + y) * self.width + x]
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// Argmax class per pixel; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.probs[c * n + p] > self.probs[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn to_labels(&self) -> LabelMap {
        LabelMap { height: self.height, width: self.width, classes: self.classes, labels: self.argmax() }
    }
}

/// `−Σ_{h,w} Σ_c Y_{h,w,c} · log(max(P_{h,w,c}, ε))`.
pub fn cross_entropy<T: Scalar>(pred: &ProbMap<T>, gt: &LabelMap) -> Result<T> {
    if pred.height != gt.height || pred.width != gt.width || pred.classes != gt.classes {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.height, pred.width, pred.classes, gt.height, gt.width, gt.classes
        )));
    }
    let n = pred.height * pred.width;
    let eps = T::of(LOG_EPS);
    Ok(gt
        .labels
        .iter()
        .enumerate()
        .map(|(p, &l)| -(pred.probs[l as usize * n + p].max(eps)).ln())
        .sum())
}

/// Binary mask of pixels whose argmax is `class`.
pub fn extract_mask<T: Scalar>(prob: &ProbMap<T>, class: ClassId) -> Result<ClassMask> {
    if class as usize >= prob.classes {
        return Err(Error::UnknownClass(class));
    }
    let bits = prob.argmax().into_iter().map(|c| u8::from(u32::from(c) == class)).collect();
    ClassMask::new(class, prob.height, prob.width, bits)
}

/// Masks for every class; they partition the image.
pub fn extract_all_masks<T: Scalar>(prob: &ProbMap<T>) -> Vec<ClassMask> {
    let am = prob.argmax();
    (0..prob.classes as u32)
        .map(|c| ClassMask::from_fn(c, prob.height, prob.width, |y, x| u32::from(am[y * prob.width + x]) == c))
        .collect()
}

/// Per-class IoU accumulated over the whole set; `None` for classes absent
/// from the ground truth.
pub fn per_class_iou<T: Scalar>(preds: &[ProbMap<T>], gts: &[LabelMap]) -> Result<Vec<Option<f64>>> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("mean IoU of an empty set".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    let k = gts[0].classes;
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    let mut present = vec![false; k];
    for (p, g) in preds.iter().zip(gts) {
        if p.height != g.height || p.width != g.width || p.classes != k || g.classes != k {
            return Err(Error::Shape("prediction and ground-truth shapes differ".into()));
        }
        for (&a, &b) in p.argmax().iter().zip(&g.labels) {
            present[b as usize] = true;
            if a == b {
                inter[a as usize] += 1;
                union[a as usize] += 1;
            } else {
                union[a as usize] += 1;
                union[b as usize] += 1;
            }
        }
    }
    Ok((0..k).map(|c| present[c].then(|| inter[c] as f64 / union[c] as f64)).collect())
}

/// Mean of per-class IoU over classes present in the ground truth.
pub fn mean_iou<T: Scalar>(preds: &[ProbMap<T>], gts: &[LabelMap]) -> Result<f64> {
    let ious: Vec<f64> = per_class_iou(preds, gts)?.into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHyperParams {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub net: SegNetConfig,
}

impl Default for SegHyperParams {
    fn default() -> Self {
        SegHyperParams { steps: 500, batch_size: 8, learning_rate: 0.01, seed: 0, net: SegNetConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainingMeta {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Mean per-pixel cross-entropy over the training set after the last step.
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    net: SegNet,
    params: Params<T>,
    class_names: Vec<String>,
    meta: SegTrainingMeta,
}

impl<T: Scalar> SegModel<T> {
    /// Untrained model with seeded parameters.
    pub fn init(config: SegNetConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if class_names.len() != config.classes {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} network outputs",
                class_names.len(),
                config.classes
            )));
        }
        let (net, params) = SegNet::build(config, seed)?;
        Ok(SegModel {
            net,
            params,
            class_names,
            meta: SegTrainingMeta { steps: 0, batch_size: 0, learning_rate: 0.0, seed, final_loss: f64::NAN },
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn meta(&self) -> &SegTrainingMeta {
        &self.meta
    }

    pub fn logits(&self, image: &Frame<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(image.to_tensor());
        let y = self.net.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict(&self, image: &Frame<T>) -> Result<ProbMap<T>> {
        predict(image, self)
    }

    /// Mean per-pixel cross-entropy over a labelled set.
    pub fn mean_loss(&self, data: &[(Frame<T>, LabelMap)]) -> Result<f64> {
        let parts = data
            .par_iter()
            .map(|(f, l)| Ok((cross_entropy(&self.predict(f)?, l)?.to_f64_lossy(), l.labels.len())))
            .collect::<Result<Vec<_>>>()?;
        let (sum, n) = parts.iter().fold((0.0, 0usize), |(s, n), (l, c)| (s + l, n + c));
        Ok(sum / n.max(1) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = SegManifest {
            schema: SCHEMA_VERSION,
            kind: "segmentation".into(),
            dtype: T::DTYPE.into(),
            classes: self.class_names.clone(),
            block_config: self.net.config().clone(),
            seed: self.meta.seed,
            steps: self.meta.steps,
            batch_size: self.meta.batch_size,
            learning_rate: self.meta.learning_rate,
            final_loss: self.meta.final_loss,
            parameter_count: self.params.count(),
        };
        checkpoint::write_manifest(dir, &manifest)?;
        checkpoint::write_blob(dir, checkpoint::WEIGHTS, &self.params.to_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: SegManifest = checkpoint::read_manifest(dir)?;
        checkpoint::check_schema(dir, m.schema, SCHEMA_VERSION)?;
        checkpoint::check_dtype(dir, &m.dtype, T::DTYPE)?;
        if m.kind != "segmentation" {
            return Err(Error::file(
                dir.join(checkpoint::MANIFEST),
                format!("checkpoint kind `{}` is not a segmentation model", m.kind),
            ));
        }
        let mut model = Self::init(m.block_config, m.classes, m.seed)
            .map_err(|e| Error::file(dir.join(checkpoint::MANIFEST), e))?;
        model
            .params
            .load_bytes(&checkpoint::read_blob(dir, checkpoint::WEIGHTS)?)
            .map_err(|e| Error::file(dir.join(checkpoint::WEIGHTS), e))?;
        model.meta = SegTrainingMeta {
            steps: m.steps,
            batch_size: m.batch_size,
            learning_rate: m.learning_rate,
            seed: m.seed,
            final_loss: m.final_loss,
        };
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SegManifest {
    schema: u32,
    kind: String,
    dtype: String,
    classes: Vec<String>,
    block_config: SegNetConfig,
    seed: u64,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    final_loss: f64,
    parameter_count: usize,
}

/// Softmax class probabilities at input resolution.
pub fn predict<T: Scalar>(image: &Frame<T>, model: &SegModel<T>) -> Result<ProbMap<T>> {
    ProbMap::from_logits(&model.logits(image)?).map_err(|e| Error::Model(format!("predict: {e}")))
}

/// Summed cross-entropy and parameter gradients for one labelled image.
pub fn loss_and_grads<T: Scalar>(
    net: &SegNet,
    params: &Params<T>,
    image: &Tensor<T>,
    labels: &LabelMap,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(image.clone());
    let logits = net.forward(&mut tape, &bound, x)?;
    let loss = tape.softmax_xent(logits, &labels.labels)?;
    let value = tape.value(loss).item().to_f64_lossy();
    let mut grads = tape.backward(loss);
    Ok((value, params.collect_grads(&mut grads, &bound)))
}

/// Minimizes mean per-pixel cross-entropy with Adam on shuffled minibatches.
pub fn train_seg<T: Scalar>(
    dataset: &[(Frame<T>, LabelMap)],
    class_names: Vec<String>,
    hp: &SegHyperParams,
) -> Result<SegModel<T>> {
    let Some((_, first)) = dataset.first() else {
        return Err(Error::InvalidArgument("training set is empty".into()));
    };
    if !(hp.learning_rate.is_finite() && hp.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", hp.learning_rate)));
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some((_, l)) = dataset.iter().find(|(_, l)| l.classes != first.classes) {
        return Err(Error::InvalidArgument(format!(
            "inconsistent class count: {} vs {}",
            l.classes, first.classes
        )));
    }
    if first.classes != hp.net.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, network {}",
            first.classes, hp.net.classes
        )));
    }
    let mut model = SegModel::init(hp.net.clone(), class_names, hp.seed)?;
    model.meta = SegTrainingMeta {
        steps: hp.steps,
        batch_size: hp.batch_size,
        learning_rate: hp.learning_rate,
        seed: hp.seed,
        final_loss: f64::NAN,
    };
    let tensors: Vec<Tensor<T>> = dataset.iter().map(|(f, _)| f.to_tensor()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5E6_0000);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut opt = Adam::new(AdamConfig::with_lr(hp.learning_rate), &model.params);
    for step in 0..hp.steps {
        let mut batch = Vec::with_capacity(hp.batch_size);
        while batch.len() < hp.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let parts = batch
            .par_iter()
            .map(|&i| loss_and_grads(&model.net, &model.params, &tensors[i], &dataset[i].1))
            .collect::<Result<Vec<_>>>()?;
        let pixels: usize = batch.iter().map(|&i| dataset[i].1.labels.len()).sum();
        let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / pixels as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: step, loss });
        }
        let inv = T::one() / T::of(pixels as f64);
        let grads: Vec<Tensor<T>> = nn::sum_grads(parts.into_iter().map(|(_, g)| g).collect())
            .expect("non-empty batch")
            .into_iter()
            .map(|g| g.map(|v| v * inv))
            .collect();
        opt.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::Diverged { iteration: step, loss });
        }
        if step % 50 == 0 {
            log::debug!("segmentation step {step}: loss {loss:.5}");
        }
    }
    let final_loss = model.mean_loss(dataset)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { iteration: hp.steps, loss: final_loss });
    }
    model.meta.final_loss = final_loss;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob2(class0: [f64; 4]) -> ProbMap<f64> {
        let mut probs = class0.to_vec();
        probs.extend(class0.iter().map(|p| 1.0 - p));
        ProbMap::new(2, 2, 2, probs).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let gt = LabelMap::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let exact = ProbMap::<f64>::from_labels(&gt);
        assert_eq!(cross_entropy(&exact, &gt).unwrap(), 0.0);
        let uniform = ProbMap::new(4, 2, 2, vec![0.25; 16]).unwrap();
        assert!((cross_entropy(&uniform, &gt).unwrap() - 4.0 * 4f64.ln()).abs() < 1e-12);
        let one = LabelMap::new(1, 1, 2, vec![0]).unwrap();
        let half = ProbMap::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&half, &one).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&half, &gt).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let gt = LabelMap::new(1, 1, 2, vec![1]).unwrap();
        let p = ProbMap::new(2, 1, 1, vec![1.0, 0.0]).unwrap();
        assert!((cross_entropy(&p, &gt).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn extract_mask_examples() {
        let p = prob2([0.9, 0.4, 0.5, 0.1]);
        assert_eq!(extract_mask(&p, 0).unwrap().bits(), &[1, 0, 1, 0]);
        assert_eq!(extract_mask(&p, 1).unwrap().bits(), &[0, 1, 0, 1]);
        assert!(matches!(extract_mask(&p, 2), Err(Error::UnknownClass(2))));
        let certain = prob2([1.0; 4]);
        assert_eq!(extract_mask(&certain, 0).unwrap().count(), 4);
        assert_eq!(extract_mask(&certain, 1).unwrap().count(), 0);
    }

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ProbMap::new(2, 1, 1, vec![1.5, -0.5]).is_err());
        assert!(ProbMap::new(2, 1, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn one_hot_round_trip_and_validation() {
        let l = LabelMap::new(2, 3, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(LabelMap::from_one_hot(2, 3, 3, &l.one_hot()).unwrap(), l);
        assert!(LabelMap::from_one_hot(1, 1, 3, &[1, 1, 0]).is_err());
        assert!(LabelMap::from_one_hot(1, 1, 3, &[0, 0, 0]).is_err());
        assert!(LabelMap::new(1, 1, 2, vec![2]).is_err());
    }

    #[test]
    fn mean_iou_examples() {
        let gt = LabelMap::new(4, 4, 2, (0..16).map(|i| u8::from(i / 4 < 2)).collect()).unwrap();
        let pred_labels = LabelMap::new(4, 4, 2, (0..16).map(|i| u8::from(i % 4 < 2)).collect()).unwrap();
        let pred = ProbMap::<f64>::from_labels(&pred_labels);
        let ious = per_class_iou(&[pred], &[gt.clone()]).unwrap();
        assert!((ious[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_iou(&[ProbMap::<f64>::from_labels(&gt)], &[gt.clone()]).unwrap(), 1.0);
        let flipped = LabelMap::new(4, 4, 2, gt.labels().iter().map(|&l| 1 - l).collect()).unwrap();
        assert_eq!(mean_iou(&[ProbMap::<f64>::from_labels(&flipped)], &[gt]).unwrap(), 0.0);
        assert!(mean_iou::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn default_network_fits_budget() {
        let (_, params) = SegNet::build::<f32>(SegNetConfig::default(), 0).unwrap();
        assert!(params.count() < PARAM_BUDGET);
        let huge = SegNetConfig { width: 512, ..SegNetConfig::default() };
        assert!(matches!(SegNet::build::<f32>(huge, 0), Err(Error::Model(_))));
    }
}
