//! Finite-difference verification of the tape gradients.
//!
//! The numeric side always evaluates losses through the plain (non-tape)
//! loss functions, so it shares no backward code with the analytic side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_core::Frame;
use crate::segmenter::{self, LabelMap, ProbMap, SegNetConfig};
use crate::styler::{self, ConvExtractor, ExtractorConfig, LossWeights, TransformConfig, TransformNet};
use crate::tensor::Tensor;

/// Denominator floor for relative errors of near-zero gradient components.
pub const REL_FLOOR: f64 = 1e-6;
/// Balances O(h²) truncation against roundoff in the double-precision forward pass.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub parameters: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    GradCheck { parameters: analytic.len(), max_rel_error: worst.0, worst_index: worst.1 }
}

/// Moves every parameter off zero so no activation sits exactly on a ReLU kink
/// (zero-initialised biases feeding dead channels otherwise do).
fn jitter(params: &mut crate::nn::Params<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let flat: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
    params.set_flat(&flat)
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize, lo: f64, hi: f64) -> Result<Frame<f64>> {
    Frame::from_fn(size, size, |_, _| std::array::from_fn(|_| rng.random_range(lo..hi)))
}

/// Tiny transform network (963 parameters) on an 8×8 input.
pub fn tiny_style_setup(seed: u64) -> Result<(TransformNet, crate::nn::Params<f64>, ConvExtractor<f64>, Frame<f64>, Frame<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, params) = TransformNet::build::<f64>(TransformConfig { width: 4, residual_blocks: 2 }, seed)?;
    let extractor = ConvExtractor::new(ExtractorConfig { widths: vec![3, 4, 5, 6], seed: seed ^ 0xE7 })?;
    let input = random_frame(&mut rng, 8, 0.2, 0.8)?;
    let style = random_frame(&mut rng, 8, 0.0, 1.0)?;
    Ok((net, params, extractor, input, style))
}

/// Perceptual-loss gradient w.r.t. all transform-network parameters.
pub fn check_perceptual_loss(seed: u64) -> Result<GradCheck> {
    let (net, mut params, extractor, input, style) = tiny_style_setup(seed)?;
    jitter(&mut params, &mut ChaCha8Rng::seed_from_u64(!seed))?;
    let grams = styler::extract_features(&style, &extractor)?.grams();
    let weights = LossWeights::default();
    let (_, grads) = styler::loss_and_grads(&net, &params, &input.to_tensor(), &grams, weights, &extractor)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

    let mut probe = params.clone();
    let numeric = central_difference(
        |flat| {
            probe.set_flat(flat)?;
            let mut tape = crate::autograd::Tape::new();
            let bound = probe.bind_frozen(&mut tape);
            let x = tape.constant(input.to_tensor());
            let y = net.forward(&mut tape, &bound, x)?;
            let out = Frame::from_tensor_clamped(tape.value(y))?;
            Ok(styler::perceptual_loss(&input, &out, &grams, weights, &extractor)?.total)
        },
        &params.flatten(),
        STEP,
    )?;
    Ok(compare(&analytic, &numeric))
}

/// Cross-entropy gradient w.r.t. pre-softmax scores of a random `k × 8 × 8` map.
pub fn check_cross_entropy_logits(seed: u64, classes: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let logits: Vec<f64> = (0..classes * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = LabelMap::new(h, w, classes, (0..h * w).map(|_| rng.random_range(0..classes as u8)).collect())?;

    let mut tape = crate::autograd::Tape::new();
    let z = tape.leaf(Tensor::from_vec(&[classes, h, w], logits.clone())?);
    let loss = tape.softmax_xent(z, labels.labels())?;
    let grads = tape.backward(loss);
    let analytic = grads.get(z).expect("logit gradient").data().to_vec();

    let numeric = central_difference(
        |flat| {
            let p = ProbMap::from_logits(&Tensor::from_vec(&[classes, h, w], flat.to_vec())?)?;
            segmenter::cross_entropy(&p, &labels)
        },
        &logits,
        STEP,
    )?;
    Ok(compare(&analytic, &numeric))
}

/// Cross-entropy gradient w.r.t. all parameters of a tiny DAB-style network.
pub fn check_segmentation_net(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SegNetConfig { width: 4, dilations: vec![2, 4], classes: 3 };
    let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let mut model = segmenter::SegModel::<f64>::init(cfg, names, seed)?;
    jitter(model.params_mut(), &mut rng)?;
    let image = random_frame(&mut rng, 8, 0.0, 1.0)?;
    let labels = LabelMap::new(8, 8, 3, (0..64).map(|_| rng.random_range(0..3)).collect())?;
    let (_, grads) = segmenter::loss_and_grads(model.net(), model.params(), &image.to_tensor(), &labels)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

    let mut probe = model.params().clone();
    let numeric = central_difference(
        |flat| {
            probe.set_flat(flat)?;
            let mut tape = crate::autograd::Tape::new();
            let bound = probe.bind_frozen(&mut tape);
            let x = tape.constant(image.to_tensor());
            let y = model.net().forward(&mut tape, &bound, x)?;
            segmenter::cross_entropy(&ProbMap::from_logits(tape.value(y))?, &labels)
        },
        &model.params().flatten(),
        STEP,
    )?;
    Ok(compare(&analytic, &numeric))
}
