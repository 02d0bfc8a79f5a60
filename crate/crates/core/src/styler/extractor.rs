//! Fixed convolutional feature extractors.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Params, ParamsBuilder};
use crate::scalar::Scalar;

/// A frozen network mapping a `[3, H, W]` image to an ordered list of
/// feature maps. Implement this to plug in a different (e.g. pretrained)
/// extractor.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn levels(&self) -> usize;

    /// Smallest accepted input height/width.
    fn min_size(&self) -> usize;

    /// Records the forward pass on `tape`, returning one node per level.
    fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { widths: vec![8, 16, 32, 64], seed: 0x0C0F_FEE5 }
    }
}

/// Bias-free 3×3 conv + ReLU per level; level 1 keeps full resolution and
/// every later level halves it.
#[derive(Clone, Debug)]
pub struct ConvExtractor<T> {
    config: ExtractorConfig,
    layers: Vec<Conv>,
    params: Params<T>,
}

impl<T: Scalar> ConvExtractor<T> {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("extractor widths {:?}", config.widths)));
        }
        let mut builder = ParamsBuilder::new(config.seed);
        let mut in_ch = 3;
        let layers = config
            .widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let stride = if l == 0 { 1 } else { 2 };
                let conv = builder.conv(ConvSpec::new(in_ch, w, 3).stride(stride).no_bias());
                in_ch = w;
                conv
            })
            .collect();
        Ok(ConvExtractor { config, layers, params: builder.finish() })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvExtractor<T> {
    fn levels(&self) -> usize {
        self.layers.len()
    }

    fn min_size(&self) -> usize {
        1 << (self.layers.len() - 1)
    }

    fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let (_, h, w) = tape.value(image).chw();
        if h.min(w) < self.min_size() {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} below extractor minimum {}",
                self.min_size()
            )));
        }
        let bound = self.params.bind_frozen(tape);
        let mut x = image;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = layer.forward(tape, &bound, x)?;
            x = tape.relu(y);
            out.push(x);
        }
        Ok(out)
    }
}
