//! DAB-style segmentation network: a stride-2 stem, blocks that run a
//! depthwise-separable branch next to a dilated depthwise branch and fuse
//! them pointwise, a 1×1 classifier and bilinear upsampling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Params, ParamsBuilder};
use crate::scalar::Scalar;

/// Parameter budget of the default network.
pub const PARAM_BUDGET: usize = 760_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub width: usize,
    /// One block per entry; the value is the dilation of its context branch.
    pub dilations: Vec<usize>,
    pub classes: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { width: 32, dilations: vec![2, 4, 8], classes: 4 }
    }
}

#[derive(Clone, Debug)]
struct DabBlock {
    local_dw: Conv,
    local_pw: Conv,
    context_dw: Conv,
    fuse: Conv,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    stem: Conv,
    blocks: Vec<DabBlock>,
    classifier: Conv,
}

impl SegNet {
    pub fn build<T: Scalar>(config: SegNetConfig, seed: u64) -> Result<(Self, Params<T>)> {
        if config.width == 0 || config.classes < 2 || config.dilations.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid segmentation config {config:?}")));
        }
        let c = config.width;
        let mut b = ParamsBuilder::new(seed);
        let stem = b.conv(ConvSpec::new(3, c, 3).stride(2));
        let blocks = config
            .dilations
            .iter()
            .map(|&d| DabBlock {
                local_dw: b.conv(ConvSpec::new(c, c, 3).depthwise()),
                local_pw: b.conv(ConvSpec::new(c, c, 1)),
                context_dw: b.conv(ConvSpec::new(c, c, 3).depthwise().dilation(d)),
                fuse: b.conv_scaled(ConvSpec::new(2 * c, c, 1), 0.5),
            })
            .collect();
        let classifier = b.conv(ConvSpec::new(c, config.classes, 1));
        let params = b.finish();
        if params.count() >= PARAM_BUDGET {
            return Err(Error::Model(format!(
                "segmentation network has {} parameters, budget is {PARAM_BUDGET}",
                params.count()
            )));
        }
        Ok((SegNet { config, stem, blocks, classifier }, params))
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    /// Class scores (pre-softmax) at input resolution, `[K, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], image: Var) -> Result<Var> {
        let (_, h, w) = tape.value(image).chw();
        let x = self.stem.forward(tape, bound, image)?;
        let mut x = tape.relu(x);
        for blk in &self.blocks {
            let a = blk.local_dw.forward(tape, bound, x)?;
            let a = blk.local_pw.forward(tape, bound, a)?;
            let a = tape.relu(a);
            let c = blk.context_dw.forward(tape, bound, x)?;
            let c = tape.relu(c);
            let cat = tape.concat(a, c)?;
            let f = blk.fuse.forward(tape, bound, cat)?;
            let sum = tape.add(x, f)?;
            x = tape.relu(sum);
        }
        let logits = self.classifier.forward(tape, bound, x)?;
        Ok(tape.resize_bilinear(logits, h, w))
    }
}
