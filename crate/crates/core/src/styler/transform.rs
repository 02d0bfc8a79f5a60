//! The feed-forward transform network.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Params, ParamsBuilder};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub width: usize,
    pub residual_blocks: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig { width: 16, residual_blocks: 2 }
    }
}

/// head conv → stride-2 conv → residual blocks → nearest upsample to input
/// size → output conv, added to the input and clamped to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TransformNet {
    config: TransformConfig,
    head: Conv,
    down: Conv,
    blocks: Vec<(Conv, Conv)>,
    out: Conv,
}

impl TransformNet {
    /// Architecture plus freshly initialised parameters.
    pub fn build<T: Scalar>(config: TransformConfig, seed: u64) -> Result<(Self, Params<T>)> {
        if config.width == 0 {
            return Err(Error::InvalidArgument("transform width must be positive".into()));
        }
        let c = config.width;
        let mut b = ParamsBuilder::new(seed);
        let head = b.conv(ConvSpec::new(3, c, 3));
        let down = b.conv(ConvSpec::new(c, c, 3).stride(2));
        let blocks = (0..config.residual_blocks)
            .map(|_| (b.conv(ConvSpec::new(c, c, 3)), b.conv_scaled(ConvSpec::new(c, c, 3), 0.5)))
            .collect();
        let out = b.conv_scaled(ConvSpec::new(c, 3, 3), 0.1);
        Ok((TransformNet { config, head, down, blocks, out }, b.finish()))
    }

    pub fn config(&self) -> TransformConfig {
        self.config
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], image: Var) -> Result<Var> {
        let (_, h, w) = tape.value(image).chw();
        let x = self.head.forward(tape, bound, image)?;
        let x = tape.relu(x);
        let x = self.down.forward(tape, bound, x)?;
        let mut x = tape.relu(x);
        for (a, b) in &self.blocks {
            let r = a.forward(tape, bound, x)?;
            let r = tape.relu(r);
            let r = b.forward(tape, bound, r)?;
            x = tape.add(x, r)?;
        }
        let x = tape.resize_nearest(x, h, w);
        let delta = self.out.forward(tape, bound, x)?;
        let y = tape.add(image, delta)?;
        Ok(tape.clamp01(y))
    }
}
