//! Parameter storage, convolution layers and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::{ConvGeom, Tensor};

/// Shape and geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec { in_ch, out_ch, kernel, geom: ConvGeom::same(kernel), bias: true }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.geom.stride = s;
        self
    }

    /// Dilated kernel with "same" padding.
    pub fn dilation(mut self, d: usize) -> Self {
        self.geom.dilation = d;
        self.geom.pad = d * (self.kernel / 2);
        self
    }

    /// Depthwise: one filter per input channel.
    pub fn depthwise(mut self) -> Self {
        self.geom.groups = self.in_ch;
        self.out_ch = self.in_ch;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.geom.groups, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        (self.in_ch / self.geom.groups) * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_ch } else { 0 }
    }
}

/// A convolution whose weights live at fixed slots of a [`Params`] list.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    weight: usize,
    bias: Option<usize>,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        tape.conv(x, bound[self.weight], self.bias.map(|b| bound[b]), self.spec.geom)
    }
}

/// Ordered list of parameter tensors. Layers are registered once with
/// [`ParamsBuilder`]; order defines the checkpoint layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    tensors: Vec<Tensor<T>>,
}

pub struct ParamsBuilder<T> {
    rng: ChaCha8Rng,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamsBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamsBuilder { rng: ChaCha8Rng::seed_from_u64(seed), tensors: Vec::new() }
    }

    /// Registers a He-uniform initialised convolution (zero bias).
    pub fn conv(&mut self, spec: ConvSpec) -> Conv {
        self.conv_scaled(spec, 1.0)
    }

    /// Like [`conv`](Self::conv) with the init bound multiplied by `gain`.
    pub fn conv_scaled(&mut self, spec: ConvSpec, gain: f64) -> Conv {
        let shape = spec.weight_shape();
        let bound = gain * (6.0 / spec.fan_in() as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        self.tensors.push(Tensor::from_vec(&shape, data).expect("weight shape"));
        let weight = self.tensors.len() - 1;
        let bias = spec.bias.then(|| {
            self.tensors.push(Tensor::zeros(&[spec.out_ch]));
            self.tensors.len() - 1
        });
        Conv { spec, weight, bias }
    }

    pub fn finish(self) -> Params<T> {
        Params { tensors: self.tensors }
    }
}

impl<T: Scalar> Params<T> {
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Pushes every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Pushes every parameter as a frozen constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Parameter gradients in slot order; missing gradients become zeros.
    pub fn collect_grads(&self, grads: &mut Grads<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(bound)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.count(), flat.len())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        scalar::to_le_bytes(&self.flatten())
    }

    /// Overwrites all values from packed little-endian bytes; layout must match.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let flat = scalar::from_le_bytes::<T>(bytes)
            .ok_or_else(|| Error::Model(format!("weights length {} not a multiple of {}", bytes.len(), T::BYTES)))?;
        if flat.len() != self.count() {
            return Err(Error::Model(format!(
                "weights hold {} values, architecture needs {}",
                flat.len(),
                self.count()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("weights contain non-finite values".into()));
        }
        self.set_flat(&flat)
    }
}

/// Sums per-sample gradient lists in order (deterministic reduction).
pub fn sum_grads<T: Scalar>(mut parts: Vec<Vec<Tensor<T>>>) -> Option<Vec<Tensor<T>>> {
    let mut iter = parts.drain(..);
    let mut acc = iter.next()?;
    for part in iter {
        for (a, g) in acc.iter_mut().zip(&part) {
            a.add_assign(g);
        }
    }
    Some(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &Params<T>) -> Self {
        let zeros = || params.tensors.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let lr = T::of(self.cfg.lr);
        let eps = T::of(self.cfg.eps);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_reproducible() {
        let build = |seed| {
            let mut b = ParamsBuilder::<f64>::new(seed);
            b.conv(ConvSpec::new(3, 4, 3));
            b.conv(ConvSpec::new(4, 4, 3).depthwise().dilation(2));
            b.finish()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
        assert_eq!(build(1).count(), 3 * 4 * 9 + 4 + 4 * 9 + 4);
    }

    #[test]
    fn bytes_round_trip_and_reject_bad_lengths() {
        let mut b = ParamsBuilder::<f32>::new(1);
        b.conv(ConvSpec::new(2, 2, 1));
        let p = b.finish();
        let mut q = ParamsBuilder::<f32>::new(99);
        q.conv(ConvSpec::new(2, 2, 1));
        let mut q = q.finish();
        q.load_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
        assert!(q.load_bytes(&p.to_bytes()[1..]).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Params { tensors: vec![Tensor::from_vec(&[2], vec![3.0f64, -2.0]).unwrap()] };
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..300 {
            let g = p.tensors[0].map(|v| 2.0 * v);
            opt.step(&mut p, &[g]);
        }
        assert!(p.tensors[0].data().iter().all(|v| v.abs() < 1e-2));
    }
}
