//! A small reverse-mode tape over CHW tensors.
//!
//! Every network forward pass in the crate is recorded here, so the same
//! code path serves inference (values only) and training (values + grads).

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Clamp01(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Nearest(Var),
    Bilinear(Var),
    Gram(Var),
    SqDist { a: Var, b: Var, scale: T },
    SoftmaxXent { logits: Var, labels: Vec<u8> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    constants: HashSet<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Probability floor inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), constants: HashSet::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never needs an input gradient (images, frozen targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.constants.insert(v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = tensor::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    /// Clamp to `[0, 1]`; the gradient passes through only strictly inside.
    /// NaN is propagated so divergence stays visible downstream.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v.is_nan() { v } else { v.max(T::zero()).min(T::one()) });
        self.push(out, Op::Clamp01(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Channel-wise concatenation of two CHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape(format!("concat: {ha}x{wa} vs {hb}x{wb}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(&[ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = tensor::resize_nearest(self.value(x), h, w);
        self.push(out, Op::Nearest(x))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = tensor::resize_bilinear(self.value(x), h, w);
        self.push(out, Op::Bilinear(x))
    }

    /// Gram matrix `F Fᵀ / (H W)` of a CHW feature map, stored as `[C, C]`.
    pub fn gram(&mut self, x: Var) -> Var {
        let out = gram_matrix(self.value(x));
        self.push(out, Op::Gram(x))
    }

    /// `scale · ‖a − b‖²` as a scalar node.
    pub fn sq_dist(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("sq_dist: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let s: T = va.data().iter().zip(vb.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        Ok(self.push(Tensor::scalar(s * scale), Op::SqDist { a, b, scale }))
    }

    /// Summed per-pixel cross-entropy of softmax(logits) against class labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (k, h, w) = self.value(logits).chw();
        if labels.len() != h * w {
            return Err(Error::Shape(format!("labels: {} for {h}x{w}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let cap = T::of(-LOG_EPS.ln());
        let mut total = T::zero();
        for (p, &lab) in labels.iter().enumerate() {
            let lse = log_sum_exp(z, k, h * w, p);
            let nll = lse - z[lab as usize * h * w + p];
            total = total + nll.min(cap);
        }
        Ok(self.push(Tensor::scalar(total), Op::SoftmaxXent { logits, labels: labels.to_vec() }))
    }

    /// Reverse pass from scalar node `root`; returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let want_x = !self.is_constant_leaf(*x);
                    let (gx, gw, gb) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), &g, *geom, want_x);
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp01(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() || v >= T::one() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    let data = g.into_data();
                    let ga = Tensor::from_vec(self.value(*a).shape(), data[..na].to_vec()).expect("shape");
                    let gb = Tensor::from_vec(self.value(*b).shape(), data[na..].to_vec()).expect("shape");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Nearest(x) => {
                    let (_, h, w) = self.value(*x).chw();
                    accumulate(&mut grads, *x, tensor::resize_nearest_backward(&g, h, w));
                }
                Op::Bilinear(x) => {
                    let (_, h, w) = self.value(*x).chw();
                    accumulate(&mut grads, *x, tensor::resize_bilinear_backward(&g, h, w));
                }
                Op::Gram(x) => {
                    let gx = gram_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SqDist { a, b, scale } => {
                    let k = g.item() * *scale * T::of(2.0);
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let diff: Vec<T> = va.data().iter().zip(vb.data()).map(|(&p, &q)| (p - q) * k).collect();
                    let ga = Tensor::from_vec(va.shape(), diff).expect("shape");
                    if !self.is_constant_leaf(*b) {
                        accumulate(&mut grads, *b, ga.map(|v| -v));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxXent { logits, labels } => {
                    let zv = self.value(*logits);
                    let (k, h, w) = zv.chw();
                    let z = zv.data();
                    let n = h * w;
                    let cap = T::of(-LOG_EPS.ln());
                    let up = g.item();
                    let mut gz = Tensor::zeros(zv.shape());
                    let gd = gz.data_mut();
                    for (p, &lab) in labels.iter().enumerate() {
                        let lse = log_sum_exp(z, k, n, p);
                        if lse - z[lab as usize * n + p] >= cap {
                            continue;
                        }
                        for c in 0..k {
                            let prob = (z[c * n + p] - lse).exp();
                            let onehot = if c == lab as usize { T::one() } else { T::zero() };
                            gd[c * n + p] = (prob - onehot) * up;
                        }
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
        }
        Grads { grads }
    }

    /// Leaves flagged as constants skip input-gradient work in convolutions.
    fn is_constant_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.constants.contains(&v.0)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp<T: Scalar>(z: &[T], k: usize, n: usize, p: usize) -> T {
    let m = (0..k).map(|c| z[c * n + p]).fold(T::neg_infinity(), T::max);
    let s: T = (0..k).map(|c| (z[c * n + p] - m).exp()).sum();
    m + s.ln()
}

/// `G[i][j] = Σ_{h,w} F[i,h,w]·F[j,h,w] / (H·W)` for a CHW tensor.
pub fn gram_matrix<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let n = h * w;
    let norm = T::of((n) as f64);
    let d = x.data();
    let mut g = Tensor::zeros(&[c, c]);
    let gd = g.data_mut();
    for i in 0..c {
        let fi = &d[i * n..(i + 1) * n];
        for j in i..c {
            let fj = &d[j * n..(j + 1) * n];
            let dot: T = fi.iter().zip(fj).map(|(&a, &b)| a * b).sum();
            let v = dot / norm;
            gd[i * c + j] = v;
            gd[j * c + i] = v;
        }
    }
    g
}

fn gram_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let n = h * w;
    let norm = T::of(n as f64);
    let d = x.data();
    let gd = g.data();
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for i in 0..c {
        for j in 0..c {
            let coef = (gd[i * c + j] + gd[j * c + i]) / norm;
            if coef == T::zero() {
                continue;
            }
            let fj = &d[j * n..(j + 1) * n];
            for (o, &v) in gxd[i * n..(i + 1) * n].iter_mut().zip(fj) {
                *o = *o + coef * v;
            }
        }
    }
    gx
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}
