//! Dense row-major tensors and the raw kernels (convolution, resampling)
//! used by the autograd tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3, "expected CHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Stride, padding, dilation and grouping of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn same(kernel: usize) -> Self {
        ConvGeom { stride: 1, pad: kernel / 2, dilation: 1, groups: 1 }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Output positions `o` whose input tap `o * stride + offset` lands in `0..len`.
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_excl = {
        let last = len as isize - 1 - offset;
        if last < 0 {
            0
        } else {
            last / s + 1
        }
    };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

/// 2-D convolution of a CHW input with an `[out, in/groups, k, k]` kernel.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let (c_in, h, wd) = x.chw();
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Shape(format!("kernel must be [out, in, k, k], got {ws:?}")));
    }
    let (c_out, cpg_in, k) = (ws[0], ws[1], ws[2]);
    if c_in % g.groups != 0 || c_out % g.groups != 0 || cpg_in * g.groups != c_in {
        return Err(Error::Shape(format!(
            "conv channels: input {c_in}, kernel {ws:?}, groups {}",
            g.groups
        )));
    }
    let oh = g.output_size(h, k).ok_or_else(|| Error::Shape(format!("input {h}x{wd} too small")))?;
    let ow = g.output_size(wd, k).ok_or_else(|| Error::Shape(format!("input {h}x{wd} too small")))?;
    let cpg_out = c_out / g.groups;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for oc in 0..c_out {
        let grp = oc / cpg_out;
        let plane = &mut od[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = b {
            let bv = b.data()[oc];
            plane.iter_mut().for_each(|v| *v = bv);
        }
        for icg in 0..cpg_in {
            let ic = grp * cpg_in + icg;
            let xin = &xd[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let offy = (ky * g.dilation) as isize - g.pad as isize;
                let (oy0, oy1) = valid_range(offy, g.stride, h, oh);
                for kx in 0..k {
                    let wv = wdat[((oc * cpg_in + icg) * k + ky) * k + kx];
                    let offx = (kx * g.dilation) as isize - g.pad as isize;
                    let (ox0, ox1) = valid_range(offx, g.stride, wd, ow);
                    for oy in oy0..oy1 {
                        let iy = (oy * g.stride) as isize + offy;
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = (ox0 as isize + offx) as usize;
                            for (o, &xv) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                orow[ox] = orow[ox] + wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
    want_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (_, h, wd) = x.chw();
    let ws = w.shape();
    let (c_out, cpg_in, k) = (ws[0], ws[1], ws[2]);
    let (_, oh, ow) = gout.chw();
    let cpg_out = c_out / g.groups;
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(&[c_out]);
    let xd = x.data();
    let wdat = w.data();
    let gd = gout.data();
    for oc in 0..c_out {
        let grp = oc / cpg_out;
        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
        gb.data_mut()[oc] = gplane.iter().copied().sum();
        for icg in 0..cpg_in {
            let ic = grp * cpg_in + icg;
            let xin = &xd[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let offy = (ky * g.dilation) as isize - g.pad as isize;
                let (oy0, oy1) = valid_range(offy, g.stride, h, oh);
                for kx in 0..k {
                    let widx = ((oc * cpg_in + icg) * k + ky) * k + kx;
                    let wv = wdat[widx];
                    let offx = (kx * g.dilation) as isize - g.pad as isize;
                    let (ox0, ox1) = valid_range(offx, g.stride, wd, ow);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = ((oy * g.stride) as isize + offy) as usize;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        if g.stride == 1 {
                            let ix0 = (ox0 as isize + offx) as usize;
                            for (&gv, &xv) in grow[ox0..ox1].iter().zip(&row[ix0..]) {
                                acc = acc + gv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                acc = acc + grow[ox] * row[ix];
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxrow = &mut gx.data_mut()[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                            if g.stride == 1 {
                                let ix0 = (ox0 as isize + offx) as usize;
                                for (o, &gv) in gxrow[ix0..].iter_mut().zip(&grow[ox0..ox1]) {
                                    *o = *o + wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * g.stride) as isize + offx) as usize;
                                    gxrow[ix] = gxrow[ix] + wv * grow[ox];
                                }
                            }
                        }
                    }
                    gw.data_mut()[widx] = gw.data()[widx] + acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    ((dst * in_len) / out_len).min(in_len - 1)
}

/// Nearest-neighbour resampling of a CHW tensor to `oh × ow`.
pub fn resize_nearest<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            let iy = nearest_index(oy, h, oh);
            for ox in 0..ow {
                let ix = nearest_index(ox, w, ow);
                od[(ch * oh + oy) * ow + ox] = xd[(ch * h + iy) * w + ix];
            }
        }
    }
    out
}

pub fn resize_nearest_backward<T: Scalar>(gout: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, oh, ow) = gout.chw();
    let mut gx = Tensor::zeros(&[c, h, w]);
    let gd = gout.data();
    let gxd = gx.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            let iy = nearest_index(oy, h, oh);
            for ox in 0..ow {
                let ix = nearest_index(ox, w, ow);
                let i = (ch * h + iy) * w + ix;
                gxd[i] = gxd[i] + gd[(ch * oh + oy) * ow + ox];
            }
        }
    }
    gx
}

/// Source taps and weights for half-pixel-centred bilinear resampling.
fn bilinear_taps<T: Scalar>(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, T) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, T::of(src - i0 as f64))
}

/// Bilinear resampling of a CHW tensor to `oh × ow` (half-pixel centres).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps::<T>(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps::<T>(x, w, ow)).collect();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    let one = T::one();
    for ch in 0..c {
        let p = &xd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = p[y0 * w + x0] * (one - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (one - lx) + p[y1 * w + x1] * lx;
                od[(ch * oh + oy) * ow + ox] = top * (one - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(gout: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, oh, ow) = gout.chw();
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps::<T>(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps::<T>(x, w, ow)).collect();
    let mut gx = Tensor::zeros(&[c, h, w]);
    let gd = gout.data();
    let gxd = gx.data_mut();
    let one = T::one();
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let gv = gd[(ch * oh + oy) * ow + ox];
                let top = gv * (one - ly);
                let bot = gv * ly;
                for (idx, wgt) in [
                    (y0 * w + x0, top * (one - lx)),
                    (y0 * w + x1, top * lx),
                    (y1 * w + x0, bot * (one - lx)),
                    (y1 * w + x1, bot * lx),
                ] {
                    gxd[base + idx] = gxd[base + idx] + wgt;
                }
            }
        }
    }
    gx
}
