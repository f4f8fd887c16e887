//! Trilinear resizing (align-corners off) and integer-factor average pooling
//! on `[N, C, H, W, D]` tensors.

use super::graph::{Op, Var};
use super::{outer_axis_inner, Graph, Real, Tensor};
use crate::error::{Error, Result};

/// Linear interpolation taps `(i0, i1, w1)` for resizing `src` samples to
/// `dst` samples: output `o` is `(1 - w1) * x[i0] + w1 * x[i1]`.
pub fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// Trilinear resize of the three trailing axes to `target`.
    pub fn resize_trilinear(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        self.check(x)?;
        if target.contains(&0) {
            return Err(Error::shape("resize_trilinear", format!("target {target:?}")));
        }
        if self.shape(x).len() != 5 {
            return Err(Error::shape("resize_trilinear", format!("expected 5D input, got {:?}", self.shape(x))));
        }
        let mut v = x;
        for (i, &t) in target.iter().enumerate() {
            if self.shape(v)[2 + i] != t {
                v = self.interp1d(v, 2 + i, t)?;
            }
        }
        Ok(v)
    }

    fn interp1d(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, src, inner) = outer_axis_inner(xv.shape(), axis);
        let table = interp_table(src, len);
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            for (a, &(i0, i1, w1)) in table.iter().enumerate() {
                let (w0, w1) = (T::of(1.0 - w1), T::of(w1));
                let s0 = &xv.data()[(o * src + i0) * inner..][..inner];
                let s1 = &xv.data()[(o * src + i1) * inner..][..inner];
                let d = &mut out[(o * len + a) * inner..][..inner];
                for ((d, &p), &q) in d.iter_mut().zip(s0).zip(s1) {
                    *d = w0 * p + w1 * q;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.push("resize_trilinear", Tensor { shape, data: out }, Op::Interp1d { x, axis }, &[x])
    }

    /// Non-overlapping average pooling by integer `factor` per spatial axis.
    pub fn downsample_avg(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 5 || factor.contains(&0) || (0..3).any(|a| !s[2 + a].is_multiple_of(factor[a])) {
            return Err(Error::shape("downsample_avg", format!("factor {factor:?} on {s:?}")));
        }
        let [h, w, d] = [s[2], s[3], s[4]];
        let [fh, fw, fd] = factor;
        let (oh, ow, od) = (h / fh, w / fw, d / fd);
        let scale = T::of(1.0 / (fh * fw * fd) as f64);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * oh * ow * od];
        for p in 0..planes {
            let src = &xv[p * h * w * d..][..h * w * d];
            let dst = &mut out[p * oh * ow * od..][..oh * ow * od];
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        dst[((i / fh) * ow + j / fw) * od + k / fd] += src[(i * w + j) * d + k];
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= scale);
        }
        let shape = vec![s[0], s[1], oh, ow, od];
        self.push("downsample_avg", Tensor { shape, data: out }, Op::AvgPool { x, factor }, &[x])
    }
}

pub(crate) fn interp_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    axis: usize,
    out: &Tensor<T>,
    gout: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (outer, src, inner) = outer_axis_inner(g.shape(x), axis);
    let len = out.shape()[axis];
    let table = interp_table(src, len);
    let mut gx = vec![T::zero(); outer * src * inner];
    for o in 0..outer {
        for (a, &(i0, i1, w1)) in table.iter().enumerate() {
            let (w0, w1) = (T::of(1.0 - w1), T::of(w1));
            let gd = &gout[(o * len + a) * inner..][..inner];
            for (k, &v) in gd.iter().enumerate() {
                gx[(o * src + i0) * inner + k] += w0 * v;
                gx[(o * src + i1) * inner + k] += w1 * v;
            }
        }
    }
    vec![(x, gx)]
}

pub(crate) fn avg_pool_backward<T: Real>(g: &Graph<T>, x: Var, factor: [usize; 3], gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = g.shape(x);
    let [h, w, d] = [s[2], s[3], s[4]];
    let [fh, fw, fd] = factor;
    let (ow, od) = (w / fw, d / fd);
    let opl = (h / fh) * ow * od;
    let scale = T::of(1.0 / (fh * fw * fd) as f64);
    let planes = s[0] * s[1];
    let mut gx = vec![T::zero(); planes * h * w * d];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    gx[p * h * w * d + (i * w + j) * d + k] =
                        gout[p * opl + ((i / fh) * ow + j / fw) * od + k / fd] * scale;
                }
            }
        }
    }
    vec![(x, gx)]
}
