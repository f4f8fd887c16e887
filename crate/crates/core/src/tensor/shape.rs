//! Shape manipulation: concat/split, reshape, permute.

use super::graph::{Op, Var};
use super::{outer_axis_inner, strides_of, Graph, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        for &v in xs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_axis_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data[o * len..(o + 1) * len]);
            }
        }
        self.push("concat", Tensor { shape, data }, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) of axis {axis} in {s:?}", start + len)));
        }
        let (outer, ext, inner) = outer_axis_inner(&s, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * ext + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", Tensor { shape, data }, Op::Slice { x, axis, start }, &[x])
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        self.check(x)?;
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(Error::shape("split", format!("sizes {sizes:?} on axis {axis} of {s:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.slice(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape { x }, &[x])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for rank {}", s.len())));
        }
        let v = permute_values(self.value(x), perm);
        self.push("permute", v, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }
}

pub(crate) fn permute_values<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides_of(&x.shape);
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let r = shape.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(x.data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor { shape, data }
}

pub(crate) fn concat_backward<T: Real>(
    g: &Graph<T>,
    xs: &[Var],
    axis: usize,
    out: &Tensor<T>,
    gout: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (outer, _, inner) = outer_axis_inner(&out.shape, axis);
    let mut grads: Vec<Vec<T>> = xs.iter().map(|&v| Vec::with_capacity(g.value(v).numel())).collect();
    let mut off = 0;
    for _ in 0..outer {
        for (k, &v) in xs.iter().enumerate() {
            let len = g.shape(v)[axis] * inner;
            grads[k].extend_from_slice(&gout[off..off + len]);
            off += len;
        }
    }
    xs.iter().copied().zip(grads).filter(|(v, _)| g.requires_grad(*v)).collect()
}

pub(crate) fn slice_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    axis: usize,
    start: usize,
    out: &Tensor<T>,
    gout: &[T],
) -> Vec<(Var, Vec<T>)> {
    let s = g.shape(x);
    let (outer, ext, inner) = outer_axis_inner(s, axis);
    let len = out.shape[axis];
    let mut gx = vec![T::zero(); outer * ext * inner];
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        gx[dst..dst + len * inner].copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
    }
    vec![(x, gx)]
}

pub(crate) fn permute_backward<T: Real>(g: &Graph<T>, x: Var, perm: &[usize], gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| g.shape(x)[p]).collect();
    let gt = Tensor { shape: out_shape, data: gout.to_vec() };
    vec![(x, permute_values(&gt, &inv).data)]
}
