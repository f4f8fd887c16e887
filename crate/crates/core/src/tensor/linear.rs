//! Per-voxel linear maps and batched matrix products.

use rayon::prelude::*;

use super::graph::{Op, Var};
use super::{gemm, Graph, MatRef, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Per-voxel linear map: `x[N, C, ...]`, `w[C', C]`, `b[C']` -> `[N, C', ...]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("pointwise", format!("x {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("pointwise", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let (n, c, co) = (xs[0], xs[1], ws[0]);
        let p: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * co * p];
        out.par_chunks_mut(co * p).enumerate().for_each(|(i, o)| {
            if let Some(bv) = bv {
                for (r, &bias) in bv.iter().enumerate() {
                    o[r * p..(r + 1) * p].fill(bias);
                }
            }
            let beta = if bv.is_some() { T::one() } else { T::zero() };
            gemm(T::one(), MatRef::rm(wv, co, c), MatRef::rm(&xv[i * c * p..(i + 1) * c * p], c, p), beta, o, p);
        });
        let mut shape = xs;
        shape[1] = co;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("pointwise", Tensor { shape, data: out }, Op::Pointwise { x, w, b }, &inputs)
    }

    /// `a[.., m, k] x b[.., k, n]` with equal leading extents (rank 2 or 3).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = batch_dims(&sa, &sb)?;
        let (batch, m, k, n) = dims;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
            gemm(
                T::one(),
                MatRef::rm(&av[i * m * k..(i + 1) * m * k], m, k),
                MatRef::rm(&bv[i * k * n..(i + 1) * k * n], k, n),
                T::zero(),
                o,
                n,
            );
        });
        let mut shape = sa;
        let r = shape.len();
        shape[r - 1] = n;
        self.push("matmul", Tensor { shape, data: out }, Op::Matmul { a, b }, &[a, b])
    }
}

fn batch_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
    if sa.len() != sb.len() || !(2..=3).contains(&sa.len()) {
        return Err(bad());
    }
    let r = sa.len();
    if sa[r - 1] != sb[r - 2] || sa[..r - 2] != sb[..r - 2] {
        return Err(bad());
    }
    let batch = sa[..r - 2].iter().product();
    Ok((batch, sa[r - 2], sa[r - 1], sb[r - 1]))
}

pub(crate) fn pointwise_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    gout: &[T],
) -> Vec<(Var, Vec<T>)> {
    let xs = g.shape(x);
    let (n, c) = (xs[0], xs[1]);
    let co = g.shape(w)[0];
    let p: usize = xs[2..].iter().product();
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let mut r = Vec::new();
    if g.requires_grad(x) {
        let mut gx = vec![T::zero(); n * c * p];
        gx.par_chunks_mut(c * p).enumerate().for_each(|(i, gxi)| {
            gemm(
                T::one(),
                MatRef::rm(wv, co, c).t(),
                MatRef::rm(&gout[i * co * p..(i + 1) * co * p], co, p),
                T::zero(),
                gxi,
                p,
            );
        });
        r.push((x, gx));
    }
    if g.requires_grad(w) {
        let mut gw = vec![T::zero(); co * c];
        for i in 0..n {
            gemm(
                T::one(),
                MatRef::rm(&gout[i * co * p..(i + 1) * co * p], co, p),
                MatRef::rm(&xv[i * c * p..(i + 1) * c * p], c, p).t(),
                T::one(),
                &mut gw,
                c,
            );
        }
        r.push((w, gw));
    }
    if let Some(b) = b.filter(|b| g.requires_grad(*b)) {
        let mut gb = vec![T::zero(); co];
        for i in 0..n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let off = (i * co + o) * p;
                *acc += gout[off..off + p].iter().copied().sum::<T>();
            }
        }
        r.push((b, gb));
    }
    r
}

pub(crate) fn matmul_backward<T: Real>(g: &Graph<T>, a: Var, b: Var, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let (batch, m, k, n) = batch_dims(g.shape(a), g.shape(b)).expect("validated in forward");
    let av = g.value(a).data();
    let bv = g.value(b).data();
    let mut r = Vec::new();
    if g.requires_grad(a) {
        let mut ga = vec![T::zero(); batch * m * k];
        ga.par_chunks_mut(m * k).enumerate().for_each(|(i, o)| {
            gemm(
                T::one(),
                MatRef::rm(&gout[i * m * n..(i + 1) * m * n], m, n),
                MatRef::rm(&bv[i * k * n..(i + 1) * k * n], k, n).t(),
                T::zero(),
                o,
                k,
            );
        });
        r.push((a, ga));
    }
    if g.requires_grad(b) {
        let mut gb = vec![T::zero(); batch * k * n];
        gb.par_chunks_mut(k * n).enumerate().for_each(|(i, o)| {
            gemm(
                T::one(),
                MatRef::rm(&av[i * m * k..(i + 1) * m * k], m, k).t(),
                MatRef::rm(&gout[i * m * n..(i + 1) * m * n], m, n),
                T::zero(),
                o,
                n,
            );
        });
        r.push((b, gb));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn identity_times_b() {
        let mut g = Graph::<f64>::new();
        let id = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 * 1.5 - 2.0));
        let c = g.matmul(id, b).unwrap();
        assert_eq!(g.value(c), g.value(b));
    }

    #[test]
    fn transpose_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        let b = g.constant(Tensor::from_fn(&[2, 4, 5], |i| (i as f64).cos()));
        let ab = g.matmul(a, b).unwrap();
        let abt = g.transpose(ab).unwrap();
        let bt = g.transpose(b).unwrap();
        let at = g.transpose(a).unwrap();
        let btat = g.matmul(bt, at).unwrap();
        assert!(g.value(abt).max_abs_diff(g.value(btat)).unwrap() < 1e-12);
    }

    #[test]
    fn pointwise_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2, 1, 1, 1], vec![3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = g.pointwise(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);

        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2, 2], |i| i as f64 - 7.0));
        let id = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zb = g.constant(Tensor::zeros(&[3]));
        let y = g.pointwise(x, id, Some(zb)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
