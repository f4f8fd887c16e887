//! Elementwise arithmetic, activations, softmax and reductions.

use super::graph::{Op, Var};
use super::{outer_axis_inner, Graph, Real, Tensor};
use crate::error::{Error, Result};

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor { shape: va.shape.clone(), data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul { a, b }, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_with(a, b, |x, y| x / y);
        self.push("div", v, Op::Div { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let c = T::of(c);
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let c = T::of(c);
        let v = self.value(x).map(|e| e + c);
        self.push("add_scalar", v, Op::AddScalar { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        let slope = T::of(slope);
        let v = self.value(x).map(|e| if e > T::zero() { e } else { e * slope });
        self.push("leaky_relu", v, Op::LeakyRelu { x, slope }, &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push("silu", v, Op::Silu { x }, &[x])
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of rank {}", xv.rank())));
        }
        let v = softmax_values(xv, axis, false);
        self.push("softmax", v, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("log_softmax", format!("axis {axis} of rank {}", xv.rank())));
        }
        let v = softmax_values(xv, axis, true);
        self.push("log_softmax", v, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let m = v.sum() / T::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Sums out `axis`, dropping it (a rank-1 input reduces to `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of rank {}", xv.rank())));
        }
        let (outer, len, inner) = outer_axis_inner(&xv.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xv.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("sum_axis", Tensor { shape, data: out }, Op::SumAxis { x, axis }, &[x])
    }

    /// Mean of the `k` largest elements of `x` (ties broken by position).
    pub fn top_k_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if k == 0 || k > xv.numel() {
            return Err(Error::config(format!("top-k with k={k} over {} values", xv.numel())));
        }
        let mut order: Vec<usize> = (0..xv.numel()).collect();
        order.sort_by(|&i, &j| xv.data[j].partial_cmp(&xv.data[i]).unwrap_or(std::cmp::Ordering::Equal));
        order.truncate(k);
        // Summing in index order makes k == n agree bitwise with `mean`.
        order.sort_unstable();
        let m = order.iter().map(|&i| xv.data[i]).sum::<T>() / T::of(k as f64);
        self.push("top_k_mean", Tensor::scalar(m), Op::TopKMean { x, picked: order }, &[x])
    }
}

pub(crate) fn softmax_values<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = outer_axis_inner(&x.shape, axis);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut m = T::neg_infinity();
            for a in 0..len {
                m = m.max(x.data[at(a)]);
            }
            let mut z = T::zero();
            for a in 0..len {
                let e = (x.data[at(a)] - m).exp();
                out[at(a)] = e;
                z += e;
            }
            if log {
                let lz = z.ln();
                for a in 0..len {
                    out[at(a)] = x.data[at(a)] - m - lz;
                }
            } else {
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

pub(crate) fn mul_backward<T: Real>(g: &Graph<T>, a: Var, b: Var, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    let mut r = Vec::new();
    if g.requires_grad(a) {
        r.push((a, gout.iter().zip(vb).map(|(&d, &y)| d * y).collect()));
    }
    if g.requires_grad(b) {
        r.push((b, gout.iter().zip(va).map(|(&d, &x)| d * x).collect()));
    }
    r
}

pub(crate) fn div_backward<T: Real>(g: &Graph<T>, a: Var, b: Var, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    let mut r = Vec::new();
    if g.requires_grad(a) {
        r.push((a, gout.iter().zip(vb).map(|(&d, &y)| d / y).collect()));
    }
    if g.requires_grad(b) {
        r.push((b, gout.iter().zip(va).zip(vb).map(|((&d, &x), &y)| -d * x / (y * y)).collect()));
    }
    r
}

pub(crate) fn leaky_relu_backward<T: Real>(g: &Graph<T>, x: Var, slope: T, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let xv = g.value(x).data();
    vec![(x, gout.iter().zip(xv).map(|(&d, &e)| if e > T::zero() { d } else { d * slope }).collect())]
}

pub(crate) fn silu_backward<T: Real>(g: &Graph<T>, x: Var, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let xv = g.value(x).data();
    vec![(
        x,
        gout.iter()
            .zip(xv)
            .map(|(&d, &e)| {
                let s = sigmoid(e);
                d * (s + e * s * (T::one() - s))
            })
            .collect(),
    )]
}

pub(crate) fn softmax_backward<T: Real>(x: Var, axis: usize, out: &Tensor<T>, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let (outer, len, inner) = outer_axis_inner(&out.shape, axis);
    let y = &out.data;
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let dot: T = (0..len).map(|a| gout[at(a)] * y[at(a)]).sum();
            for a in 0..len {
                gx[at(a)] = y[at(a)] * (gout[at(a)] - dot);
            }
        }
    }
    vec![(x, gx)]
}

pub(crate) fn log_softmax_backward<T: Real>(x: Var, axis: usize, out: &Tensor<T>, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let (outer, len, inner) = outer_axis_inner(&out.shape, axis);
    let y = &out.data;
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let total: T = (0..len).map(|a| gout[at(a)]).sum();
            for a in 0..len {
                gx[at(a)] = gout[at(a)] - y[at(a)].exp() * total;
            }
        }
    }
    vec![(x, gx)]
}

pub(crate) fn sum_axis_backward<T: Real>(g: &Graph<T>, x: Var, axis: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
    let shape = g.shape(x);
    let (outer, len, inner) = outer_axis_inner(shape, axis);
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            gx[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(&gout[o * inner..(o + 1) * inner]);
        }
    }
    vec![(x, gx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, input: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let y = f(&mut g, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn activation_definitions() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let lr = eval(|g, x| g.leaky_relu(x, 0.01), t.clone());
        assert_eq!(lr.data(), &[-0.01, 0.0, 2.0]);
        let si = eval(|g, x| g.silu(x), t.clone());
        assert_eq!(si.data()[1], 0.0);
        assert_eq!(si.shape(), t.shape());
    }

    #[test]
    fn softmax_closed_forms() {
        let u = eval(|g, x| g.softmax(x, 0), Tensor::full(&[5], 0.3));
        for &v in u.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let r = eval(|g, x| g.softmax(x, 0), Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
        assert!((r.data()[0] - 0.25).abs() < 1e-15);
        assert!((r.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let r = eval(|g, x| g.softmax(x, 1), Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap());
        assert_eq!(r.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 3.0);
        let r = eval(|g, x| g.softmax(x, 1), t);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|a| r.get(&[o, a, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_selects_largest() {
        let t = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        let m = eval(|g, x| g.top_k_mean(x, 1), t.clone());
        assert_eq!(m.data(), &[2.0]);
        let all = eval(|g, x| g.top_k_mean(x, 2), t);
        assert_eq!(all.data(), &[1.0]);
    }

    #[test]
    fn sum_axis_drops_axis() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let s = eval(|g, x| g.sum_axis(x, 1), t);
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 12.0]);
    }
}
