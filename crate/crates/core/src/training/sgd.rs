use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::NetworkParams;
use crate::tensor::{Real, Tensor};

/// Momentum buffers, created lazily at zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

/// Nesterov SGD: `v = mu v + g`, `p -= lr (g + mu v)`.
pub fn sgd_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.weights.len() || grads.keys().any(|k| !params.weights.contains_key(k)) {
        let missing: Vec<&String> = params.weights.keys().filter(|k| !grads.contains_key(*k)).collect();
        return Err(Error::config(format!("gradient keys do not match parameters (missing {missing:?})")));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (key, p) in params.weights.iter_mut() {
        let g = &grads[key];
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step", format!("{key}: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
        let v = state.velocity.entry(key.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * (gv + mu * *vv);
        }
    }
    Ok(())
}

/// `lr0 (1 - epoch / epochs)^exponent`.
pub fn poly_lr(lr0: f64, epoch: usize, epochs: usize, exponent: f64) -> f64 {
    lr0 * (1.0 - epoch as f64 / epochs as f64).max(0.0).powf(exponent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> NetworkParams<f64> {
        let mut p = NetworkParams::new();
        p.weights.insert("x".into(), Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("x".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn vanilla_step() {
        let mut p = scalar(0.0);
        sgd_step(&mut p, &grad(1.0), &mut SgdState::default(), 0.1, 0.0).unwrap();
        assert!((p.weights["x"].data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient() {
        let mut p = scalar(0.5);
        let mut s = SgdState::default();
        sgd_step(&mut p, &grad(0.0), &mut s, 0.1, 0.9).unwrap();
        assert_eq!(p.weights["x"].data()[0], 0.5);
        assert_eq!(s.velocity["x"].data()[0], 0.0);
        s.velocity.insert("x".into(), Tensor::scalar(2.0));
        sgd_step(&mut p, &grad(0.0), &mut s, 0.1, 0.9).unwrap();
        assert!((s.velocity["x"].data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0);
        let mut s = SgdState::default();
        for _ in 0..200 {
            let x = p.weights["x"].data()[0];
            sgd_step(&mut p, &grad(2.0 * x), &mut s, 0.1, 0.9).unwrap();
        }
        assert!(p.weights["x"].data()[0].abs() < 1e-6);
    }

    #[test]
    fn key_mismatch() {
        let mut p = scalar(0.0);
        let g = BTreeMap::from([("y".to_string(), Tensor::scalar(1.0))]);
        assert!(sgd_step(&mut p, &g, &mut SgdState::default(), 0.1, 0.0).is_err());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.01, 0, 10, 0.9), 0.01);
        assert!((poly_lr(0.01, 5, 10, 0.9) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(0.01, 9, 10, 0.9) > 0.0);
    }
}
