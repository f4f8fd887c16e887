//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever evaluates forward passes, so it is
//! independent of every backward rule it checks.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::nn::{NetworkParams, Session};
use crate::tensor::{Graph, NormMode, Tensor, Var};

/// Default step for central differences in 64-bit.
pub const FD_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// `max |analytic - fd| / max(1, |fd|)` over all checked elements.
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Indices to probe: all of them, or an evenly strided subset of `cap`.
fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks `d f / d inputs` where `f` builds a scalar from the input leaves.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], f: F, cap: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    g.backward(y)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in probe_indices(inputs[k].numel(), cap) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
            checked += 1;
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, checked })
}

/// Checks gradients of a scalar built from network parameters (and,
/// optionally, constant inputs captured by `f`). Batch norm runs in train
/// mode; running statistics are restored before every evaluation.
pub fn check_params<F>(name: &str, params: &NetworkParams<f64>, f: F, cap: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let eval = |p: &NetworkParams<f64>| -> Result<f64> {
        let mut p = p.clone();
        let mut s = Session::new(&mut p, NormMode::Train, false);
        let y = f(&mut s)?;
        Ok(s.graph.value(y).data()[0])
    };
    let mut work = params.clone();
    let grads: BTreeMap<String, Tensor<f64>> = {
        let mut p = params.clone();
        let mut s = Session::new(&mut p, NormMode::Train, true);
        let y = f(&mut s)?;
        s.graph.backward(y)?;
        s.grads()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let keys: Vec<String> = params.weights.keys().cloned().collect();
    for key in keys {
        let n = params.weights[&key].numel();
        let analytic = grads.get(&key).cloned().unwrap_or_else(|| Tensor::zeros(params.weights[&key].shape()));
        for i in probe_indices(n, cap) {
            let orig = work.weights[&key].data()[i];
            work.weights.get_mut(&key).expect("key").data_mut()[i] = orig + FD_STEP;
            let fp = eval(&work)?;
            work.weights.get_mut(&key).expect("key").data_mut()[i] = orig - FD_STEP;
            let fm = eval(&work)?;
            work.weights.get_mut(&key).expect("key").data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
            checked += 1;
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, checked })
}

/// `sum(y * r)` for a fixed pseudo-random `r`, turning any tensor output
/// into a scalar with a non-degenerate gradient.
pub fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let r = Tensor::from_fn(&shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    });
    let rv = g.constant(r);
    let prod = g.mul(y, rv)?;
    g.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check_inputs(
            "square",
            &[x],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            None,
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
        assert!((rel_err(1.0, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn probe_indices_cap() {
        assert_eq!(probe_indices(5, None).len(), 5);
        assert_eq!(probe_indices(10, Some(4)), vec![0, 2, 5, 7]);
    }
}
