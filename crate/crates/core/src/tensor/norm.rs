//! Batch normalization over all non-channel axes of `[N, C, ...]`.

use super::graph::{Op, Var};
use super::{Graph, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

impl<T: Real> Graph<T> {
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{c} channels vs gamma {:?}, beta {:?}, stats {}",
                    self.shape(gamma),
                    self.shape(beta),
                    stats.mean.len()
                ),
            ));
        }
        let n = s[0];
        let p: usize = s[2..].iter().product();
        let m = n * p;
        let xv = self.value(x).data();
        let eps = BN_EPS;
        let mut mean = vec![0f64; c];
        let mut invstd = vec![T::zero(); c];
        match mode {
            NormMode::Train => {
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let chunks = (0..n).map(|i| &xv[(i * c + ch) * p..][..p]);
                    let mu = chunks.clone().flatten().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                    let sq = chunks.flatten().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                    invstd[ch] = T::of(1.0 / (var[ch] + eps).sqrt());
                }
                let mom = BN_MOMENTUM;
                for ch in 0..c {
                    let unbiased = if m > 1 { var[ch] * m as f64 / (m - 1) as f64 } else { var[ch] };
                    stats.mean[ch] = T::of((1.0 - mom) * stats.mean[ch].as_f64() + mom * mean[ch]);
                    stats.var[ch] = T::of((1.0 - mom) * stats.var[ch].as_f64() + mom * unbiased);
                }
            }
            NormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch].as_f64();
                    invstd[ch] = T::of(1.0 / (stats.var[ch].as_f64() + eps).sqrt());
                }
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let mu = T::of(mean[ch]);
                for k in off..off + p {
                    let h = (xv[k] - mu) * invstd[ch];
                    xhat[k] = h;
                    out[k] = gv[ch] * h + bv[ch];
                }
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats: mode == NormMode::Train };
        self.push("batch_norm", Tensor { shape: s, data: out }, op, &[x, gamma, beta])
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    invstd: &[T],
    batch_stats: bool,
    gout: &[T],
) -> Vec<(Var, Vec<T>)> {
    let s = g.shape(x);
    let (n, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    let m = T::of((n * p) as f64);
    let gv = g.value(gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * p;
            for k in off..off + p {
                dgamma[ch] += gout[k] * xhat[k];
                dbeta[ch] += gout[k];
            }
        }
    }
    let mut r = Vec::new();
    if g.requires_grad(x) {
        let mut gx = vec![T::zero(); xhat.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let k0 = gv[ch] * invstd[ch];
                for k in off..off + p {
                    gx[k] = if batch_stats {
                        k0 / m * (m * gout[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                    } else {
                        k0 * gout[k]
                    };
                }
            }
        }
        r.push((x, gx));
    }
    if g.requires_grad(gamma) {
        r.push((gamma, dgamma));
    }
    if g.requires_grad(beta) {
        r.push((beta, dbeta));
    }
    r
}
