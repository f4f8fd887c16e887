use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Soft Dice plus mean cross-entropy.
    DiceCe,
    /// Soft Dice plus the mean of the largest per-voxel cross-entropies.
    DiceTopK,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice_ce" => Ok(LossKind::DiceCe),
            "dtk10" | "dice_topk" => Ok(LossKind::DiceTopK),
            _ => Err(Error::config(format!("unknown loss {s}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::DiceCe => "dice_ce",
            LossKind::DiceTopK => "dice_topk",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Share of voxels kept by the top-k cross-entropy, in `(0, 1]`.
    pub topk_fraction: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::DiceCe, topk_fraction: 0.1, dice_eps: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::config(format!("topk_fraction {} outside (0, 1]", self.topk_fraction)));
        }
        if self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            return Err(Error::config("dice_eps must be positive"));
        }
        Ok(())
    }
}

/// `ceil(fraction * n)`, clamped to `1..=n`. Products within rounding
/// noise of an integer count as that integer, so 10% of 1000 is 100.
pub fn topk_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let k = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) { x.round() } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn check_target<T: Real>(g: &Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Vec<usize>> {
    let s = g.shape(logits).to_vec();
    let want = if s.len() == 5 { vec![s[0], s[2], s[3], s[4]] } else { vec![] };
    if s.len() != 5 || s[1] < 2 || target.shape() != want.as_slice() {
        return Err(Error::shape("loss", format!("logits {s:?} vs target {:?}", target.shape())));
    }
    Ok(s)
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` over the whole batch,
/// `p` the foreground softmax channel and `t` the binary target `[N, H, W, D]`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    let s = check_target(g, logits, target)?;
    let p = g.softmax(logits, 1)?;
    let fg = g.slice(p, 1, 1, 1)?;
    let t = g.constant(target.clone().reshape(&[s[0], 1, s[2], s[3], s[4]])?);
    let pt = g.mul(fg, t)?;
    let inter = g.sum(pt)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, eps)?;
    let sp = g.sum(fg)?;
    let den = g.add_scalar(sp, target.sum().as_f64() + eps)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Per-voxel cross-entropy `[N, H, W, D]` against class indices in `target`.
pub fn voxel_ce<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let s = check_target(g, logits, target)?;
    let logp = g.log_softmax(logits, 1)?;
    let inner: usize = s[2..].iter().product();
    let t = target.data();
    let onehot = Tensor::from_fn(&s, |i| {
        let (n, c, v) = (i / (s[1] * inner), (i / inner) % s[1], i % inner);
        if t[n * inner + v].as_f64().round() as usize == c {
            T::one()
        } else {
            T::zero()
        }
    });
    let oh = g.constant(onehot);
    let picked = g.mul(logp, oh)?;
    let summed = g.sum_axis(picked, 1)?;
    g.scale(summed, -1.0)
}

/// Mean of the largest `ceil(fraction * count)` voxel cross-entropies.
pub fn topk_ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, fraction: f64) -> Result<Var> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("topk fraction {fraction} outside (0, 1]")));
    }
    let ce = voxel_ce(g, logits, target)?;
    let k = topk_count(fraction, g.value(ce).numel());
    g.top_k_mean(ce, k)
}

pub fn ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let ce = voxel_ce(g, logits, target)?;
    g.mean(ce)
}

/// Dice and cross-entropy terms added with equal weight.
pub fn segmentation_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let dice = dice_loss(g, logits, target, cfg.dice_eps)?;
    let ce = match cfg.kind {
        LossKind::DiceCe => ce_loss(g, logits, target)?,
        LossKind::DiceTopK => topk_ce_loss(g, logits, target, cfg.topk_fraction)?,
    };
    g.add(dice, ce)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Logits whose foreground softmax equals `p`.
    fn logits_for(p: &[f64], shape: [usize; 4]) -> Tensor<f64> {
        let inner: usize = shape[1..].iter().product();
        Tensor::from_fn(&[shape[0], 2, shape[1], shape[2], shape[3]], |i| {
            let (n, c, v) = (i / (2 * inner), (i / inner) % 2, i % inner);
            if c == 0 {
                0.0
            } else {
                let q = p[n * inner + v];
                (q / (1.0 - q)).ln()
            }
        })
    }

    fn eval(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, logits: Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(logits);
        let y = f(&mut g, x).unwrap();
        g.value(y).data()[0]
    }

    #[test]
    fn dice_closed_forms() {
        let n = 8;
        let t = Tensor::ones(&[1, 2, 2, 2]);
        let half = logits_for(&[0.5; 8], [1, 2, 2, 2]);
        let got = eval(|g, x| dice_loss(g, x, &t, 1e-5), half);
        let want = 1.0 - (2.0 * 0.5 * n as f64 + 1e-5) / (0.5 * n as f64 + n as f64 + 1e-5);
        assert!((got - want).abs() < 1e-12);
        let sure = logits_for(&[1.0 - 1e-12; 8], [1, 2, 2, 2]);
        assert!(eval(|g, x| dice_loss(g, x, &t, 1e-5), sure) < 1e-6);
        let empty = Tensor::zeros(&[1, 2, 2, 2]);
        let none = logits_for(&[1e-12; 8], [1, 2, 2, 2]);
        let l = eval(|g, x| dice_loss(g, x, &empty, 1e-5), none);
        assert!(l.is_finite() && l < 1e-5);
    }

    #[test]
    fn topk_selects_hardest() {
        // CE of 2.0 needs p_true = e^-2; the other voxel is certain.
        let p = [(-2.0f64).exp(), 1.0 - 1e-15];
        let logits = logits_for(&p, [1, 1, 1, 2]);
        let t = Tensor::ones(&[1, 1, 1, 2]);
        let got = eval(|g, x| topk_ce_loss(g, x, &t, 0.5), logits);
        assert!((got - 2.0).abs() < 1e-9);
    }

    #[test]
    fn full_fraction_is_mean_ce() {
        let logits = Tensor::from_fn(&[2, 2, 3, 2, 2], |i| ((i * 37 % 11) as f64 - 5.0) * 0.4);
        let t = Tensor::from_fn(&[2, 3, 2, 2], |i| (i % 3 == 0) as u8 as f64);
        let a = eval(|g, x| topk_ce_loss(g, x, &t, 1.0), logits.clone());
        let b = eval(|g, x| ce_loss(g, x, &t), logits);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn topk_counts() {
        assert_eq!(topk_count(0.1, 1000), 100);
        assert_eq!(topk_count(0.1, 64), 7);
        assert_eq!(topk_count(1.0, 5), 5);
        assert_eq!(topk_count(1e-9, 5), 1);
        assert_eq!(topk_count(0.3, 10), 3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        assert!(dice_loss(&mut g, x, &Tensor::zeros(&[1, 2, 2, 3]), 1e-5).is_err());
        assert!(LossConfig { topk_fraction: 0.0, ..Default::default() }.validate().is_err());
    }
}
