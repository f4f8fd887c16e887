//! Finite-difference verification of every differentiable operation, the
//! MSCSA block, the losses and a small end-to-end network.

use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::gradcheck::{check_inputs, check_params, probe_loss, GradCheckReport};
use crate::mscsa::{init_params as init_mscsa, mscsa_block, MscsaConfig};
use crate::nn::{NetworkParams, ParamInit};
use crate::rng::seeded;
use crate::tensor::{BatchNormStats, ConvSpec, NormMode, Tensor};
use crate::training::{segmentation_loss, LossConfig, LossKind};
use crate::unet::{forward, init_params, ModelConfig};

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let u = Uniform::new(-1.0, 1.0).expect("valid range");
    Tensor::from_fn(shape, |_| u.sample(&mut rng))
}

fn binary_target(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed).map(|v| if v > 0.2 { 1.0 } else { 0.0 })
}

/// Randomizes the zero-initialized injection projections so gradients
/// reach the attention block.
fn wake_injection(p: &mut NetworkParams<f64>, seed: u64) {
    for (i, (k, w)) in p.weights.iter_mut().enumerate() {
        if k.contains(".inject.") {
            *w = random_tensor(w.shape(), seed + i as u64).map(|v| 0.3 * v);
        }
    }
}

/// Runs the whole suite. `cap` limits the probed elements per tensor.
pub fn gradcheck_suite(cap: Option<usize>) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let r = random_tensor;

    out.push(check_inputs(
        "conv3d",
        &[r(&[2, 4, 5, 4, 3], 1), r(&[6, 2, 3, 3, 3], 2), r(&[6], 3)],
        |g, v| {
            let spec = ConvSpec { stride: [2, 1, 2], padding: [1, 1, 0], groups: 2 };
            let y = g.conv3d(v[0], v[1], Some(v[2]), spec)?;
            probe_loss(g, y, 1)
        },
        cap,
    )?);
    out.push(check_inputs(
        "conv3d_depthwise",
        &[r(&[1, 3, 4, 4, 4], 4), r(&[3, 1, 3, 3, 3], 5)],
        |g, v| {
            let y = g.conv3d(v[0], v[1], None, ConvSpec::new(1, 1, 3))?;
            probe_loss(g, y, 2)
        },
        cap,
    )?);
    out.push(check_inputs(
        "pointwise",
        &[r(&[2, 3, 2, 2, 2], 6), r(&[4, 3], 7), r(&[4], 8)],
        |g, v| {
            let y = g.pointwise(v[0], v[1], Some(v[2]))?;
            probe_loss(g, y, 3)
        },
        cap,
    )?);
    out.push(check_inputs(
        "matmul",
        &[r(&[2, 3, 4], 9), r(&[2, 4, 5], 10), r(&[3, 2], 11), r(&[2, 4], 12)],
        |g, v| {
            let a = g.matmul(v[0], v[1])?;
            let b = g.matmul(v[2], v[3])?;
            let la = probe_loss(g, a, 4)?;
            let lb = probe_loss(g, b, 5)?;
            g.add(la, lb)
        },
        cap,
    )?);
    out.push(check_inputs(
        "resize_trilinear",
        &[r(&[1, 2, 3, 2, 4], 13), r(&[1, 1, 6, 5, 4], 14)],
        |g, v| {
            let up = g.resize_trilinear(v[0], [5, 4, 3])?;
            let down = g.resize_trilinear(v[1], [4, 3, 3])?;
            let a = probe_loss(g, up, 6)?;
            let b = probe_loss(g, down, 7)?;
            g.add(a, b)
        },
        cap,
    )?);
    out.push(check_inputs(
        "downsample_avg",
        &[r(&[1, 2, 4, 4, 2], 15)],
        |g, v| {
            let y = g.downsample_avg(v[0], [2, 2, 1])?;
            probe_loss(g, y, 8)
        },
        cap,
    )?);
    out.push(check_inputs(
        "batch_norm_train",
        &[r(&[3, 2, 2, 2, 2], 16), r(&[2], 17), r(&[2], 18)],
        |g, v| {
            let mut stats = BatchNormStats::new(2);
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train)?;
            probe_loss(g, y, 9)
        },
        cap,
    )?);
    out.push(check_inputs(
        "batch_norm_eval",
        &[r(&[2, 2, 2, 2, 2], 19), r(&[2], 20), r(&[2], 21)],
        |g, v| {
            let mut stats = BatchNormStats { mean: vec![0.3, -0.2], var: vec![0.5, 2.0] };
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Eval)?;
            probe_loss(g, y, 10)
        },
        cap,
    )?);
    out.push(check_inputs(
        "shape_ops",
        &[r(&[2, 3, 4], 22), r(&[2, 2, 4], 23)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let parts = g.split(c, &[1, 4], 1)?;
            let s = g.slice(parts[1], 2, 1, 2)?;
            let p = g.permute(s, &[2, 0, 1])?;
            let t = g.transpose(p)?;
            let y = g.reshape(t, &[8, 2])?;
            probe_loss(g, y, 11)
        },
        cap,
    )?);
    out.push(check_inputs(
        "arithmetic",
        &[r(&[2, 3], 24), r(&[2, 3], 25)],
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let m = g.mul(a, s)?;
            let d0 = g.mul(v[1], v[1])?;
            let den = g.add_scalar(d0, 0.5)?;
            let d = g.div(m, den)?;
            let y = g.scale(d, -1.7)?;
            probe_loss(g, y, 12)
        },
        cap,
    )?);
    out.push(check_inputs(
        "activations",
        &[r(&[3, 4], 26)],
        |g, v| {
            let a = g.leaky_relu(v[0], 0.01)?;
            let b = g.silu(v[0])?;
            let y = g.add(a, b)?;
            probe_loss(g, y, 13)
        },
        cap,
    )?);
    out.push(check_inputs(
        "softmax",
        &[r(&[2, 3, 4], 27)],
        |g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.log_softmax(v[0], 2)?;
            let la = probe_loss(g, a, 14)?;
            let lb = probe_loss(g, b, 15)?;
            g.add(la, lb)
        },
        cap,
    )?);
    out.push(check_inputs(
        "reductions",
        &[r(&[2, 3, 4], 28)],
        |g, v| {
            let s = g.sum(v[0])?;
            let m = g.mean(v[0])?;
            let ax = g.sum_axis(v[0], 1)?;
            let pa = probe_loss(g, ax, 16)?;
            let tk = g.top_k_mean(v[0], 5)?;
            let sm = g.add(s, m)?;
            let st = g.add(pa, tk)?;
            g.add(sm, st)
        },
        cap,
    )?);

    for (kind, name) in [(LossKind::DiceCe, "loss_dice_ce"), (LossKind::DiceTopK, "loss_dice_topk")] {
        let target = binary_target(&[2, 4, 4, 4], 29);
        let cfg = LossConfig { kind, ..Default::default() };
        out.push(check_inputs(
            name,
            &[r(&[2, 2, 4, 4, 4], 30).map(|v| 2.0 * v)],
            |g, v| segmentation_loss(g, v[0], &target, &cfg),
            cap,
        )?);
    }

    let channels = [3, 5];
    let mcfg = MscsaConfig::for_channels(&channels);
    let mut mp = NetworkParams::new();
    init_mscsa(&mut ParamInit { params: &mut mp, rng: &mut seeded(31) }, &mcfg, &channels);
    let x = r(&[2, 8, 4, 4, 4], 32);
    out.push(check_params(
        "mscsa_block",
        &mp,
        |s| {
            let xv = s.graph.constant(x.clone());
            let y = mscsa_block(s, xv, &mcfg, &channels, "mscsa.block")?;
            probe_loss(&mut s.graph, y, 17)
        },
        cap,
    )?);

    let ucfg = ModelConfig::new(vec![2, 4]).with_mscsa();
    let mut up = init_params::<f64>(&ucfg, 33)?;
    wake_injection(&mut up, 34);
    let img = r(&[2, 1, 8, 8, 8], 35);
    let target = binary_target(&[2, 8, 8, 8], 36);
    out.push(check_params(
        "unet_mscsa_dice_ce",
        &up,
        |s| {
            let xv = s.graph.constant(img.clone());
            let logits = forward(s, xv, &ucfg)?;
            segmentation_loss(&mut s.graph, logits, &target, &LossConfig::default())
        },
        cap,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::FD_TOLERANCE;

    #[test]
    fn suite_passes() {
        let reports = gradcheck_suite(Some(6)).unwrap();
        assert!(reports.len() >= 17);
        for r in &reports {
            assert!(r.passed(FD_TOLERANCE), "{r:?}");
            assert!(r.checked > 0);
        }
    }
}
