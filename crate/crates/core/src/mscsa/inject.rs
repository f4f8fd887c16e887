use super::{resize_to, StageFeatureSet};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{Real, Var};

/// Splits the block output per stage, resizes each segment back to its
/// stage's extent and fuses it as `x_i * (1 + gamma_i) + beta_i`, where
/// `gamma_i`/`beta_i` are per-voxel linear maps of the segment
/// (`{path}.s{i}.gamma`, `{path}.s{i}.beta`).
pub fn inject<T: Real>(
    sess: &mut Session<'_, T>,
    fs: &StageFeatureSet,
    block_out: Var,
    path: &str,
) -> Result<StageFeatureSet> {
    let channels = fs.channels(&sess.graph);
    let c = sess.graph.shape(block_out)[1];
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("inject", format!("block width {c} vs stage channels {channels:?}")));
    }
    let segments = sess.graph.split(block_out, &channels, 1)?;
    let mut fused = Vec::with_capacity(fs.len());
    for (i, seg) in segments.into_iter().enumerate() {
        let extent = fs.extents(&sess.graph, i);
        let seg = resize_to(&mut sess.graph, seg, extent)?;
        let gamma = sess.linear(seg, &format!("{path}.s{i}.gamma"))?;
        let beta = sess.linear(seg, &format!("{path}.s{i}.beta"))?;
        let scale = sess.graph.add_scalar(gamma, 1.0)?;
        let modulated = sess.graph.mul(fs.stages[i], scale)?;
        fused.push(sess.graph.add(modulated, beta)?);
    }
    StageFeatureSet::new(&sess.graph, fused)
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::{check_params, probe_loss, FD_TOLERANCE};
    use crate::mscsa::{init_params, mscsa_skip, MscsaConfig, StageFeatureSet};
    use crate::nn::{NetworkParams, ParamInit, Session};
    use crate::rng::seeded;
    use crate::tensor::{NormMode, Tensor};

    const CHANNELS: [usize; 3] = [2, 3, 4];
    const EXTENTS: [[usize; 3]; 3] = [[8, 8, 4], [4, 4, 2], [2, 2, 1]];

    fn setup() -> (NetworkParams<f64>, MscsaConfig, Vec<Tensor<f64>>) {
        let cfg = MscsaConfig::for_channels(&CHANNELS);
        let mut p = NetworkParams::new();
        let mut rng = seeded(21);
        init_params(&mut ParamInit { params: &mut p, rng: &mut rng }, &cfg, &CHANNELS);
        let xs = CHANNELS
            .iter()
            .zip(EXTENTS)
            .enumerate()
            .map(|(s, (&c, e))| Tensor::from_fn(&[2, c, e[0], e[1], e[2]], |i| ((i + 13 * s) as f64 * 0.41).cos()))
            .collect();
        (p, cfg, xs)
    }

    fn run(p: &mut NetworkParams<f64>, cfg: &MscsaConfig, xs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let mut s = Session::new(p, NormMode::Train, false);
        let stages = xs.iter().map(|x| s.graph.constant(x.clone())).collect();
        let fs = StageFeatureSet::new(&s.graph, stages).unwrap();
        let out = mscsa_skip(&mut s, &fs, cfg).unwrap();
        out.stages.iter().map(|&v| s.graph.value(v).clone()).collect()
    }

    #[test]
    fn identity_at_initialization() {
        let (mut p, cfg, xs) = setup();
        assert_eq!(run(&mut p, &cfg, &xs), xs);
    }

    #[test]
    fn negative_unit_gamma_annihilates() {
        let (mut p, cfg, xs) = setup();
        for (k, w) in p.weights.iter_mut() {
            if k.contains(".gamma.bias") {
                w.data_mut().fill(-1.0);
            }
        }
        for (out, x) in run(&mut p, &cfg, &xs).iter().zip(&xs) {
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn skip_gradients_match_finite_differences() {
        let (mut p, cfg, xs) = setup();
        let mut rng_state = 1u32;
        for (k, w) in p.weights.iter_mut() {
            if k.starts_with("mscsa.inject") {
                for v in w.data_mut() {
                    rng_state = rng_state.wrapping_mul(1_103_515_245).wrapping_add(12345);
                    *v = ((rng_state >> 16) as f64 / 65536.0 - 0.5) * 0.4;
                }
            }
        }
        let report = check_params(
            "mscsa_skip",
            &p,
            |s| {
                let stages = xs.iter().map(|x| s.graph.constant(x.clone())).collect();
                let fs = StageFeatureSet::new(&s.graph, stages)?;
                let out = mscsa_skip(s, &fs, &cfg)?;
                let flat: Vec<_> = out
                    .stages
                    .iter()
                    .map(|&v| {
                        let n = s.graph.value(v).numel();
                        s.graph.reshape(v, &[n])
                    })
                    .collect::<crate::Result<_>>()?;
                let cat = s.graph.concat(&flat, 0)?;
                probe_loss(&mut s.graph, cat, 4)
            },
            Some(3),
        )
        .unwrap();
        assert!(report.passed(FD_TOLERANCE), "{report:?}");
    }
}
