use super::{csa, ffn, intra_ffn, MscsaConfig};
use crate::error::Result;
use crate::nn::Session;
use crate::tensor::{Real, Var};

/// CSA -> Intra-FFN -> CSA -> FFN, each `x + sublayer(bn(x))`, followed by
/// an output batch norm. Shape preserving.
pub fn mscsa_block<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    cfg: &MscsaConfig,
    stage_channels: &[usize],
    path: &str,
) -> Result<Var> {
    let n1 = sess.bn(x, &format!("{path}.norm1"))?;
    let a1 = csa(sess, n1, cfg, &format!("{path}.csa1"))?;
    let x = sess.graph.add(x, a1)?;

    let n2 = sess.bn(x, &format!("{path}.norm2"))?;
    let f1 = intra_ffn(sess, n2, stage_channels, &format!("{path}.intra"))?;
    let x = sess.graph.add(x, f1)?;

    let n3 = sess.bn(x, &format!("{path}.norm3"))?;
    let a2 = csa(sess, n3, cfg, &format!("{path}.csa2"))?;
    let x = sess.graph.add(x, a2)?;

    let n4 = sess.bn(x, &format!("{path}.norm4"))?;
    let f2 = ffn(sess, n4, &format!("{path}.ffn"))?;
    let x = sess.graph.add(x, f2)?;

    sess.bn(x, &format!("{path}.norm_out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, probe_loss, FD_TOLERANCE};
    use crate::mscsa::init_params;
    use crate::nn::{NetworkParams, ParamInit};
    use crate::rng::seeded;
    use crate::tensor::{NormMode, Tensor};

    const CHANNELS: [usize; 2] = [3, 5];

    fn setup() -> (NetworkParams<f64>, MscsaConfig, Tensor<f64>) {
        let cfg = MscsaConfig::for_channels(&CHANNELS);
        let mut p = NetworkParams::new();
        let mut rng = seeded(5);
        init_params(&mut ParamInit { params: &mut p, rng: &mut rng }, &cfg, &CHANNELS);
        let x = Tensor::from_fn(&[2, 8, 4, 4, 4], |i| ((i * 7 % 23) as f64 * 0.29).sin());
        (p, cfg, x)
    }

    #[test]
    fn zero_sublayers_leave_normalized_input() {
        let (mut p, cfg, x) = setup();
        for (k, w) in p.weights.iter_mut() {
            let zero = [".csa1.out.", ".csa2.out.", ".fc2."].iter().any(|s| k.contains(s));
            if zero {
                w.data_mut().fill(0.0);
            }
        }
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let xv = s.graph.constant(x);
        let y = mscsa_block(&mut s, xv, &cfg, &CHANNELS, "mscsa.block").unwrap();
        let r = s.bn(xv, "mscsa.block.norm_out").unwrap();
        assert_eq!(s.graph.value(y), s.graph.value(r));
    }

    #[test]
    fn preserves_shape() {
        let (mut p, cfg, x) = setup();
        let mut s = Session::new(&mut p, NormMode::Train, false);
        let xv = s.graph.constant(x);
        let y = mscsa_block(&mut s, xv, &cfg, &CHANNELS, "mscsa.block").unwrap();
        assert_eq!(s.graph.shape(y), &[2, 8, 4, 4, 4]);
        assert!(s.graph.value(y).is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, cfg, x) = setup();
        let report = check_params(
            "mscsa_block",
            &p,
            |s| {
                let xv = s.graph.constant(x.clone());
                let y = mscsa_block(s, xv, &cfg, &CHANNELS, "mscsa.block")?;
                probe_loss(&mut s.graph, y, 9)
            },
            Some(4),
        )
        .unwrap();
        assert!(report.passed(FD_TOLERANCE), "{report:?}");
        assert!(report.checked > 100);
    }
}
