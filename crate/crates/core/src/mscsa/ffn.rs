use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{Real, Var};

/// Position-wise FFN: expand by [`super::FFN_EXPANSION`], SiLU, contract.
pub fn ffn<T: Real>(sess: &mut Session<'_, T>, x: Var, path: &str) -> Result<Var> {
    let h = sess.linear(x, &format!("{path}.fc1"))?;
    let h = sess.graph.silu(h)?;
    sess.linear(h, &format!("{path}.fc2"))
}

/// Block-diagonal FFN: each encoder stage's channel segment gets its own
/// FFN (`{path}.s{i}`); outputs are concatenated back in order.
pub fn intra_ffn<T: Real>(sess: &mut Session<'_, T>, x: Var, stage_channels: &[usize], path: &str) -> Result<Var> {
    let c = sess.graph.shape(x)[1];
    if stage_channels.iter().sum::<usize>() != c || stage_channels.contains(&0) {
        return Err(Error::shape("intra_ffn", format!("partition {stage_channels:?} of {c} channels")));
    }
    let parts = sess.graph.split(x, stage_channels, 1)?;
    let mut outs = Vec::with_capacity(parts.len());
    for (i, part) in parts.into_iter().enumerate() {
        outs.push(ffn(sess, part, &format!("{path}.s{i}"))?);
    }
    sess.graph.concat(&outs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetworkParams, ParamInit};
    use crate::rng::seeded;
    use crate::tensor::{NormMode, Tensor};

    fn params(channels: &[usize]) -> NetworkParams<f64> {
        let mut p = NetworkParams::new();
        let mut rng = seeded(11);
        let mut init = ParamInit { params: &mut p, rng: &mut rng };
        for (i, &c) in channels.iter().enumerate() {
            init.linear(&format!("intra.s{i}.fc1"), c, 3 * c);
            init.linear(&format!("intra.s{i}.fc2"), 3 * c, c);
        }
        p
    }

    fn input(c: usize, shift: f64) -> Tensor<f64> {
        Tensor::from_fn(&[2, c, 3, 2, 2], |i| ((i as f64) * 0.37 + shift).sin())
    }

    #[test]
    fn single_segment_is_plain_ffn() {
        let mut p = params(&[5]);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let x = s.graph.constant(input(5, 0.0));
        let a = intra_ffn(&mut s, x, &[5], "intra").unwrap();
        let b = ffn(&mut s, x, "intra.s0").unwrap();
        assert_eq!(s.graph.value(a), s.graph.value(b));
    }

    #[test]
    fn segments_do_not_mix() {
        let mut p = params(&[2, 3]);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let x0 = input(5, 0.0);
        let mut x1 = x0.clone();
        // Perturb only the first two channels.
        for (i, v) in x1.data_mut().iter_mut().enumerate() {
            if (i / 12) % 5 < 2 {
                *v += 0.5;
            }
        }
        let a = s.graph.constant(x0);
        let b = s.graph.constant(x1);
        let ya = intra_ffn(&mut s, a, &[2, 3], "intra").unwrap();
        let yb = intra_ffn(&mut s, b, &[2, 3], "intra").unwrap();
        let (ya, yb) = (s.graph.value(ya), s.graph.value(yb));
        let mut changed = false;
        for n in 0..2 {
            for c in 0..5 {
                for v in 0..12 {
                    let idx = [n, c, v / 4, (v / 2) % 2, v % 2];
                    let d = ya.get(&idx) - yb.get(&idx);
                    if c < 2 {
                        changed |= d != 0.0;
                    } else {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
        assert!(changed);
    }

    #[test]
    fn rejects_bad_partition() {
        let mut p = params(&[2, 3]);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let x = s.graph.constant(input(5, 0.0));
        assert!(intra_ffn(&mut s, x, &[2, 2], "intra").is_err());
    }
}
