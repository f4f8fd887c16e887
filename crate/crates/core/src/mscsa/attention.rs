use super::{MscsaConfig, RpeActivation, MSP_SCALES};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{ConvSpec, Graph, Real, Var};

/// Head-split projections for one CSA layer.
pub struct MspOutput {
    /// `[N * heads, L1, qk_dim / heads]`, scale-1 queries.
    pub q: Var,
    /// `[N * heads, L, qk_dim / heads]`, keys of all three scales.
    pub k: Var,
    /// `[N * heads, L, v_dim / heads]`.
    pub v: Var,
    /// Scale-1 values in spatial layout `[N, v_dim, H, W, D]`.
    pub v1: Var,
    /// Token count of each scale branch.
    pub branch_tokens: [usize; 3],
}

/// `[N, C, H, W, D]` -> `[N, heads, C / heads, HWD]`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], heads, s[1] / heads, s[2] * s[3] * s[4]])
}

/// `[N, heads, c, L]` -> `[N * heads, L, c]`.
fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 1, 3, 2])?;
    g.reshape(t, &[s[0] * s[1], s[3], s[2]])
}

fn project<T: Real>(sess: &mut Session<'_, T>, x: Var, path: &str, stride: usize) -> Result<Var> {
    let w = sess.p(&format!("{path}.weight"))?;
    let b = sess.p(&format!("{path}.bias"))?;
    sess.graph.conv3d(x, w, Some(b), ConvSpec::new(stride, 0, 1))
}

/// Multi-scale key/value projection. Queries come from the scale-1 map;
/// keys and values from kernel-1 convolutions with strides 1, 2, 3 whose
/// token sequences are concatenated.
pub fn msp_project<T: Real>(sess: &mut Session<'_, T>, x: Var, cfg: &MscsaConfig, path: &str) -> Result<MspOutput> {
    let s = sess.graph.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::shape("msp_project", format!("expected 5D input, got {s:?}")));
    }
    let q_map = project(sess, x, &format!("{path}.q"), 1)?;
    let qh = split_heads(&mut sess.graph, q_map, cfg.heads)?;
    let q = to_tokens(&mut sess.graph, qh)?;
    let mut ks = Vec::with_capacity(3);
    let mut vs = Vec::with_capacity(3);
    let mut v1 = None;
    let mut branch_tokens = [0; 3];
    for (i, &stride) in MSP_SCALES.iter().enumerate() {
        let k_map = project(sess, x, &format!("{path}.k{}", i + 1), stride)?;
        let v_map = project(sess, x, &format!("{path}.v{}", i + 1), stride)?;
        branch_tokens[i] = sess.graph.shape(k_map)[2..].iter().product();
        if i == 0 {
            v1 = Some(v_map);
        }
        ks.push(split_heads(&mut sess.graph, k_map, cfg.heads)?);
        vs.push(split_heads(&mut sess.graph, v_map, cfg.heads)?);
    }
    let k_all = sess.graph.concat(&ks, 3)?;
    let v_all = sess.graph.concat(&vs, 3)?;
    let k = to_tokens(&mut sess.graph, k_all)?;
    let v = to_tokens(&mut sess.graph, v_all)?;
    Ok(MspOutput { q, k, v, v1: v1.expect("three branches"), branch_tokens })
}

/// `softmax(Q K^T / sqrt(d_head))`, shape `[B, L1, L]`.
pub fn attention_weights<T: Real>(g: &mut Graph<T>, q: Var, k: Var, cfg: &MscsaConfig) -> Result<Var> {
    let dh = cfg.qk_dim / cfg.heads;
    if g.shape(q).len() != 3 || g.shape(q)[2] != dh || g.shape(k).len() != 3 || g.shape(k)[2] != dh {
        return Err(Error::shape(
            "cross_scale_attention",
            format!("q {:?}, k {:?}, head width {dh}", g.shape(q), g.shape(k)),
        ));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    g.softmax(scaled, 2)
}

/// Scale-1 queries attending over multi-scale keys/values: `[B, L1, dv_head]`.
pub fn cross_scale_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, cfg: &MscsaConfig) -> Result<Var> {
    if g.shape(v).len() != 3 || g.shape(v)[1] != g.shape(k)[1] {
        return Err(Error::shape("cross_scale_attention", format!("k {:?} vs v {:?}", g.shape(k), g.shape(v))));
    }
    let w = attention_weights(g, q, k, cfg)?;
    g.matmul(w, v)
}

/// Adds the depthwise-convolved scale-1 values to the attention output and
/// returns the sum in spatial layout `[N, v_dim, H, W, D]`.
pub fn rpe<T: Real>(sess: &mut Session<'_, T>, attn: Var, v1: Var, cfg: &MscsaConfig, path: &str) -> Result<Var> {
    let vs = sess.graph.shape(v1).to_vec();
    let (n, heads) = (vs[0], cfg.heads);
    let l1 = vs[2] * vs[3] * vs[4];
    let a = sess.graph.reshape(attn, &[n, heads, l1, cfg.v_dim / heads])?;
    let a = sess.graph.permute(a, &[0, 1, 3, 2])?;
    let a = sess.graph.reshape(a, &vs)?;
    let act = match cfg.rpe_activation {
        RpeActivation::Silu => sess.graph.silu(v1)?,
        RpeActivation::Identity => v1,
    };
    let w = sess.p(&format!("{path}.dw.weight"))?;
    let b = sess.p(&format!("{path}.dw.bias"))?;
    let k = cfg.dwconv_kernel;
    let local = sess.graph.conv3d(act, w, Some(b), ConvSpec::new(1, k / 2, cfg.v_dim))?;
    sess.graph.add(a, local)
}

/// One CSA layer: projections, attention, positional shortcut, output map
/// back to the input width.
pub fn csa<T: Real>(sess: &mut Session<'_, T>, x: Var, cfg: &MscsaConfig, path: &str) -> Result<Var> {
    let m = msp_project(sess, x, cfg, path)?;
    let attn = cross_scale_attention(&mut sess.graph, m.q, m.k, m.v, cfg)?;
    let y = rpe(sess, attn, m.v1, cfg, path)?;
    sess.linear(y, &format!("{path}.out"))
}

/// Plain multi-head self-attention over the scale-1 tokens, using the
/// scale-1 projections of a CSA layer. Baseline for benchmarking.
pub fn full_attention<T: Real>(sess: &mut Session<'_, T>, x: Var, cfg: &MscsaConfig, path: &str) -> Result<Var> {
    let tokens = |sess: &mut Session<'_, T>, name: &str| -> Result<(Var, Vec<usize>)> {
        let map = project(sess, x, &format!("{path}.{name}"), 1)?;
        let shape = sess.graph.shape(map).to_vec();
        let h = split_heads(&mut sess.graph, map, cfg.heads)?;
        Ok((to_tokens(&mut sess.graph, h)?, shape))
    };
    let (q, _) = tokens(sess, "q")?;
    let (k, _) = tokens(sess, "k1")?;
    let (v, vs) = tokens(sess, "v1")?;
    let attn = cross_scale_attention(&mut sess.graph, q, k, v, cfg)?;
    let l1 = vs[2] * vs[3] * vs[4];
    let a = sess.graph.reshape(attn, &[vs[0], cfg.heads, l1, cfg.v_dim / cfg.heads])?;
    let a = sess.graph.permute(a, &[0, 1, 3, 2])?;
    let a = sess.graph.reshape(a, &vs)?;
    sess.linear(a, &format!("{path}.out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mscsa::{init_params, msp_token_count};
    use crate::nn::{NetworkParams, ParamInit};
    use crate::rng::seeded;
    use crate::tensor::{NormMode, Tensor};

    fn setup(channels: &[usize]) -> (NetworkParams<f64>, MscsaConfig) {
        let cfg = MscsaConfig::for_channels(channels);
        let mut p = NetworkParams::new();
        let mut rng = seeded(3);
        init_params(&mut ParamInit { params: &mut p, rng: &mut rng }, &cfg, channels);
        (p, cfg)
    }

    #[test]
    fn projection_token_counts() {
        let (mut p, cfg) = setup(&[3, 5]);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let x = s.graph.constant(Tensor::from_fn(&[2, 8, 6, 6, 6], |i| (i as f64 * 0.01).cos()));
        let m = msp_project(&mut s, x, &cfg, "mscsa.block.csa1").unwrap();
        assert_eq!(m.branch_tokens, [216, 27, 8]);
        assert_eq!(s.graph.shape(m.q), &[8, 216, 2]);
        assert_eq!(s.graph.shape(m.k), &[8, 251, 2]);
        assert_eq!(s.graph.shape(m.v), &[8, 251, 2]);
        assert_eq!(msp_token_count(6, 6, 6), 251);

        let x1 = s.graph.constant(Tensor::ones(&[1, 8, 1, 1, 1]));
        let m1 = msp_project(&mut s, x1, &cfg, "mscsa.block.csa1").unwrap();
        assert_eq!(s.graph.shape(m1.k)[1], 3);
    }

    #[test]
    fn identical_keys_average_values() {
        let cfg = MscsaConfig { heads: 1, qk_dim: 2, v_dim: 2, ..MscsaConfig::for_channels(&[1, 1]) };
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64 - 2.0));
        let k = g.constant(Tensor::from_fn(&[1, 4, 2], |i| if i % 2 == 0 { 0.7 } else { -0.2 }));
        let v = g.constant(Tensor::from_fn(&[1, 4, 2], |i| (i * i) as f64));
        let out = cross_scale_attention(&mut g, q, k, v, &cfg).unwrap();
        let vv = g.value(v);
        let mean = [0, 1].map(|c| (0..4).map(|t| vv.get(&[0, t, c])).sum::<f64>() / 4.0);
        for t in 0..3 {
            for (c, m) in mean.iter().enumerate() {
                assert!((g.value(out).get(&[0, t, c]) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let cfg = MscsaConfig { heads: 1, qk_dim: 2, v_dim: 3, ..MscsaConfig::for_channels(&[1, 1]) };
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(&[2, 5, 2], |i| i as f64));
        let k = g.constant(Tensor::from_fn(&[2, 1, 2], |i| i as f64 - 1.0));
        let v = g.constant(Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = cross_scale_attention(&mut g, q, k, v, &cfg).unwrap();
        for b in 0..2 {
            for t in 0..5 {
                for c in 0..3 {
                    assert_eq!(g.value(out).get(&[b, t, c]), g.value(v).get(&[b, 0, c]));
                }
            }
        }
    }

    #[test]
    fn attention_rows_normalized_f32() {
        let cfg = MscsaConfig::for_channels(&[3, 5]);
        let mut g = Graph::<f32>::new();
        let q = g.constant(Tensor::from_fn(&[4, 7, 2], |i| (i as f32 * 0.37).sin() * 4.0));
        let k = g.constant(Tensor::from_fn(&[4, 9, 2], |i| (i as f32 * 0.11).cos() * 4.0));
        let w = attention_weights(&mut g, q, k, &cfg).unwrap();
        for row in g.value(w).data().chunks(9) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_depthwise_branch_leaves_attention_output() {
        let (mut p, mut cfg) = setup(&[3, 5]);
        for key in ["mscsa.block.csa1.dw.weight", "mscsa.block.csa1.dw.bias"] {
            p.weight_mut(key).unwrap().data_mut().fill(0.0);
        }
        cfg.heads = 2;
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let attn = s.graph.constant(Tensor::from_fn(&[2, 8, 4], |i| i as f64));
        let v1 = s.graph.constant(Tensor::from_fn(&[1, 8, 2, 2, 2], |i| -(i as f64)));
        let y = rpe(&mut s, attn, v1, &cfg, "mscsa.block.csa1").unwrap();
        // Back to head/token layout and compare with the raw attention output.
        let yh = s.graph.reshape(y, &[1, 2, 4, 8]).unwrap();
        let yt = s.graph.permute(yh, &[0, 1, 3, 2]).unwrap();
        let yt = s.graph.reshape(yt, &[2, 8, 4]).unwrap();
        assert_eq!(s.graph.value(yt), s.graph.value(attn));
    }

    #[test]
    fn identity_depthwise_kernel_adds_values() {
        let (mut p, mut cfg) = setup(&[3, 5]);
        cfg.rpe_activation = RpeActivation::Identity;
        let w = p.weight_mut("mscsa.block.csa1.dw.weight").unwrap();
        w.data_mut().fill(0.0);
        for c in 0..8 {
            w.data_mut()[c * 27 + 13] = 1.0;
        }
        p.weight_mut("mscsa.block.csa1.dw.bias").unwrap().data_mut().fill(0.0);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let zeros = s.graph.constant(Tensor::zeros(&[4, 27, 2]));
        let v1 = s.graph.constant(Tensor::from_fn(&[1, 8, 3, 3, 3], |i| (i as f64).sqrt()));
        let y = rpe(&mut s, zeros, v1, &cfg, "mscsa.block.csa1").unwrap();
        assert_eq!(s.graph.value(y), s.graph.value(v1));
    }

    #[test]
    fn full_attention_keeps_shape() {
        let (mut p, cfg) = setup(&[3, 5]);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let x = s.graph.constant(Tensor::from_fn(&[2, 8, 3, 2, 4], |i| (i as f64 * 0.2).sin()));
        let y = full_attention(&mut s, x, &cfg, "mscsa.block.csa1").unwrap();
        assert_eq!(s.graph.shape(y), &[2, 8, 3, 2, 4]);
    }
}
