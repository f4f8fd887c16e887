use super::StageFeatureSet;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Resizes the spatial axes of `x` to `target`: integer-factor average
/// pooling when shrinking evenly, trilinear interpolation otherwise.
pub fn resize_to<T: Real>(g: &mut Graph<T>, x: Var, target: [usize; 3]) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 5 {
        return Err(Error::shape("resize_to", format!("expected 5D input, got {s:?}")));
    }
    let src = [s[2], s[3], s[4]];
    if src == target {
        return Ok(x);
    }
    let shrinks_evenly = (0..3).all(|a| target[a] >= 1 && src[a] >= target[a] && src[a].is_multiple_of(target[a]));
    if shrinks_evenly {
        g.downsample_avg(x, [0, 1, 2].map(|a| src[a] / target[a]))
    } else {
        g.resize_trilinear(x, target)
    }
}

/// Brings every stage to the extent of `target_stage` and concatenates them
/// on the channel axis, giving `[N, sum C_i, H, W, D]`.
pub fn assemble_multistage<T: Real>(g: &mut Graph<T>, fs: &StageFeatureSet, target_stage: usize) -> Result<Var> {
    if fs.is_empty() {
        return Err(Error::shape("assemble_multistage", "empty stage list"));
    }
    if target_stage >= fs.len() {
        return Err(Error::config(format!("target stage {target_stage} of {} stages", fs.len())));
    }
    let target = fs.extents(g, target_stage);
    let mut parts = Vec::with_capacity(fs.len());
    for &s in &fs.stages {
        parts.push(resize_to(g, s, target)?);
    }
    g.concat(&parts, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn stages(g: &mut Graph<f64>, channels: &[usize], base: usize) -> StageFeatureSet {
        let vars = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let e = base >> i;
                g.constant(Tensor::from_fn(&[1, c, e, e, e], |k| (k as f64 * 0.1).sin()))
            })
            .collect();
        StageFeatureSet::new(g, vars).unwrap()
    }

    #[test]
    fn channel_total_is_sum_of_stages() {
        let mut g = Graph::new();
        let fs = stages(&mut g, &[8, 16], 4);
        let x = assemble_multistage(&mut g, &fs, 1).unwrap();
        assert_eq!(g.shape(x), &[1, 24, 2, 2, 2]);
    }

    #[test]
    fn target_stage_passes_through_unchanged() {
        let mut g = Graph::new();
        let fs = stages(&mut g, &[2, 3, 4], 8);
        let x = assemble_multistage(&mut g, &fs, 1).unwrap();
        let seg = g.slice(x, 1, 2, 3).unwrap();
        assert_eq!(g.value(seg), g.value(fs.stages[1]));
    }

    #[test]
    fn default_schedule_has_1120_channels() {
        let channels = [32, 64, 128, 256, 320, 320];
        assert_eq!(channels.iter().sum::<usize>(), 1120);
        let mut g = Graph::new();
        let fs = stages(&mut g, &channels, 32);
        let x = assemble_multistage(&mut g, &fs, 3).unwrap();
        assert_eq!(g.shape(x), &[1, 1120, 4, 4, 4]);
    }

    #[test]
    fn stage_set_rejects_degenerate_input() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        assert!(StageFeatureSet::new(&g, vec![a]).is_err());
        let b = g.constant(Tensor::zeros(&[2, 2, 2, 2, 2]));
        assert!(StageFeatureSet::new(&g, vec![a, b]).is_err());
        assert!(assemble_multistage(&mut g, &StageFeatureSet { stages: vec![] }, 0).is_err());
    }
}
