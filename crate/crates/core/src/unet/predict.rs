use super::{forward, ModelConfig};
use crate::data::{zscore, Volume};
use crate::error::{Error, Result};
use crate::nn::{NetworkParams, Session};
use crate::tensor::{NormMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlidingWindow {
    pub patch: [usize; 3],
    /// Fraction of the patch shared by neighbouring windows, in `[0, 1)`.
    pub overlap: f64,
}

impl SlidingWindow {
    pub fn new(patch: [usize; 3], overlap: f64) -> Self {
        Self { patch, overlap }
    }
}

/// Window start positions along one axis. The last window is flush with
/// the end; extents shorter than the patch get a single window at 0.
pub fn tile_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let last = extent - patch;
    let mut v: Vec<usize> = (0..last).step_by(step).collect();
    v.push(last);
    v
}

/// Separable Gaussian blending weights, sigma = patch / 8 per axis, peak 1.
pub fn gaussian_weights(patch: [usize; 3]) -> Vec<f64> {
    let axis = |p: usize| -> Vec<f64> {
        let c = (p as f64 - 1.0) / 2.0;
        let sigma = p as f64 / 8.0;
        (0..p).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch.iter().product());
    for x in &a {
        for y in &b {
            for z in &c {
                w.push(x * y * z);
            }
        }
    }
    let max = w.iter().cloned().fold(0.0, f64::max);
    w.iter_mut().for_each(|v| *v /= max);
    w
}

/// Sliding-window class probabilities `[num_classes, H, W, D]`.
///
/// Each window is z-scored like a training patch, run through the network
/// in eval mode and softmaxed; overlapping windows are blended with
/// Gaussian weights. Volumes smaller than the patch are zero-padded and the
/// result cropped. Windows are accumulated in a fixed raster order.
pub fn predict(
    params: &NetworkParams<f32>,
    cfg: &ModelConfig,
    volume: &Volume,
    win: SlidingWindow,
) -> Result<Tensor<f32>> {
    cfg.validate_extents(&win.patch)?;
    if !(0.0..1.0).contains(&win.overlap) {
        return Err(Error::config(format!("overlap {} outside [0, 1)", win.overlap)));
    }
    let ext = volume.extents();
    let padded: [usize; 3] = std::array::from_fn(|a| ext[a].max(win.patch[a]));
    let [ph, pw, pd] = win.patch;
    let classes = cfg.num_classes;
    let weights = gaussian_weights(win.patch);
    let nvox: usize = padded.iter().product();
    let mut acc = vec![0.0f64; classes * nvox];
    let mut norm = vec![0.0f64; nvox];
    let src = volume.voxels.data();
    let mut local = params.clone();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(padded[a], win.patch[a], win.overlap)).collect();
    let mut patch = vec![0.0f32; ph * pw * pd];
    for &x0 in &starts[0] {
        for &y0 in &starts[1] {
            for &z0 in &starts[2] {
                for (i, v) in patch.iter_mut().enumerate() {
                    let (x, y, z) = (x0 + i / (pw * pd), y0 + (i / pd) % pw, z0 + i % pd);
                    *v = if x < ext[0] && y < ext[1] && z < ext[2] { src[(x * ext[1] + y) * ext[2] + z] } else { 0.0 };
                }
                zscore(&mut patch);
                let mut sess = Session::new(&mut local, NormMode::Eval, false);
                let xv = sess.graph.constant(Tensor::new(vec![1, 1, ph, pw, pd], patch.clone())?);
                let logits = forward(&mut sess, xv, cfg)?;
                let probs = sess.graph.softmax(logits, 1)?;
                let p = sess.graph.value(probs).data();
                let per = ph * pw * pd;
                for (i, &w) in weights.iter().enumerate() {
                    let (x, y, z) = (x0 + i / (pw * pd), y0 + (i / pd) % pw, z0 + i % pd);
                    let o = (x * padded[1] + y) * padded[2] + z;
                    norm[o] += w;
                    for c in 0..classes {
                        acc[c * nvox + o] += w * p[c * per + i] as f64;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(classes * ext.iter().product::<usize>());
    for c in 0..classes {
        for x in 0..ext[0] {
            for y in 0..ext[1] {
                for z in 0..ext[2] {
                    let o = (x * padded[1] + y) * padded[2] + z;
                    out.push((acc[c * nvox + o] / norm[o]) as f32);
                }
            }
        }
    }
    Tensor::new(vec![classes, ext[0], ext[1], ext[2]], out)
}
