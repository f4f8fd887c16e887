use rand::Rng as _;

use super::{LabelMask, Volume};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Probability of centring a training patch on a lesion voxel.
pub const DEFAULT_FOREGROUND_BIAS: f64 = 1.0 / 3.0;

/// A training patch: image `[h, w, d]` and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

/// Crops a patch. With probability `foreground_bias` (and a nonempty mask)
/// the window is centred on a uniformly chosen lesion voxel, shifted inward
/// where it would leave the volume; otherwise its corner is uniform. Axes
/// shorter than the patch start at 0 and are zero-padded at the end.
pub fn sample_patch(v: &Volume, mask: &LabelMask, patch: [usize; 3], foreground_bias: f64, rng: &mut Rng) -> PatchPair {
    let ext = v.extents();
    let slack: [usize; 3] = std::array::from_fn(|a| ext[a].saturating_sub(patch[a]));
    let want_fg = rng.random::<f64>() < foreground_bias;
    let start: [usize; 3] = if want_fg && mask.lesion_volume() > 0 {
        let pick = rng.random_range(0..mask.lesion_volume());
        let flat = mask.voxels().iter().enumerate().filter(|(_, &m)| m == 1).nth(pick).expect("counted").0;
        let c = [flat / (ext[1] * ext[2]), (flat / ext[2]) % ext[1], flat % ext[2]];
        std::array::from_fn(|a| c[a].saturating_sub(patch[a] / 2).min(slack[a]))
    } else {
        std::array::from_fn(|a| rng.random_range(0..=slack[a]))
    };
    crop(v, mask, start, patch)
}

fn crop(v: &Volume, mask: &LabelMask, start: [usize; 3], patch: [usize; 3]) -> PatchPair {
    let ext = v.extents();
    let n: usize = patch.iter().product();
    let mut img = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for x in 0..patch[0] {
        for y in 0..patch[1] {
            for z in 0..patch[2] {
                let (sx, sy, sz) = (start[0] + x, start[1] + y, start[2] + z);
                if sx < ext[0] && sy < ext[1] && sz < ext[2] {
                    let i = (sx * ext[1] + sy) * ext[2] + sz;
                    img.push(v.voxels.data()[i]);
                    m.push(mask.voxels()[i]);
                } else {
                    img.push(0.0);
                    m.push(0);
                }
            }
        }
    }
    PatchPair {
        image: Tensor::new(patch.to_vec(), img).expect("patch extents"),
        mask: LabelMask::new(patch, m).expect("binary crop"),
    }
}

/// Mirrors the pair along every axis flagged in `axes`.
pub fn flip(p: &PatchPair, axes: [bool; 3]) -> PatchPair {
    let e = p.mask.extents();
    let src = |x: usize, y: usize, z: usize| {
        let x = if axes[0] { e[0] - 1 - x } else { x };
        let y = if axes[1] { e[1] - 1 - y } else { y };
        let z = if axes[2] { e[2] - 1 - z } else { z };
        (x * e[1] + y) * e[2] + z
    };
    let n: usize = e.iter().product();
    let mut img = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let i = src(x, y, z);
                img.push(p.image.data()[i]);
                m.push(p.mask.voxels()[i]);
            }
        }
    }
    PatchPair {
        image: Tensor::new(e.to_vec(), img).expect("same extents"),
        mask: LabelMask::new(e, m).expect("binary"),
    }
}

/// Independent flips with probability 1/2 per axis, identical for image
/// and mask.
pub fn augment(p: &PatchPair, rng: &mut Rng) -> PatchPair {
    let axes = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    flip(p, axes)
}
