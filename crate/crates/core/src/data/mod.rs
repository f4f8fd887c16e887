//! Volumes, lesion masks, synthetic phantoms, NIfTI-1 I/O, folds and patch
//! sampling.

mod folds;
mod manifest;
pub mod nifti;
mod patch;
mod phantom;

pub use folds::{fold_assignment, size_balanced_folds};
pub use manifest::{read_manifest, write_manifest, CaseRecord};
pub use patch::{augment, flip, sample_patch, PatchPair, DEFAULT_FOREGROUND_BIAS};
pub use phantom::{generate_dataset, generate_phantom, Phantom, PhantomSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lesions below this many voxels form the small-lesion subset.
pub const SMALL_LESION_VOXELS: usize = 1000;

pub type Affine = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine =
    [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

/// A 3D scalar image `[H, W, D]` with millimetre spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Tensor<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Volume {
    pub fn new(voxels: Tensor<f32>) -> Result<Self> {
        if voxels.rank() != 3 {
            return Err(Error::shape("volume", format!("expected 3D voxels, got {:?}", voxels.shape())));
        }
        Ok(Self { voxels, spacing: [1.0; 3], affine: IDENTITY_AFFINE })
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

/// Binary lesion annotation with a cached foreground count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    extents: [usize; 3],
    voxels: Vec<u8>,
    lesion_volume: usize,
}

impl LabelMask {
    pub fn new(extents: [usize; 3], voxels: Vec<u8>) -> Result<Self> {
        if extents.contains(&0) || voxels.len() != extents.iter().product::<usize>() {
            return Err(Error::shape("label_mask", format!("{} voxels for extents {extents:?}", voxels.len())));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::Data("label mask is not binary".into()));
        }
        let lesion_volume = voxels.iter().filter(|&&v| v == 1).count();
        Ok(Self { extents, voxels, lesion_volume })
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Self { extents, voxels: vec![0; extents.iter().product()], lesion_volume: 0 }
    }

    /// Foreground where `probs >= threshold`.
    pub fn threshold(extents: [usize; 3], probs: &[f32], threshold: f32) -> Result<Self> {
        Self::new(extents, probs.iter().map(|&p| u8::from(p >= threshold)).collect())
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn lesion_volume(&self) -> usize {
        self.lesion_volume
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.index(x, y, z)] == 1
    }
}

/// In-place standardization to zero mean and unit variance. Constant
/// inputs are only centred.
pub fn zscore(x: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    for v in x {
        *v = ((*v as f64 - mean) * scale) as f32;
    }
}
