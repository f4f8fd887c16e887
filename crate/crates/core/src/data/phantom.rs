use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::manifest::{write_manifest, CaseRecord};
use super::nifti::{write_mask, write_volume};
use super::{LabelMask, Volume};
use crate::error::Result;
use crate::rng::{derived, seeded};
use crate::tensor::{interp_table, Tensor};

/// Attempts at placing one lesion before it is skipped.
const PLACEMENT_RETRIES: usize = 16;
/// Spacing, in voxels, of the coarse grid behind the smooth background.
const NOISE_GRID: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    /// Inclusive range of lesion counts.
    pub lesions: (usize, usize),
    /// Inclusive range of per-axis ellipsoid radii, in voxels.
    pub radius: (f64, f64),
    /// Intensity drop inside lesions.
    pub contrast: f32,
    /// Standard deviation of the smooth background variation.
    pub noise_scale: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { extents: [32; 3], lesions: (1, 3), radius: (1.5, 6.0), contrast: 0.8, noise_scale: 0.25, seed: 0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = self.extents.contains(&0)
            || self.lesions.0 > self.lesions.1
            || self.radius.0.is_nan()
            || self.radius.0 < 1.0
            || self.radius.1.is_nan()
            || self.radius.0 > self.radius.1
            || !self.contrast.is_finite()
            || self.noise_scale.is_nan()
            || self.noise_scale < 0.0;
        if bad {
            return Err(crate::Error::Config(format!("invalid phantom spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: LabelMask,
    /// Lesions that could not be placed.
    pub warnings: Vec<String>,
}

/// Low-frequency background: Gaussian values on a coarse grid, trilinearly
/// interpolated to full resolution.
fn smooth_background(ext: [usize; 3], scale: f32, rng: &mut crate::rng::Rng) -> Vec<f32> {
    let coarse: [usize; 3] = ext.map(|e| e.div_ceil(NOISE_GRID) + 1);
    let grid: Vec<f64> = (0..coarse.iter().product::<usize>()).map(|_| StandardNormal.sample(rng)).collect();
    let tables: Vec<_> = (0..3).map(|a| interp_table(coarse[a], ext[a])).collect();
    let g = |i: usize, j: usize, k: usize| grid[(i * coarse[1] + j) * coarse[2] + k];
    let mut out = Vec::with_capacity(ext.iter().product());
    for &(x0, x1, fx) in &tables[0] {
        for &(y0, y1, fy) in &tables[1] {
            for &(z0, z1, fz) in &tables[2] {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let v = lerp(
                    lerp(lerp(g(x0, y0, z0), g(x0, y0, z1), fz), lerp(g(x0, y1, z0), g(x0, y1, z1), fz), fy),
                    lerp(lerp(g(x1, y0, z0), g(x1, y0, z1), fz), lerp(g(x1, y1, z0), g(x1, y1, z1), fz), fy),
                    fx,
                );
                out.push(1.0 + scale * v as f32);
            }
        }
    }
    out
}

/// Synthetic T1-like volume with hypointense ellipsoidal lesions. Each
/// lesion has an integer centre and per-axis radii drawn from the spec;
/// it must lie fully inside the volume or is redrawn, and skipped with a
/// warning after repeated failure. The mask is the union of all ellipsoid
/// interiors `sum((p - c) / r)^2 <= 1`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let ext = spec.extents;
    let mut voxels = smooth_background(ext, spec.noise_scale, &mut rng);
    let mut mask = vec![0u8; voxels.len()];
    let count = rng.random_range(spec.lesions.0..=spec.lesions.1);
    let mut warnings = Vec::new();
    for lesion in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.radius.0..=spec.radius.1));
            let reach = r.map(|r| r.floor() as usize);
            if (0..3).any(|a| 2 * reach[a] + 1 > ext[a]) {
                continue;
            }
            let c: [usize; 3] = std::array::from_fn(|a| rng.random_range(reach[a]..=ext[a] - 1 - reach[a]));
            for x in c[0] - reach[0]..=c[0] + reach[0] {
                for y in c[1] - reach[1]..=c[1] + reach[1] {
                    for z in c[2] - reach[2]..=c[2] + reach[2] {
                        let d = [x as f64 - c[0] as f64, y as f64 - c[1] as f64, z as f64 - c[2] as f64];
                        if (0..3).map(|a| (d[a] / r[a]).powi(2)).sum::<f64>() <= 1.0 {
                            let i = (x * ext[1] + y) * ext[2] + z;
                            if mask[i] == 0 {
                                mask[i] = 1;
                                voxels[i] -= spec.contrast;
                            }
                        }
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            warnings.push(format!("lesion {lesion} skipped: does not fit in {ext:?}"));
        }
    }
    Ok(Phantom { volume: Volume::new(Tensor::new(ext.to_vec(), voxels)?)?, mask: LabelMask::new(ext, mask)?, warnings })
}

/// Writes `n` phantoms (`case_XXX_img.nii`, `case_XXX_mask.nii`) and a
/// `manifest.csv` into `dir`. Case `i` uses an independent stream of
/// `spec.seed`. Returns the manifest rows and any placement warnings.
pub fn generate_dataset(dir: &Path, n: usize, spec: &PhantomSpec) -> Result<(Vec<CaseRecord>, Vec<String>)> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for i in 0..n {
        let case_seed = derived(spec.seed, i as u64 + 1).random::<u64>();
        let ph = generate_phantom(&PhantomSpec { seed: case_seed, ..spec.clone() })?;
        let id = format!("case_{i:03}");
        let row = CaseRecord {
            volume_path: format!("{id}_img.nii").into(),
            mask_path: format!("{id}_mask.nii").into(),
            lesion_volume: ph.mask.lesion_volume(),
            id,
        };
        write_volume(&dir.join(&row.volume_path), &ph.volume)?;
        write_mask(&dir.join(&row.mask_path), &ph.mask, ph.volume.spacing, &ph.volume.affine)?;
        warnings.extend(ph.warnings.into_iter().map(|w| format!("{}: {w}", row.id)));
        rows.push(row);
    }
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    Ok((rows, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_lesions_gives_empty_mask() {
        let p = generate_phantom(&PhantomSpec { lesions: (0, 0), ..Default::default() }).unwrap();
        assert_eq!(p.mask.lesion_volume(), 0);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn sphere_volume_matches_enumeration() {
        let spec = PhantomSpec { extents: [12, 12, 12], lesions: (1, 1), radius: (2.0, 2.0), ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        let mut want = 0;
        for x in -2i32..=2 {
            for y in -2i32..=2 {
                for z in -2i32..=2 {
                    if (x * x + y * y + z * z) as f64 / 4.0 <= 1.0 {
                        want += 1;
                    }
                }
            }
        }
        assert_eq!(want, 33);
        assert_eq!(p.mask.lesion_volume(), want);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec { extents: [16, 16, 16], seed: 7, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.mask, b.mask);
        let c = generate_phantom(&PhantomSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn lesions_are_hypointense() {
        let spec = PhantomSpec { extents: [16, 16, 16], lesions: (2, 2), noise_scale: 0.0, ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        for (v, &m) in p.volume.voxels.data().iter().zip(p.mask.voxels()) {
            let want = if m == 1 { 1.0 - spec.contrast } else { 1.0 };
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_lesions_are_skipped_with_warning() {
        let spec = PhantomSpec { extents: [4, 4, 4], lesions: (2, 2), radius: (3.0, 3.0), ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.mask.lesion_volume(), 0);
        assert_eq!(p.warnings.len(), 2);
    }
}
