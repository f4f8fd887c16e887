//! Segmentation metrics and report generation.
//!
//! Lesion-wise F1 works on 26-connected components with any-overlap
//! matching: a ground-truth lesion is detected (TP) when at least one
//! predicted voxel overlaps it, every predicted component touching no
//! ground-truth lesion is a false positive, and undetected lesions are
//! false negatives. Empty-versus-empty cases score 1 for both Dice and F1.

mod report;

pub use report::{prediction_file, report, write_report, AggregateRow, CaseMetrics, MetricsReport};

use crate::data::LabelMask;
use crate::error::{Error, Result};

fn check_extents(op: &'static str, a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.extents(), b.extents())));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`, 1 when both masks are empty.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_extents("dice_score", pred, gt)?;
    let inter = pred.voxels().iter().zip(gt.voxels()).filter(|(&p, &g)| p == 1 && g == 1).count();
    let denom = pred.lesion_volume() + gt.lesion_volume();
    Ok(if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 })
}

/// Component labels (0 = background, `1..=count` in order of each
/// component's first voxel in raster order) and the component count.
pub fn connected_components(mask: &LabelMask) -> (Vec<u32>, usize) {
    let e = mask.extents();
    let mut labels = vec![0u32; mask.voxels().len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if mask.voxels()[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = (i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]);
            for nx in x.saturating_sub(1)..=(x + 1).min(e[0] - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(e[1] - 1) {
                    for nz in z.saturating_sub(1)..=(z + 1).min(e[2] - 1) {
                        let j = (nx * e[1] + ny) * e[2] + nz;
                        if mask.voxels()[j] == 1 && labels[j] == 0 {
                            labels[j] = count;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionF1 {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f1: f64,
}

/// `2tp / (2tp + fp + fn)`, 1 when nothing was there to find or predict.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        1.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

pub fn lesion_f1(pred: &LabelMask, gt: &LabelMask) -> Result<LesionF1> {
    check_extents("lesion_f1", pred, gt)?;
    let (pl, np) = connected_components(pred);
    let (gl, ng) = connected_components(gt);
    let mut gt_hit = vec![false; ng + 1];
    let mut pred_hit = vec![false; np + 1];
    for (&p, &g) in pl.iter().zip(&gl) {
        if p != 0 && g != 0 {
            gt_hit[g as usize] = true;
            pred_hit[p as usize] = true;
        }
    }
    let tp = gt_hit[1..].iter().filter(|&&h| h).count();
    let fp = pred_hit[1..].iter().filter(|&&h| !h).count();
    let fn_ = ng - tp;
    Ok(LesionF1 { tp, fp, fn_, f1: f1_from_counts(tp, fp, fn_) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(e: [usize; 3], on: &[[usize; 3]]) -> LabelMask {
        let mut v = vec![0u8; e.iter().product()];
        for p in on {
            v[(p[0] * e[1] + p[1]) * e[2] + p[2]] = 1;
        }
        LabelMask::new(e, v).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask([2, 2, 2], &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let b = mask([2, 2, 2], &[[0, 0, 0], [0, 0, 1], [1, 1, 0], [1, 1, 1]]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let c = mask([2, 2, 2], &[[1, 0, 0]]);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        let empty = LabelMask::empty([2, 2, 2]);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert!(dice_score(&a, &LabelMask::empty([2, 2, 1])).is_err());
    }

    #[test]
    fn corner_contact_is_one_component() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m).1, 1);
        let m = mask([3, 3, 3], &[[0, 0, 0], [2, 2, 2]]);
        let (labels, n) = connected_components(&m);
        assert_eq!(n, 2);
        assert_eq!(labels[0], 1);
        assert_eq!(labels[26], 2);
    }

    #[test]
    fn f1_examples() {
        let gt = mask([5, 1, 5], &[[0, 0, 0], [2, 0, 2], [4, 0, 4]]);
        assert_eq!(lesion_f1(&gt, &gt).unwrap(), LesionF1 { tp: 3, fp: 0, fn_: 0, f1: 1.0 });
        let two = mask([5, 1, 5], &[[0, 0, 0], [4, 0, 4]]);
        let empty = LabelMask::empty([5, 1, 5]);
        assert_eq!(lesion_f1(&empty, &two).unwrap(), LesionF1 { tp: 0, fp: 0, fn_: 2, f1: 0.0 });
        // A bar along z touching both lesions.
        let bar: Vec<[usize; 3]> = (0..5).map(|z| [0, 0, z]).chain((0..5).map(|x| [x, 0, 4])).collect();
        let blob = mask([5, 1, 5], &bar);
        assert_eq!(connected_components(&blob).1, 1);
        assert_eq!(lesion_f1(&blob, &two).unwrap(), LesionF1 { tp: 2, fp: 0, fn_: 0, f1: 1.0 });
        assert_eq!(lesion_f1(&empty, &empty).unwrap().f1, 1.0);
        let stray = mask([5, 1, 5], &[[0, 0, 0], [2, 0, 2]]);
        assert_eq!(lesion_f1(&stray, &two).unwrap(), LesionF1 { tp: 1, fp: 1, fn_: 1, f1: 0.5 });
    }
}
