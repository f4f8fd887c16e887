use std::path::Path;

use serde::Serialize;

use super::{dice_score, f1_from_counts, lesion_f1};
use crate::data::nifti::read_mask;
use crate::data::CaseRecord;
use crate::error::{Error, Result};

/// File name of the predicted mask for case `id`.
pub fn prediction_file(id: &str) -> String {
    format!("{id}_pred.nii")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    pub lesion_volume: usize,
    pub dice: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

/// Mean case Dice and pooled lesion counts over a subset of cases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub subset: String,
    pub n_cases: usize,
    /// `None` for an empty subset.
    pub mean_dice: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

impl AggregateRow {
    pub fn over<'a>(subset: &str, rows: impl Iterator<Item = &'a CaseMetrics>) -> Self {
        let (mut n, mut dice, mut tp, mut fp, mut fn_) = (0, 0.0, 0, 0, 0);
        for r in rows {
            n += 1;
            dice += r.dice;
            tp += r.tp;
            fp += r.fp;
            fn_ += r.fn_;
        }
        Self {
            subset: subset.to_string(),
            n_cases: n,
            mean_dice: (n > 0).then(|| dice / n as f64),
            tp,
            fp,
            fn_,
            f1: f1_from_counts(tp, fp, fn_),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Manifest order.
    pub cases: Vec<CaseMetrics>,
    pub entire: AggregateRow,
    /// Cases with `lesion_volume < threshold`.
    pub small: AggregateRow,
    pub threshold: usize,
}

/// Scores `{pred_dir}/{id}_pred.nii` against every manifest case. All
/// missing predictions are listed in one error.
pub fn report(cases: &[CaseRecord], base: &Path, pred_dir: &Path, threshold: usize) -> Result<MetricsReport> {
    let missing: Vec<&str> =
        cases.iter().filter(|c| !pred_dir.join(prediction_file(&c.id)).is_file()).map(|c| c.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing predictions for: {}", missing.join(", "))));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let gt = read_mask(&base.join(&c.mask_path))?;
        let pred = read_mask(&pred_dir.join(prediction_file(&c.id)))?;
        let f = lesion_f1(&pred, &gt)?;
        rows.push(CaseMetrics {
            id: c.id.clone(),
            lesion_volume: gt.lesion_volume(),
            dice: dice_score(&pred, &gt)?,
            tp: f.tp,
            fp: f.fp,
            fn_: f.fn_,
            f1: f.f1,
        });
    }
    let entire = AggregateRow::over("entire", rows.iter());
    let small = AggregateRow::over("small", rows.iter().filter(|r| r.lesion_volume < threshold));
    Ok(MetricsReport { cases: rows, entire, small, threshold })
}

/// Writes `metrics.csv`, `summary.csv` and `dice_vs_volume.csv` to `dir`.
pub fn write_report(dir: &Path, r: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for c in &r.cases {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.serialize(&r.entire)?;
    w.serialize(&r.small)?;
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("dice_vs_volume.csv"))?;
    w.write_record(["lesion_volume", "dice"])?;
    for c in &r.cases {
        w.write_record([c.lesion_volume.to_string(), c.dice.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))
}
