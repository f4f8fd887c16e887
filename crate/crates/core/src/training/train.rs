use std::path::Path;

use rand::seq::SliceRandom;

use super::{poly_lr, segmentation_loss, sgd_step, SgdState, TrainConfig};
use crate::data::{augment, read_manifest, sample_patch, size_balanced_folds, zscore, CaseRecord, LabelMask, Volume};
use crate::error::{Error, Result};
use crate::eval::dice_score;
use crate::nn::{NetworkParams, Session};
use crate::rng::derived;
use crate::tensor::{NormMode, Tensor};
use crate::unet::{forward, init_params, predict, ModelConfig, SlidingWindow};

/// Stream id of the patch sampling, shuffling and flip draws.
const DATA_STREAM: u64 = 0xDA7A;

#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub final_params: NetworkParams<f32>,
    /// Parameters at the best validation Dice (the final ones without
    /// validation cases).
    pub best_params: NetworkParams<f32>,
    pub best_val_dice: Option<f64>,
    pub log: Vec<LogRow>,
}

pub fn load_cases(rows: &[CaseRecord], base: &Path) -> Result<Vec<Case>> {
    rows.iter()
        .map(|r| {
            let (volume, mask) = r.load(base)?;
            Ok(Case { id: r.id.clone(), volume, mask })
        })
        .collect()
}

/// `(train, validation)` rows for fold `fold` of a size-balanced split.
pub fn split_fold(rows: &[CaseRecord], k: usize, fold: usize) -> Result<(Vec<CaseRecord>, Vec<CaseRecord>)> {
    if fold >= k {
        return Err(Error::config(format!("fold {fold} of {k}")));
    }
    let vols: Vec<usize> = rows.iter().map(|r| r.lesion_volume).collect();
    let folds = size_balanced_folds(&vols, k)?;
    let val: Vec<CaseRecord> = folds[fold].iter().map(|&i| rows[i].clone()).collect();
    let train = rows.iter().filter(|r| !val.iter().any(|v| v.id == r.id)).cloned().collect();
    Ok((train, val))
}

/// Per-case Dice of thresholded sliding-window predictions.
pub fn evaluate_dice(
    params: &NetworkParams<f32>,
    model: &ModelConfig,
    cases: &[Case],
    win: SlidingWindow,
) -> Result<Vec<f64>> {
    cases
        .iter()
        .map(|c| {
            let probs = predict(params, model, &c.volume, win)?;
            dice_score(&super::foreground_mask(&probs)?, &c.mask)
        })
        .collect()
}

/// Trains a freshly initialized model. Each epoch draws one
/// foreground-biased patch per training case in shuffled order, z-scores
/// and (optionally) flips it, and takes one Nesterov step per batch at the
/// poly-decayed rate. Validation Dice is the mean over `val` cases.
pub fn train(run: &TrainConfig, model: &ModelConfig, cases: &[Case], val: &[Case]) -> Result<TrainResult> {
    run.validate()?;
    model.validate_extents(&run.patch)?;
    if cases.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut params = init_params::<f32>(model, run.seed)?;
    let mut state = SgdState::default();
    let mut rng = derived(run.seed, DATA_STREAM);
    let [ph, pw, pd] = run.patch;
    let per = ph * pw * pd;
    let mut log = Vec::with_capacity(run.epochs);
    let mut best: Option<(f64, NetworkParams<f32>)> = None;
    for epoch in 0..run.epochs {
        let lr = poly_lr(run.lr, epoch, run.epochs, run.poly_exponent);
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(run.batch_size) {
            let mut img = Vec::with_capacity(chunk.len() * per);
            let mut tgt = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                let c = &cases[i];
                let mut p = sample_patch(&c.volume, &c.mask, run.patch, run.foreground_bias, &mut rng);
                if run.augment {
                    p = augment(&p, &mut rng);
                }
                let mut x = p.image.into_data();
                zscore(&mut x);
                img.extend(x);
                tgt.extend(p.mask.voxels().iter().map(|&m| m as f32));
            }
            let b = chunk.len();
            let target = Tensor::new(vec![b, ph, pw, pd], tgt)?;
            let (loss, grads) = {
                let mut sess = Session::new(&mut params, NormMode::Train, true);
                let x = sess.graph.constant(Tensor::new(vec![b, 1, ph, pw, pd], img)?);
                let logits = forward(&mut sess, x, model)?;
                let loss = segmentation_loss(&mut sess.graph, logits, &target, &run.loss)?;
                let lv = sess.graph.value(loss).data()[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                sess.graph.backward(loss)?;
                (lv, sess.grads())
            };
            if grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            sgd_step(&mut params, &grads, &mut state, lr, run.momentum)?;
            loss_sum += loss;
            batches += 1;
        }
        let validate = !val.is_empty() && ((epoch + 1) % run.val_interval == 0 || epoch + 1 == run.epochs);
        let val_dice = if validate {
            let d = evaluate_dice(&params, model, val, run.window())?;
            Some(d.iter().sum::<f64>() / d.len() as f64)
        } else {
            None
        };
        if let Some(d) = val_dice {
            if best.as_ref().is_none_or(|(b, _)| d > *b) {
                best = Some((d, params.clone()));
            }
        }
        log.push(LogRow { epoch: epoch + 1, lr, train_loss: loss_sum / batches as f64, val_dice });
    }
    let (best_val_dice, best_params) = match best {
        Some((d, p)) => (Some(d), p),
        None => (None, params.clone()),
    };
    Ok(TrainResult { final_params: params, best_params, best_val_dice, log })
}

/// CSV `epoch,lr,train_loss,val_dice`; epochs without validation leave
/// `val_dice` empty.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "val_dice"])?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_dice.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Convenience: train on every fold except `fold` of a manifest.
pub fn train_fold(run: &TrainConfig, model: &ModelConfig, manifest: &Path, fold: usize) -> Result<TrainResult> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let (tr, va) = split_fold(&rows, run.folds, fold)?;
    train(run, model, &load_cases(&tr, base)?, &load_cases(&va, base)?)
}
