use super::{train, Case, TrainConfig, TrainResult};
use crate::data::{LabelMask, Volume};
use crate::error::{Error, Result};
use crate::nn::NetworkParams;
use crate::tensor::Tensor;
use crate::unet::{predict, ModelConfig, SlidingWindow};

/// Pseudo-label and prediction threshold on the foreground probability.
pub const FOREGROUND_THRESHOLD: f32 = 0.5;

/// Binary mask from class probabilities `[C, H, W, D]`: foreground where
/// the background probability is below one half.
pub fn foreground_mask(probs: &Tensor<f32>) -> Result<LabelMask> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(Error::shape("foreground_mask", format!("expected [C, H, W, D], got {s:?}")));
    }
    let n = s[1] * s[2] * s[3];
    let fg: Vec<f32> = probs.data()[..n].iter().map(|&b| 1.0 - b).collect();
    // Strictly above the threshold: a 50/50 voxel stays background.
    LabelMask::new([s[1], s[2], s[3]], fg.iter().map(|&p| u8::from(p > FOREGROUND_THRESHOLD)).collect())
}

/// Mean of the members' sliding-window softmax maps, accumulated in 64-bit.
pub fn ensemble_predict(
    members: &[(ModelConfig, NetworkParams<f32>)],
    volume: &Volume,
    win: SlidingWindow,
) -> Result<Tensor<f32>> {
    let first = members.first().ok_or_else(|| Error::config("ensemble needs at least one model"))?;
    if let Some((m, _)) = members.iter().find(|(m, _)| m.num_classes != first.0.num_classes) {
        return Err(Error::config(format!("class counts differ: {} vs {}", first.0.num_classes, m.num_classes)));
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = Vec::new();
    for (cfg, params) in members {
        let p = predict(params, cfg, volume, win)?;
        if acc.is_empty() {
            acc = vec![0.0; p.numel()];
            shape = p.shape().to_vec();
        }
        acc.iter_mut().zip(p.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let n = members.len() as f64;
    Tensor::new(shape, acc.into_iter().map(|a| (a / n) as f32).collect())
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub result: TrainResult,
    /// Unlabeled cases with their thresholded pseudo-masks.
    pub pseudo: Vec<Case>,
}

/// One self-training round: pseudo-label `unlabeled` with the ensemble of
/// `bases`, then train a fresh model on `labeled` followed by the
/// pseudo-labeled cases. Without unlabeled cases this is plain training.
pub fn self_train(
    bases: &[(ModelConfig, NetworkParams<f32>)],
    unlabeled: &[(String, Volume)],
    run: &TrainConfig,
    model: &ModelConfig,
    labeled: &[Case],
    val: &[Case],
) -> Result<SelfTrainOutcome> {
    if bases.is_empty() {
        return Err(Error::config("self-training needs at least one base model"));
    }
    let mut pseudo = Vec::with_capacity(unlabeled.len());
    for (id, volume) in unlabeled {
        let probs = ensemble_predict(bases, volume, run.window())?;
        pseudo.push(Case { id: id.clone(), volume: volume.clone(), mask: foreground_mask(&probs)? });
    }
    let merged: Vec<Case> = labeled.iter().cloned().chain(pseudo.iter().cloned()).collect();
    Ok(SelfTrainOutcome { result: train(run, model, &merged, val)?, pseudo })
}
