//! Losses, optimizer, schedule, the training loop and the schemes built on
//! it: Default (Dice + CE), DTK10 (Dice + top-10% CE), Res U-Net (residual
//! backbone), Self-Training (one round of pseudo-labels) and Ensemble
//! (softmax averaging).

mod ensemble;
mod loss;
mod sgd;
mod train;

pub use ensemble::{ensemble_predict, foreground_mask, self_train, SelfTrainOutcome};
pub use loss::{ce_loss, dice_loss, segmentation_loss, topk_ce_loss, topk_count, voxel_ce, LossConfig, LossKind};
pub use sgd::{poly_lr, sgd_step, SgdState};
pub use train::{evaluate_dice, load_cases, split_fold, train, train_fold, write_log, Case, LogRow, TrainResult};

use crate::config::KvConfig;
use crate::data::DEFAULT_FOREGROUND_BIAS;
use crate::error::{Error, Result};
use crate::unet::{Backbone, ModelConfig, SlidingWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Default,
    Dtk10,
    ResUnet,
    SelfTrain,
    Ensemble,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Scheme::Default),
            "dtk10" => Ok(Scheme::Dtk10),
            "resunet" => Ok(Scheme::ResUnet),
            "selftrain" => Ok(Scheme::SelfTrain),
            "ensemble" => Ok(Scheme::Ensemble),
            _ => Err(Error::config(format!("unknown scheme {s}"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Default => "default",
            Scheme::Dtk10 => "dtk10",
            Scheme::ResUnet => "resunet",
            Scheme::SelfTrain => "selftrain",
            Scheme::Ensemble => "ensemble",
        })
    }
}

impl Scheme {
    /// Applies the scheme's loss or backbone choice. Self-training and
    /// ensembling train their members like Default.
    pub fn apply(self, model: &mut ModelConfig, run: &mut TrainConfig) {
        match self {
            Scheme::Dtk10 => run.loss.kind = LossKind::DiceTopK,
            Scheme::ResUnet => model.backbone = Backbone::Residual,
            Scheme::Default | Scheme::SelfTrain | Scheme::Ensemble => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub seed: u64,
    pub patch: [usize; 3],
    pub scheme: Scheme,
    pub loss: LossConfig,
    pub foreground_bias: f64,
    /// Validate every this many epochs (and after the last).
    pub val_interval: usize,
    pub folds: usize,
    /// Sliding-window overlap for validation and prediction.
    pub overlap: f64,
    /// Random axis flips of training patches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.99,
            poly_exponent: 0.9,
            seed: 0,
            patch: [32; 3],
            scheme: Scheme::Default,
            loss: LossConfig::default(),
            foreground_bias: DEFAULT_FOREGROUND_BIAS,
            val_interval: 1,
            folds: 5,
            overlap: 0.5,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_interval == 0 || self.folds == 0 {
            return Err(Error::config("epochs, batch_size, val_interval and folds must be at least 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "lr {} must be positive and momentum {} in [0, 1)",
                self.lr, self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return Err(Error::config("foreground_bias must lie in [0, 1]"));
        }
        self.loss.validate()
    }

    pub fn window(&self) -> SlidingWindow {
        SlidingWindow::new(self.patch, self.overlap)
    }

    /// Reads run keys: `epochs`, `batch_size`, `lr`, `momentum`,
    /// `poly_exponent`, `seed`, `patch` (`h,w,d` or one extent), `scheme`,
    /// `loss`, `topk_fraction`, `dice_eps`, `foreground_bias`,
    /// `val_interval`, `folds`, `overlap`, `augment`. An explicit `loss`
    /// overrides the scheme's loss choice.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.take($key)? {
                    $slot = v;
                }
            };
        }
        field!("epochs", c.epochs);
        field!("batch_size", c.batch_size);
        field!("lr", c.lr);
        field!("momentum", c.momentum);
        field!("poly_exponent", c.poly_exponent);
        field!("seed", c.seed);
        field!("scheme", c.scheme);
        field!("topk_fraction", c.loss.topk_fraction);
        field!("dice_eps", c.loss.dice_eps);
        field!("foreground_bias", c.foreground_bias);
        field!("val_interval", c.val_interval);
        field!("folds", c.folds);
        field!("overlap", c.overlap);
        field!("augment", c.augment);
        if let Some(p) = kv.take_list::<usize>("patch")? {
            c.patch = match p[..] {
                [e] => [e; 3],
                [h, w, d] => [h, w, d],
                _ => return Err(Error::config(format!("patch needs 1 or 3 extents, got {p:?}"))),
            };
        }
        let mut scratch = ModelConfig::default();
        c.scheme.apply(&mut scratch, &mut c);
        field!("loss", c.loss.kind);
        c.validate()?;
        Ok(c)
    }
}

impl TrainConfig {
    /// Inverse of [`TrainConfig::from_kv`].
    pub fn to_kv_string(&self) -> String {
        format!(
            "epochs = {}\nbatch_size = {}\nlr = {}\nmomentum = {}\npoly_exponent = {}\nseed = {}\npatch = {},{},{}\nscheme = {}\nloss = {}\ntopk_fraction = {}\ndice_eps = {}\nforeground_bias = {}\nval_interval = {}\nfolds = {}\noverlap = {}\naugment = {}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.poly_exponent,
            self.seed,
            self.patch[0],
            self.patch[1],
            self.patch[2],
            self.scheme,
            self.loss.kind,
            self.loss.topk_fraction,
            self.loss.dice_eps,
            self.foreground_bias,
            self.val_interval,
            self.folds,
            self.overlap,
            self.augment,
        )
    }
}

/// Model and run settings from one key-value file.
pub fn load_config(kv: &mut KvConfig) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::from_kv(kv)?;
    let run = TrainConfig::from_kv(kv)?;
    let mut scratch = run.clone();
    run.scheme.apply(&mut model, &mut scratch);
    model.validate_extents(&run.patch)?;
    Ok((model, run))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_keys() {
        let mut kv =
            KvConfig::parse("channels = 4,8\nepochs = 3\npatch = 16\nscheme = dtk10\nseed = 9\naugment = false")
                .unwrap();
        let (model, run) = load_config(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(model.channels, vec![4, 8]);
        assert_eq!((run.epochs, run.patch, run.seed, run.augment), (3, [16; 3], 9, false));
        assert_eq!(run.loss.kind, LossKind::DiceTopK);
        assert_eq!(run.momentum, 0.99);
    }

    #[test]
    fn kv_round_trip() {
        let run = TrainConfig { epochs: 7, seed: 3, patch: [16, 8, 8], augment: false, ..Default::default() };
        let model = ModelConfig::new(vec![2, 4]).with_mscsa();
        let text = format!("{}{}", model.to_kv_string(), run.to_kv_string());
        let mut kv = KvConfig::parse(&text).unwrap();
        assert_eq!(load_config(&mut kv).unwrap(), (model, run));
        kv.finish().unwrap();
    }

    #[test]
    fn resunet_scheme_sets_backbone() {
        let mut kv = KvConfig::parse("scheme = resunet").unwrap();
        let (model, run) = load_config(&mut kv).unwrap();
        assert_eq!(model.backbone, Backbone::Residual);
        assert_eq!(run.loss.kind, LossKind::DiceCe);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(load_config(&mut KvConfig::parse("epochs = 0").unwrap()).is_err());
        assert!(load_config(&mut KvConfig::parse("lr = -1").unwrap()).is_err());
        assert!(load_config(&mut KvConfig::parse("patch = 12").unwrap()).is_err());
        assert!(load_config(&mut KvConfig::parse("scheme = magic").unwrap()).is_err());
    }
}
