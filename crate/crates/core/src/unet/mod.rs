//! Compact 3D U-Net with an optional MSCSA skip path.
//!
//! Every conv unit is a 3³ convolution without bias, batch norm and leaky
//! ReLU. Stage `i > 0` starts with a stride-2 convolution, so stage extents
//! halve at each level. The residual backbone wraps the second unit of every
//! encoder stage in an identity shortcut. The decoder upsamples trilinearly,
//! concatenates `[skip, upsampled]` and applies two conv units; a pointwise
//! head produces class logits.

mod checkpoint;
mod predict;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use predict::{gaussian_weights, predict, tile_starts, SlidingWindow};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::mscsa::{self, MscsaConfig, RpeActivation, StageFeatureSet};
use crate::nn::{NetworkParams, ParamInit, Session};
use crate::rng::seeded;
use crate::tensor::{ConvSpec, Real, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Plain,
    Residual,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Backbone::Plain),
            "res" | "residual" => Ok(Backbone::Residual),
            _ => Err(Error::config(format!("unknown backbone {s}"))),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Plain => "plain",
            Backbone::Residual => "res",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of each encoder stage, finest first. `S = channels.len()`.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub backbone: Backbone,
    pub mscsa: Option<MscsaConfig>,
}

impl Default for ModelConfig {
    /// Desk-scale default: four stages of 16, 32, 64, 128 channels.
    fn default() -> Self {
        Self::new(vec![16, 32, 64, 128])
    }
}

impl ModelConfig {
    pub fn new(channels: Vec<usize>) -> Self {
        Self { channels, in_channels: 1, num_classes: 2, backbone: Backbone::Plain, mscsa: None }
    }

    /// Six-stage nnU-Net schedule for 128³ patches.
    pub fn full_scale() -> Self {
        Self::new(vec![32, 64, 128, 256, 320, 320])
    }

    /// Adds MSCSA with default dimensions for this encoder.
    pub fn with_mscsa(mut self) -> Self {
        self.mscsa = Some(MscsaConfig::for_channels(&self.channels));
        self
    }

    pub fn with_backbone(mut self, backbone: Backbone) -> Self {
        self.backbone = backbone;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::config(format!("need at least 2 stages, got {}", self.channels.len())));
        }
        if self.channels.contains(&0) || self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::config("channel and class counts must be positive (at least 2 classes)"));
        }
        if let Some(m) = &self.mscsa {
            m.validate(self.num_stages())?;
        }
        Ok(())
    }

    /// Patch extents must halve cleanly `S - 1` times.
    pub fn validate_extents(&self, extents: &[usize]) -> Result<()> {
        let f = 1usize << (self.num_stages() - 1);
        if extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::config(format!("extents {extents:?} not divisible by {f}")));
        }
        Ok(())
    }

    /// Spatial extents of every stage for an input of `extents`.
    pub fn stage_extents(&self, extents: [usize; 3]) -> Vec<[usize; 3]> {
        (0..self.num_stages()).map(|i| extents.map(|e| e >> i)).collect()
    }

    /// Reads model keys from a key-value file. Recognized keys: `channels`,
    /// `in_channels`, `num_classes`, `backbone`, `mscsa` (`on`/`off`) and the
    /// optional overrides `mscsa.heads`, `mscsa.qk_dim`, `mscsa.v_dim`,
    /// `mscsa.target_stage`, `mscsa.dwconv_kernel`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut cfg = match kv.take_list::<usize>("channels")? {
            Some(c) => Self::new(c),
            None => Self::default(),
        };
        if let Some(v) = kv.take("in_channels")? {
            cfg.in_channels = v;
        }
        if let Some(v) = kv.take("num_classes")? {
            cfg.num_classes = v;
        }
        if let Some(v) = kv.take("backbone")? {
            cfg.backbone = v;
        }
        let on = match kv.take::<String>("mscsa")?.as_deref() {
            None | Some("off") => false,
            Some("on") => true,
            Some(v) => return Err(Error::config(format!("mscsa must be on or off, got {v}"))),
        };
        let keys = ["mscsa.heads", "mscsa.qk_dim", "mscsa.v_dim", "mscsa.target_stage", "mscsa.dwconv_kernel"];
        if on {
            let mut m = MscsaConfig::for_channels(&cfg.channels);
            let mut over = |key: &str, slot: &mut usize| -> Result<()> {
                if let Some(v) = kv.take(key)? {
                    *slot = v;
                }
                Ok(())
            };
            over(keys[0], &mut m.heads)?;
            over(keys[1], &mut m.qk_dim)?;
            over(keys[2], &mut m.v_dim)?;
            over(keys[3], &mut m.target_stage)?;
            over(keys[4], &mut m.dwconv_kernel)?;
            cfg.mscsa = Some(m);
        } else if let Some(k) = keys.iter().find(|k| kv.contains(k)) {
            return Err(Error::config(format!("{k} given but mscsa is off")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`ModelConfig::from_kv`].
    pub fn to_kv_string(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let mut s = format!(
            "channels = {}\nin_channels = {}\nnum_classes = {}\nbackbone = {}\n",
            ch.join(","),
            self.in_channels,
            self.num_classes,
            self.backbone
        );
        match &self.mscsa {
            None => s.push_str("mscsa = off\n"),
            Some(m) => {
                s.push_str(&format!(
                    "mscsa = on\nmscsa.heads = {}\nmscsa.qk_dim = {}\nmscsa.v_dim = {}\nmscsa.target_stage = {}\nmscsa.dwconv_kernel = {}\n",
                    m.heads, m.qk_dim, m.v_dim, m.target_stage, m.dwconv_kernel
                ));
                debug_assert_eq!(m.rpe_activation, RpeActivation::Silu);
            }
        }
        s
    }
}

fn init_unit<T: Real>(init: &mut ParamInit<'_, T>, path: &str, cin: usize, cout: usize) {
    init.kaiming(format!("{path}.weight"), &[cout, cin, KERNEL, KERNEL, KERNEL]);
    init.batch_norm(&format!("{path}.bn"), cout);
}

/// Seeded parameters. U-Net weights are drawn before MSCSA weights, so
/// models that differ only in `mscsa` share identical backbone weights.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    let mut params = NetworkParams::new();
    let mut rng = seeded(seed);
    let mut init = ParamInit { params: &mut params, rng: &mut rng };
    let ch = &cfg.channels;
    let mut cin = cfg.in_channels;
    for (i, &c) in ch.iter().enumerate() {
        init_unit(&mut init, &format!("enc.s{i}.c0"), cin, c);
        init_unit(&mut init, &format!("enc.s{i}.c1"), c, c);
        cin = c;
    }
    for i in (0..ch.len() - 1).rev() {
        init_unit(&mut init, &format!("dec.s{i}.c0"), ch[i] + ch[i + 1], ch[i]);
        init_unit(&mut init, &format!("dec.s{i}.c1"), ch[i], ch[i]);
    }
    init.linear("head", ch[0], cfg.num_classes);
    if let Some(m) = &cfg.mscsa {
        mscsa::init_params(&mut init, m, ch);
    }
    Ok(params)
}

/// Trainable scalar count; depends on the configuration only.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(init_params::<f32>(cfg, 0)?.num_trainable())
}

/// Conv (no bias) -> batch norm -> leaky ReLU.
fn conv_unit<T: Real>(sess: &mut Session<'_, T>, x: Var, path: &str, stride: usize) -> Result<Var> {
    let w = sess.p(&format!("{path}.weight"))?;
    let spec = ConvSpec { stride: [stride; 3], ..ConvSpec::same(KERNEL) };
    let y = sess.graph.conv3d(x, w, None, spec)?;
    let y = sess.bn(y, &format!("{path}.bn"))?;
    sess.graph.leaky_relu(y, LEAKY_SLOPE)
}

fn stage<T: Real>(sess: &mut Session<'_, T>, x: Var, path: &str, stride: usize, backbone: Backbone) -> Result<Var> {
    let y1 = conv_unit(sess, x, &format!("{path}.c0"), stride)?;
    let y2 = conv_unit(sess, y1, &format!("{path}.c1"), 1)?;
    match backbone {
        Backbone::Plain => Ok(y2),
        Backbone::Residual => sess.graph.add(y1, y2),
    }
}

/// Encoder features of every stage for `x: [N, in_channels, H, W, D]`.
pub fn encoder_forward<T: Real>(sess: &mut Session<'_, T>, x: Var, cfg: &ModelConfig) -> Result<StageFeatureSet> {
    let shape = sess.graph.shape(x).to_vec();
    if shape.len() != 5 || shape[1] != cfg.in_channels {
        return Err(Error::shape("encoder_forward", format!("input {shape:?}, expected {} channels", cfg.in_channels)));
    }
    cfg.validate_extents(&shape[2..])?;
    let mut stages = Vec::with_capacity(cfg.num_stages());
    let mut h = x;
    for i in 0..cfg.num_stages() {
        h = stage(sess, h, &format!("enc.s{i}"), if i == 0 { 1 } else { 2 }, cfg.backbone)?;
        stages.push(h);
    }
    StageFeatureSet::new(&sess.graph, stages)
}

/// Class logits `[N, num_classes, H, W, D]`.
pub fn forward<T: Real>(sess: &mut Session<'_, T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut fs = encoder_forward(sess, x, cfg)?;
    if let Some(m) = &cfg.mscsa {
        fs = mscsa::mscsa_skip(sess, &fs, m)?;
    }
    let s = fs.len();
    let mut h = fs.stages[s - 1];
    for i in (0..s - 1).rev() {
        let target = fs.extents(&sess.graph, i);
        let up = sess.graph.resize_trilinear(h, target)?;
        let cat = sess.graph.concat(&[fs.stages[i], up], 1)?;
        let y = conv_unit(sess, cat, &format!("dec.s{i}.c0"), 1)?;
        h = conv_unit(sess, y, &format!("dec.s{i}.c1"), 1)?;
    }
    sess.linear(h, "head")
}
