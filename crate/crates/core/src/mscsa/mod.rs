//! Multi-stage cross-scale attention (MSCSA) as a replacement for direct
//! U-Net skip connections.
//!
//! Encoder stages are resized to one shared resolution and concatenated on
//! the channel axis ([`assemble_multistage`]), refined by an attention block
//! ([`mscsa_block`]: CSA, Intra-FFN, CSA, FFN, each as a pre-norm residual
//! sublayer, then batch norm), split back per stage, resized to each stage's
//! resolution and fused into the encoder features as a per-voxel affine
//! modulation ([`inject`]).
//!
//! Cross-scale attention (CSA) keeps queries at the original scale while
//! keys and values are projected at three scales with kernel-1 convolutions
//! of stride 1, 2 and 3, so each branch has `floor((n - 1) / s) + 1` tokens
//! per axis. A depthwise-convolution shortcut from the scale-1 values acts as
//! a relational positional encoding.

mod assemble;
mod attention;
mod block;
mod ffn;
mod inject;

pub use assemble::{assemble_multistage, resize_to};
pub use attention::{attention_weights, cross_scale_attention, csa, full_attention, msp_project, rpe, MspOutput};
pub use block::mscsa_block;
pub use ffn::{ffn, intra_ffn};
pub use inject::inject;

use crate::error::{Error, Result};
use crate::nn::{ParamInit, Session};
use crate::tensor::{conv_output_extent, Graph, Real, Var};

/// Key/value projection strides.
pub const MSP_SCALES: [usize; 3] = [1, 2, 3];
/// Hidden width multiplier of every FFN.
pub const FFN_EXPANSION: usize = 3;
pub const DEFAULT_HEADS: usize = 4;
pub const PARAM_ROOT: &str = "mscsa";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RpeActivation {
    Silu,
    /// Skips the activation; used to probe the shortcut in isolation.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscsaConfig {
    /// Stage whose spatial extent is the shared assembly resolution.
    pub target_stage: usize,
    pub heads: usize,
    /// Query/key width (`c_q == c_k`).
    pub qk_dim: usize,
    pub v_dim: usize,
    /// Depthwise kernel of the positional-encoding shortcut (odd).
    pub dwconv_kernel: usize,
    pub rpe_activation: RpeActivation,
}

impl MscsaConfig {
    /// Defaults for an encoder with the given stage widths: 4 heads, all
    /// attention widths equal to the total width rounded down to a multiple
    /// of the head count, assembly at the 1/8-resolution stage (or the
    /// deepest stage of shallower encoders).
    pub fn for_channels(channels: &[usize]) -> Self {
        let total: usize = channels.iter().sum();
        let heads = DEFAULT_HEADS;
        let dim = (total / heads * heads).max(heads);
        Self {
            target_stage: default_target_stage(channels.len()),
            heads,
            qk_dim: dim,
            v_dim: dim,
            dwconv_kernel: 3,
            rpe_activation: RpeActivation::Silu,
        }
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if self.heads == 0 || !self.qk_dim.is_multiple_of(self.heads) || !self.v_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "attention widths q/k {} and v {} must be positive multiples of {} heads",
                self.qk_dim, self.v_dim, self.heads
            )));
        }
        if self.qk_dim == 0 || self.v_dim == 0 {
            return Err(Error::config("attention widths must be positive"));
        }
        if self.target_stage >= num_stages {
            return Err(Error::config(format!("target stage {} of {num_stages} stages", self.target_stage)));
        }
        if self.dwconv_kernel.is_multiple_of(2) {
            return Err(Error::config(format!("depthwise kernel {} must be odd", self.dwconv_kernel)));
        }
        Ok(())
    }
}

/// Stage at 1/8 of the input resolution, clamped to the deepest stage.
pub fn default_target_stage(num_stages: usize) -> usize {
    3.min(num_stages.saturating_sub(1))
}

/// Branch extents `(h_i, w_i, d_i)` for the three projection scales.
pub fn msp_scales(h: usize, w: usize, d: usize) -> [[usize; 3]; 3] {
    MSP_SCALES.map(|s| [h, w, d].map(|n| conv_output_extent(n, 1, s, 0).expect("extent >= 1")))
}

/// Key/value token count `sum_i h_i w_i d_i`.
pub fn msp_token_count(h: usize, w: usize, d: usize) -> usize {
    msp_scales(h, w, d).iter().map(|e| e.iter().product::<usize>()).sum()
}

/// Encoder feature maps ordered from finest to coarsest.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatureSet {
    pub stages: Vec<Var>,
}

impl StageFeatureSet {
    /// Validates shared batch size, rank and at least two stages.
    pub fn new<T: Real>(g: &Graph<T>, stages: Vec<Var>) -> Result<Self> {
        if stages.len() < 2 {
            return Err(Error::shape("stage_features", format!("{} stages, need at least 2", stages.len())));
        }
        let n = g.shape(stages[0])[0];
        for &s in &stages {
            let sh = g.shape(s);
            if sh.len() != 5 || sh[0] != n {
                return Err(Error::shape("stage_features", format!("stage shape {sh:?} with batch {n}")));
            }
        }
        for w in stages.windows(2) {
            let (a, b) = (g.shape(w[0]), g.shape(w[1]));
            if (2..5).any(|i| b[i] > a[i]) {
                return Err(Error::shape("stage_features", format!("extents grow from {a:?} to {b:?}")));
            }
        }
        Ok(Self { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn channels<T: Real>(&self, g: &Graph<T>) -> Vec<usize> {
        self.stages.iter().map(|&s| g.shape(s)[1]).collect()
    }

    pub fn extents<T: Real>(&self, g: &Graph<T>, stage: usize) -> [usize; 3] {
        let s = g.shape(self.stages[stage]);
        [s[2], s[3], s[4]]
    }
}

fn block_path() -> String {
    format!("{PARAM_ROOT}.block")
}

fn inject_path() -> String {
    format!("{PARAM_ROOT}.inject")
}

fn init_csa<T: Real>(init: &mut ParamInit<'_, T>, path: &str, total: usize, cfg: &MscsaConfig) {
    init.kaiming(format!("{path}.q.weight"), &[cfg.qk_dim, total, 1, 1, 1]);
    init.zeros(format!("{path}.q.bias"), &[cfg.qk_dim]);
    for i in 1..=MSP_SCALES.len() {
        init.kaiming(format!("{path}.k{i}.weight"), &[cfg.qk_dim, total, 1, 1, 1]);
        init.zeros(format!("{path}.k{i}.bias"), &[cfg.qk_dim]);
        init.kaiming(format!("{path}.v{i}.weight"), &[cfg.v_dim, total, 1, 1, 1]);
        init.zeros(format!("{path}.v{i}.bias"), &[cfg.v_dim]);
    }
    let k = cfg.dwconv_kernel;
    init.kaiming(format!("{path}.dw.weight"), &[cfg.v_dim, 1, k, k, k]);
    init.zeros(format!("{path}.dw.bias"), &[cfg.v_dim]);
    init.linear(&format!("{path}.out"), cfg.v_dim, total);
}

fn init_ffn<T: Real>(init: &mut ParamInit<'_, T>, path: &str, c: usize) {
    init.linear(&format!("{path}.fc1"), c, FFN_EXPANSION * c);
    init.linear(&format!("{path}.fc2"), FFN_EXPANSION * c, c);
}

/// Adds all MSCSA parameters for an encoder with `channels` per stage.
/// Injection projections start at zero, so the module is an identity on the
/// skip features at initialization.
pub fn init_params<T: Real>(init: &mut ParamInit<'_, T>, cfg: &MscsaConfig, channels: &[usize]) {
    let total: usize = channels.iter().sum();
    let b = block_path();
    for i in 1..=4 {
        init.batch_norm(&format!("{b}.norm{i}"), total);
    }
    init.batch_norm(&format!("{b}.norm_out"), total);
    init_csa(init, &format!("{b}.csa1"), total, cfg);
    init_csa(init, &format!("{b}.csa2"), total, cfg);
    for (i, &c) in channels.iter().enumerate() {
        init_ffn(init, &format!("{b}.intra.s{i}"), c);
    }
    init_ffn(init, &format!("{b}.ffn"), total);
    let inj = inject_path();
    for (i, &c) in channels.iter().enumerate() {
        init.linear_zero(&format!("{inj}.s{i}.gamma"), c, c);
        init.linear_zero(&format!("{inj}.s{i}.beta"), c, c);
    }
}

/// Full skip-path refinement: assemble, attend, inject.
pub fn mscsa_skip<T: Real>(
    sess: &mut Session<'_, T>,
    fs: &StageFeatureSet,
    cfg: &MscsaConfig,
) -> Result<StageFeatureSet> {
    cfg.validate(fs.len())?;
    let channels = fs.channels(&sess.graph);
    let x = assemble_multistage(&mut sess.graph, fs, cfg.target_stage)?;
    let y = mscsa_block(sess, x, cfg, &channels, &block_path())?;
    inject(sess, fs, y, &inject_path())
}
