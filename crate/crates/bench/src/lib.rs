//! Shared fixtures for the benchmarks.

use mscsa_core::mscsa::{init_params, MscsaConfig};
use mscsa_core::nn::{NetworkParams, ParamInit};
use mscsa_core::rng::seeded;
use mscsa_core::Tensor;

/// Deterministic input in `[-1, 1]`.
pub fn input(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 2001) as f32 / 1000.0 - 1.0)
}

/// MSCSA parameters for the given stage widths.
pub fn mscsa_params(channels: &[usize]) -> (MscsaConfig, NetworkParams<f32>) {
    let cfg = MscsaConfig::for_channels(channels);
    let mut params = NetworkParams::new();
    init_params(&mut ParamInit { params: &mut params, rng: &mut seeded(0) }, &cfg, channels);
    (cfg, params)
}
