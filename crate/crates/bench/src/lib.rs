//! Shared fixtures for the engine benchmarks.

use revprop_core::{build_model, Batch, DType, Model, ModelConfig, Rng};

/// An isotropic f32 model sized like the throughput comparison in the CLI.
pub fn isotropic(depth: usize, width: usize, seq_len: usize) -> ModelConfig {
    ModelConfig {
        mlp_ratio: 4,
        in_dim: 16,
        num_classes: 10,
        dtype: DType::F32,
        ..ModelConfig::isotropic(depth, width, 4, seq_len)
    }
}

pub fn fixture(cfg: &ModelConfig, batch: usize) -> (Model<f32>, Batch<f32>) {
    let model = build_model::<f32>(cfg).expect("valid benchmark config");
    let batch = Batch::synthetic(cfg, batch, &mut Rng::new(cfg.seed, 1));
    (model, batch)
}
