//! Fixtures shared by the criterion benches in `benches/`.

use ffb_core::dataset::StandardSet;
use ffb_core::ffl::{FflParams, FflString};
use ffb_core::models::{LstmConfig, ModelConfig, TransformerConfig};
use ffb_core::training::{DataSource, EvalConfig, TrainConfig};

/// Two layers, width 64, four heads.
pub fn small_transformer(max_len: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        layers: 2,
        d_model: 64,
        heads: 4,
        max_len,
        ..TransformerConfig::default()
    })
}

pub fn small_lstm() -> ModelConfig {
    ModelConfig::Lstm(LstmConfig::default())
}

/// `steps` optimizer steps on FFL(0.8) with evaluation switched off.
pub fn bench_train_config(steps: u64, length: usize) -> TrainConfig {
    TrainConfig {
        steps,
        warmup: 0,
        data: DataSource::ffl(FflParams::ffl_with_length(0.8, length)),
        eval: EvalConfig {
            every: 0,
            in_dist_count: 0,
            sparse_count: 0,
            dense_count: 0,
            ..EvalConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn sparse_set(length: usize, count: usize) -> Vec<FflString> {
    StandardSet::Sparse.corpus(length, count, 2).sequences
}
