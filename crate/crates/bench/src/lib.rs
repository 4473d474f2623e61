//! Fixtures shared by the benchmarks.

use dmao_core::harness::{SyntheticTask, TrainConfig, Utterance};
use dmao_core::tensor::{Init, Tensor};

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::alloc(shape, Init::Normal { mean: 0.0, std: 1.0, seed }).expect("valid shape")
}

/// One utterance from the default synthetic task.
pub fn desk_utterance(seed: u64) -> Utterance<f32> {
    let cfg = TrainConfig::default();
    SyntheticTask::new(&cfg.data, cfg.model.feature_dim).and_then(|t| t.utterance(seed)).expect("default task")
}
