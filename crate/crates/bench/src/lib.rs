//! Benchmark fixtures.

use mango_core::growth::{mango_init, MangoCores};
use mango_core::transformer::{init_random, ModelConfig, ModelWeights};
use mango_core::{pack, PackedShape, Tensor, TokenBatch};

pub const VOCAB: usize = 56;
pub const SEQ: usize = 32;

pub fn small_config() -> ModelConfig {
    ModelConfig::new(2, 32, 2, VOCAB, SEQ)
}

pub fn target_config() -> ModelConfig {
    ModelConfig::new(4, 64, 4, VOCAB, SEQ)
}

pub fn weights(cfg: &ModelConfig) -> ModelWeights {
    init_random(cfg, 0).expect("valid config")
}

/// Packed small model and rank-`r` cores toward the target shape.
pub fn growth_fixture(r: usize) -> (Tensor, MangoCores) {
    let (c1, c2) = (small_config(), target_config());
    let m1 = pack(&weights(&c1), &c1).expect("shapes match").tensor;
    let cores = mango_init(PackedShape::of(&c1), PackedShape::of(&c2), [r; 4], 1, 1e-3).expect("valid ranks");
    (m1, cores)
}

pub fn batch(batch: usize) -> TokenBatch {
    let ids = (0..batch * SEQ).map(|i| (i * 31 + 7) % VOCAB).collect();
    TokenBatch::new(batch, SEQ, ids).expect("consistent sizes")
}
