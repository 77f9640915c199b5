//! Shared fixtures for the runtime benchmarks.

use twig_core::{
    attach_twig, init_model, InitStrategy, ModelConfig, PruneConfig, SequenceLayout, TokenId,
    TwigConfig, TwigModel,
};

pub const SEED: u64 = 42;

pub fn bench_config() -> ModelConfig {
    ModelConfig {
        num_layers: 8,
        hidden_dim: 64,
        num_heads: 4,
        ffn_dim: 256,
        vocab_size: 64,
        max_positions: 512,
    }
}

pub fn bench_layout() -> SequenceLayout {
    SequenceLayout::new(48, 8).expect("layout")
}

pub fn bench_twig() -> TwigModel {
    let base = init_model(&bench_config(), SEED).expect("model");
    attach_twig(
        base,
        TwigConfig { shared_depth: 2, twig_depth: 3, init: InitStrategy::LayersKtoKT },
        SEED,
    )
    .expect("twig")
}

pub fn bench_prune(tm: &TwigModel) -> PruneConfig {
    PruneConfig {
        prune_layer: tm.shared_depth(),
        retained: 12,
        final_wipe: Some(6),
        selection_depth: tm.cfg().shallow_depth(),
    }
}

pub fn bench_prompt(tm: &TwigModel) -> Vec<TokenId> {
    twig_core::random_prompt(tm.base().config(), &bench_layout(), SEED)
}
