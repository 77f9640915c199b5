//! Deterministic decoder-only transformer runtime built for studying
//! inference acceleration at desk scale: a twig block (a few extra layers
//! with their own head) drafts tokens and guides visual-token pruning, and a
//! self-speculative decoding loop verifies drafts against the pruned deep
//! model with exact output equivalence.
//!
//! Everything is f64 and seeded: identical configurations and seeds
//! reproduce weights, generations, traces, and training curves bit-for-bit.

pub mod engine;
pub mod error;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod ssd;
pub mod tensor;
pub mod training;
pub mod twig;

pub use engine::{
    decode_step, fastv_generate, fastv_prefill, greedy_generate, greedy_generate_full, prefill,
    random_prompt, FastvOutput, PrunedState,
};
pub use error::{Error, Result};
pub use kv::{KvCache, LayerKv};
pub use metrics::{
    bench_decode_scaling, flops_layer, linear_fit, rel_spd, tok_ar, CostModel, DecodePoint,
    TimingReport, TimingSample,
};
pub use model::{
    embed, f64_checksum, head_logits, init_model, layer_forward, AttentionMap, Latents,
    LayerWeights, Logits, Model, ModelConfig, NormParams, SequenceLayout, TokenId,
};
pub use pruning::{
    aggregate_attention, avg_retained, avg_retained_finalwipe, layer_occupancy, prune_sequence,
    solve_r, top_r_select, PruneConfig, PrunePlan,
};
pub use ssd::{
    ssd_generate, target_greedy_generate, ttp_prefill, GenerationTrace, IterationRecord,
    SsdConfig, SsdOutput, SsdSession, VerifyOutcome,
};
pub use tensor::{FlopCount, Mat};
pub use training::{
    ar_loss, backward, copy_task_dataset, lr_at, train_twig, TrainConfig, TrainExample,
    TwigGradients,
};
pub use twig::{attach_twig, shallow_forward, InitStrategy, TwigConfig, TwigModel};
