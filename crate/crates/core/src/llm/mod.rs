//! Frozen decoder over the venue vocabulary, conditioned on the global
//! signal through a small projection injected mid-stack.

mod adapter;
mod lm;

pub use adapter::{
    adapter_loss_on, inject_forward, logits_on, plain_forward, predict_next, rank_top_k,
    train_adapters, AdapterConfig, AdapterTrainConfig, Adapters, CachedWindows, InjectionConfig,
    ProjectionKind,
};
pub use lm::{pretrain_toy_lm, token_windows, FrozenLM, LmConfig, PretrainConfig, TokenBatch};
