//! Learned structured pruning for small decoder-only transformers.
//!
//! The crate trains hard-concrete gates over attention heads, FFN intermediate
//! channels, and the shared hidden dimensions of a frozen LLaMA-style
//! transformer, jointly with low-rank adapters, under a Lagrangian constraint
//! that drives the remaining-size ratio to a target. Learned binary masks are
//! then excised into a physically smaller dense model that is verified
//! equivalent to the masked one, and benchmarked against a one-shot uniform
//! magnitude-pruning baseline.
//!
//! Module map:
//! - [`tensor`]: define-by-run reverse-mode autodiff and the AdamW optimizer
//! - [`gate`]: hard-concrete gate distribution (stochastic / deterministic / binary)
//! - [`model`]: the gated transformer with frozen base weights and LoRA adapters
//! - [`sparsity`]: remaining-size accounting, Lagrangian penalty, cubic schedule
//! - [`data`]: byte-level tokenizer, prompt rendering, synthetic corpora, batching
//! - [`train`]: the phase trainer (warmup / ramp / hold / post-finetune)
//! - [`excise`]: structural removal of gated-off units and LoRA merging
//! - [`eval`]: perplexity, multiple-choice scoring, and the magnitude baseline
//! - [`checkpoint`]: self-describing model container files

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod excise;
pub mod gate;
pub mod model;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
