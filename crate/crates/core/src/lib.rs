//! Dataset cloning toolkit: structure a siloed clinical corpus, turn it into an
//! instruction dataset, fine-tune LoRA adapters on a tiny transformer under
//! DP-SGD, generate a synthetic clone corpus and measure what it is worth.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: seeded note generator, splitting, rule-based clinical structuring, JSONL I/O
//! - [`instruct`]: instruction templates and instruction/completion pairs
//! - [`model`]: tokenizer, transformer with exact per-example gradients, LoRA, sampling
//! - [`dp`]: clipping, Gaussian noise, Poisson lots, the RDP accountant and `dp_train`
//! - [`evalsuite`]: clone generation, perplexity, MLM adaptation, tagging F1, rMIA

pub mod corpus;
pub mod dp;
pub mod evalsuite;
pub mod instruct;
pub mod jsonl;
pub mod model;
pub mod rng;
