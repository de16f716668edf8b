//! Tokenizer, tiny transformer (causal decoder or bidirectional encoder) with
//! exact gradients, LoRA adapters, sampling, optimizers and checkpoints.

pub mod checkpoint;
pub mod lora;
pub mod loss;
pub mod optim;
pub mod sample;
pub mod tensor;
pub mod transformer;
pub mod vocab;

pub use lora::{merge_lora, LoraAdapter, LoraConfig};
pub use loss::{mlm_loss_and_grad, mlm_mask, mlm_nll, nll_and_grad, sequence_nll, MlmExample};
pub use sample::{sample, Decoding};
pub use tensor::{GradSet, TensorMap};
pub use transformer::{
    backward_hidden, forward, forward_batch, forward_hidden, init_model, DecodeState, HParams,
    ModelParams, Trainable,
};
pub use vocab::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("vocabulary size {0} leaves no room beyond the 260 reserved tokens")]
    VocabTooSmall(usize),
    #[error("token id {0} is outside a vocabulary of {1}")]
    InvalidTokenId(u32, usize),
    #[error("invalid hyperparameters: {0}")]
    InvalidHParams(String),
    #[error("sequence of {len} tokens exceeds the context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("loss mask selects no target token")]
    EmptyLoss,
    #[error("loss mask has {mask} entries for {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("sequence of {0} tokens is too short")]
    TooShort(usize),
    #[error("adapter does not fit the model: {0}")]
    AdapterMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid decoding settings: {0}")]
    InvalidDecoding(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
