//! Decoder-only character language model with low-rank adapters.
//!
//! Pre-norm transformer blocks (causal multi-head attention, GELU MLP),
//! learned token and position embeddings, and an untied output head. All
//! gradients are derived by hand; see [`forward`] for the forward/backward
//! pair and [`generate`] for cached incremental decoding.

mod forward;
mod generate;
mod kernels;
mod lora;
mod params;
mod tokenizer;

pub use forward::{backward, forward, forward_logits, forward_logprobs, ForwardCache, Sequence};
pub use generate::{generate, generate_constrained, DecodeMode, GenerationConfig};
pub use lora::{apply_adapter, merge_adapter, LoraAdapter, LoraPair};
pub use params::{Block, LayerNorm, Linear, ModelParams, ParamSet};
pub use tokenizer::{Tokenizer, BOS, EOS, INSTRUCTION, PAD, SEP, SPECIAL_TOKENS};

use alloc::string::String;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_length: usize,
}

impl ModelConfig {
    /// Desk-scale default with the given vocabulary.
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context_length: 512,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size == 0 || self.n_layers == 0 || self.d_model == 0 {
            return Err(LmError::Config("vocab_size, n_layers and d_model must be > 0".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LmError::Config("d_model must be divisible by n_heads".into()));
        }
        if self.context_length < 2 {
            return Err(LmError::Config("context_length must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label of {label} tokens cannot fit a context of {context}")]
    LabelTooLong { label: usize, context: usize },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(u32),
}
