//! Byte-level tokenizer and a from-scratch tiny causal decoder.
//!
//! The model is a pre-norm transformer over a 260-token vocabulary (256 byte
//! values plus PAD/BOS/EOS/SEP). All math is plain `f64` on the CPU with
//! hand-written forward and backward passes, which keeps training exactly
//! reproducible under a fixed seed and lets the gradient checker compare
//! against central finite differences. Checkpoints store tensors as
//! little-endian `f32` behind a one-line JSON header.

mod checkpoint;
mod decode;
mod model;
mod tokenizer;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decode::{generate, sample_with_logprob, token_logprob, IncrementalDecoder};
pub use model::{Adam, ForwardCache, ForwardOutput, Gradients, ModelConfig, PolicyModel};
pub use tokenizer::{
    build_prompt, build_training_sequence, TokenSequence, Tokenizer, BOS, EOS, PAD, SEP,
    VOCAB_SIZE,
};
pub use train::{
    evaluate_loss, grad_check, sft_train, GradCheckReport, LossMask, LossPoint, SftConfig,
    SftReport,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TinylmError {
    #[error("sequence length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("record {id}: output span of {output} tokens cannot fit context {context}")]
    OutputTooLong {
        id: String,
        output: usize,
        context: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last_loss})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_loss: f64,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("checkpoint io error at {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
}

/// Decoding settings: greedy, temperature/top-p sampling, or beam search.
///
/// `temperature == 0` selects greedy argmax decoding. `beam_size > 1` runs a
/// deterministic beam search (no sampling); the winning beam is the finished
/// sequence with the highest cumulative log-probability, ties broken by
/// shorter length, then lexicographic token ids.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub beam_size: usize,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            beam_size: 1,
            max_new_tokens: 128,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            beam_size: 1,
            max_new_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(format!("top_p {} outside [0, 1]", self.top_p));
        }
        if self.beam_size == 0 {
            return Err("beam_size must be >= 1".into());
        }
        Ok(())
    }
}
