//! A small autoregressive policy trained with the continued-pretraining,
//! SFT and DPO objectives.
//!
//! The model is a softmax over a logit table indexed by the previous k tokens.
//! All math is f64 with log-sum-exp stabilization, and gradients are exact, so
//! every objective can be checked against finite differences.

mod checkpoint;
mod model;
mod objectives;
mod optim;
mod train;
mod vocab;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use model::{log_sum_exp, sigmoid, softplus, ContextIndex, TabularPolicy};
pub use objectives::{
    dpo_grad, dpo_loss, dpo_margin, implicit_reward, lm_loss, sft_loss, DpoExample, ReferenceSnapshot, SftExample,
};
pub use optim::{cosine_multiplier, AdamW, AdamWConfig};
pub use train::{epoch_means, trace_csv, train, write_trace_csv, Objective, TraceRow, TrainConfig, TrainData};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP, UNK};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("example {0} has an empty response")]
    EmptyResponse(usize),
    #[error("beta must be positive and finite, got {0}")]
    Beta(f64),
    #[error("model shape: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Token ids for an SFT example: `prompt SEP` conditions, `comment EOS` is scored.
pub fn encode_pair(vocab: &Vocabulary, prompt: &str, response: &str) -> SftExample {
    let mut p = vocab.encode(prompt);
    p.push(SEP);
    let mut r = vocab.encode(response);
    r.push(EOS);
    SftExample { prompt: p, response: r }
}
