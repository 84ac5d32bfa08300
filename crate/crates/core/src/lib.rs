//! Adapting a pretrained decoder-only language model to a new language:
//! byte-level BPE tokenizers, data-mixture planning, a small GQA/RoPE
//! transformer with hand-written gradients, causal and masked next-token
//! objectives, a three-stage continual-pretraining pipeline, LoRA and
//! prefix-attention fine-tuning, and evaluation utilities.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};
