//! Desk-scale hybrid Mamba2 / shared-attention language model.
//!
//! A trainable, end-to-end implementation of the Zamba2-style architecture:
//! a selective state-space (Mamba2) backbone with one or two weight-tied
//! transformer blocks invoked at a configurable cadence, per-invocation LoRA
//! adapters, and NTK-rescalable rotary embeddings. On top of the model sit a
//! two-phase trainer (cosine schedules, replay mixing, context-length
//! curriculum), a dual-mode inference engine (parallel prefill, constant-state
//! recurrent decode) with a benchmark harness, an SSM-aware 4-bit quantizer
//! with QLoRA finetuning, and a passkey-retrieval evaluation harness.
//!
//! Everything runs on a small built-in tensor/autodiff substrate
//! ([`numerics`]) in plain Rust: no BLAS, no accelerator.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod inference;
mod init;
pub mod model;
pub mod numerics;
pub mod ssm;
pub mod tokenizer;
pub mod passkey;
pub mod quantize;
pub mod training;

pub use error::{Error, Result};
