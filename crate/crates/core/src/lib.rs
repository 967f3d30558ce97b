//! A small decoder-only language-model pipeline in pure Rust: a reverse-mode
//! autograd engine, the grouped-query sliding-window decoder, token-budgeted
//! pre-training with a sequence-length curriculum, chat SFT, LoRA-based DPO,
//! tokenizer swaps with embedding remapping, and an evaluation harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod run;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
