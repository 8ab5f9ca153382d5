//! Multi-task attentional sequence-to-sequence learning.
//!
//! Translation and linguistic labeling tasks share one encoder-decoder
//! architecture. Components can be shared across tasks at four levels, and
//! training supports joint and adapted (joint, then fine-tuned) schedules.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
