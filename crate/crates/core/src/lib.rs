//! Two-stream 1D video tokenizer with decoupled representation alignment, gradient
//! conflict reformulation between the alignment objectives, and an autoregressive
//! token generator.

pub mod alignment;
pub mod argen;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod sacp;
pub mod tokenizer;
pub mod videolab;

pub use error::{Error, Result};
