//! Autoregressive generation over tokenizer code sequences.

pub mod batch;
pub mod config;
pub mod model;
pub mod sample;
pub mod toks;

pub use batch::{build_class_batch, build_example, build_prediction_batch, split_prediction, GenBatch};
pub use config::{ArConfig, ArMode};
pub use model::{forward_graph, init_ar_params, is_ar_param, loss_graph, ArModel};
pub use sample::{cfg_combine, choose, sample, Condition, SampleSettings};
pub use toks::TokenFile;
