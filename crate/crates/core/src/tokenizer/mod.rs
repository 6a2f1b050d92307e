//! Encoder, vector quantizer and decoder of the two-stream 1D tokenizer.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod patchify;
pub mod quantizer;
pub mod tokens;

pub use checkpoint::Checkpoint;
pub use config::TokenizerConfig;
pub use model::{EncoderOutput, QuantizeOutput, Tokenizer};
pub use patchify::{patchify_frame, patchify_video, unpatchify_frame, unpatchify_video};
pub use tokens::{swap_tokens, Factor, TokenSequence};
