//! Conversational-context transformer for sequence transduction.
//!
//! An encoder-decoder transformer on a small reverse-mode autodiff engine,
//! extended with three mechanisms for conversations:
//!
//! * residual attention, where each encoder layer adds the previous layer's
//!   pre-softmax scores to its own;
//! * a cross-utterance score term that mixes the previous utterance's cached
//!   scores into the first (or every) encoder layer;
//! * a decoder conditioned on a memory folded from earlier transcripts.
//!
//! A synthetic dialogue task with labels only recoverable from earlier
//! utterances measures what the mechanisms buy.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod conversation;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod search;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
