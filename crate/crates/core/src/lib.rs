//! Time-sliced low-rank adapters on a small causal language model.
//!
//! The pipeline: slice a time-stamped corpus into weekly windows, train one
//! LoRA adapter per window (and per seed) on a frozen base model, score
//! survey-question answer options from token probabilities with each adapter
//! swapped in, then smooth, normalize and correlate the resulting series
//! against reference survey data.

pub mod adapters;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod model;
mod nn;
pub mod tensor;
mod tensorio;
pub mod series;
pub mod stats;
pub mod survey;
pub mod tokenizer;
pub mod trainer;

pub use adapters::{init_adapter, LoraAdapter, LoraConfig, Session, Target};
pub use corpus::{Corpus, Document, MixSpec, TimeSlice};
pub use error::{Error, Result};
pub use model::{init_model, ModelConfig, ModelWeights};
pub use survey::{score_instrument, Instrument};
pub use trainer::{train_adapter, TrainConfig, TrainReport};

/// Name and version stamped into every written artifact.
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
