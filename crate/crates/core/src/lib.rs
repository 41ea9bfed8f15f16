//! Self-supervised refinement of iterative motion estimators.
//!
//! Stage one runs a model forwards and backwards over unlabelled video and keeps
//! only cycle- and color-consistent estimates as pseudo-labels. Stage two
//! fine-tunes the model to reproduce those labels under augmentation.

pub mod config;
pub mod consistency;
pub mod error;
pub mod finetune;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synthgen;
pub mod types;
pub mod viz;

pub use error::{Error, Result};
