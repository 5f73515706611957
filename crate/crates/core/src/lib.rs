//! Part-aligned person re-identification at desk scale.
//!
//! A small conv backbone feeds three branches: a global max-pooled branch, a
//! semantic adversarial branch that pools only a sampled subset of body
//! regions, and a semantic fusion branch that runs the per-region pooled
//! vectors through a GRU. A light mask head predicts the regions used at
//! inference. Training, evaluation, the synthetic dataset and saliency export
//! live here as well; `numcore` provides the tensors and the tape.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod maskhead;
pub mod model;
pub mod sab;
pub mod saliency;
pub mod semantics;
pub mod sfb;
pub mod train;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use numcore;
