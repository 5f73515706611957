//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The op set is exactly what a small part-aligned re-identification network
//! needs: convolution, batchnorm, max pooling, masking, GRU arithmetic and the
//! usual classification / metric losses.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use kernels::bilinear_resize;
pub use nn::Mode;
pub use params::{MomentState, OptimizerConfig, OptimizerKind, ParameterSet};
pub use rng::{RngState, RngStream};
pub use scalar::Scalar;
pub use tensor::Tensor;
