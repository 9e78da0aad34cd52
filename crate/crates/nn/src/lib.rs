//! Minimal reverse-mode differentiation core.
//!
//! Values live in [`Tensor`]s, computations are recorded on a [`Graph`] tape
//! and differentiated with [`Graph::backward`]. The operator set is exactly
//! what the detector CNN, the instruction embeddings and the auto-encoder
//! need: 1-D convolution (plain and fused with an embedding lookup), batch
//! normalization, global max pooling, linear layers, the usual activations,
//! softmax, log loss, squared error and a couple of helpers used by the
//! skip-gram trainer.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! runs finite-difference checks in `f64`.

mod adam;
pub mod checkpoint;
mod error;
pub mod functional;
pub mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, NamedArray};
pub use error::{NnError, Result};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use params::ParamSet;
pub use real::Real;
pub use tensor::Tensor;

/// Probabilities fed to [`Graph::log_loss`] are clamped to this distance from 0 and 1.
pub const LOG_LOSS_CLAMP: f64 = 1e-7;

/// Momentum used when batch statistics are folded into running averages.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Default epsilon inside the batch-normalization square root.
pub const BATCHNORM_EPS: f64 = 1e-5;
