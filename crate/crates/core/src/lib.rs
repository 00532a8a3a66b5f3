//! Binary neural networks with heterogeneous group convolutions.
//!
//! The crate implements the full desk-scale stack:
//!
//! * [`tensor`] — dense 4-D real tensors and bit-packed sign tensors
//! * [`binary`] — XNOR-popcount group convolution, its float reference, and
//!   per-filter scaling factors
//! * [`train`] — straight-through-estimator gradients, batch norm, softmax
//!   cross-entropy and Adam with linear decay
//! * [`arch`] — the 13-block network family (modules M1/M2/M3), weight
//!   sharing across group choices, and FLOP accounting
//! * [`evolve`] — FLOP-constrained evolutionary search over group vectors
//! * [`pipeline`] — dataset ingestion, supernet training, search, retraining,
//!   evaluation and checkpointing
//!
//! Core numerics are generic over the scalar type (`f32`/`f64`) via
//! [`num::Scalar`]; the pipeline and its file formats are fixed to `f32`.

pub mod arch;
pub mod binary;
pub mod error;
pub mod evolve;
pub mod num;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use num::Scalar;

/// Single-precision tensor, the type the pipeline trains with.
pub type Tensor4f = tensor::Tensor4<f32>;
/// Double-precision tensor, used by oracles and gradient checks.
pub type Tensor4d = tensor::Tensor4<f64>;
/// Single-precision network.
pub type GroupNetF = arch::GroupNet<f32>;
/// Single-precision shared weight store.
pub type SharedWeightStoreF = arch::SharedWeightStore<f32>;

