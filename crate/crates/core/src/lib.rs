//! Low-rank tensor completion with tensor-network cores inside an orthonormal
//! Tucker wrapper.
//!
//! The estimate of a partially observed tensor is written as
//! `X = [[ G ; A1, ..., AN ]]` where the `An` are orthonormal factor matrices
//! and the core `G` is itself the contraction of a small tensor network
//! (a single node, a CP form, a tensor train, or a tensor ring).  Fitting is
//! done by a two-level alternating least squares scheme: the outer level
//! updates the wrapper factors through decoupled row-wise least squares
//! followed by a QR re-orthonormalization, and the inner level updates the
//! network node tensors until the core stabilizes.  Multilinear ranks are
//! adapted on the fly by condition-number-bounded truncation of the core
//! unfoldings.
//!
//! Modules:
//! - [`tensor`]: dense tensors, matrices, unfolding/folding, modal products.
//! - [`observation`]: sampling masks, sparse observed entries, residuals.
//! - [`graph`]: tensor diagrams, standard topologies, contraction.
//! - [`init`]: HOSVD, best multilinear-rank approximation, node fitting.
//! - [`solver`]: the two-level ALS completion loop with rank adaptation.
//! - [`analysis`]: canonical angles, incoherence, sampling thresholds, PSNR.

// Indexed loops over several parallel buffers are the norm in the numeric
// kernels here; iterator rewrites obscure the stride arithmetic.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod graph;
pub mod init;
pub mod linalg;
pub mod lsqr;
pub mod model;
pub mod observation;
pub mod rng;
pub mod scalar;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double precision tensor, the default for experiments.
pub type Tensor64 = tensor::DenseTensor<f64>;
/// Single precision tensor.
pub type Tensor32 = tensor::DenseTensor<f32>;
/// Double precision matrix.
pub type Matrix64 = tensor::Matrix<f64>;
/// Single precision matrix.
pub type Matrix32 = tensor::Matrix<f32>;
/// Double precision observation set.
pub type Observations64 = observation::ObservationSet<f64>;
pub type Model64 = model::TuckerWrappedModel<f64>;

