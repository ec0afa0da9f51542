//! Quadratic-linear (QL) network training and landscape analysis.
//!
//! A QL layer squares linear projections of its input and recombines them with
//! trainable output weights, so a single layer computes `x ↦ (QΛQᵀ + αI) • xxᵀ`.
//! The training loss of such networks is non-convex and admits spurious local
//! minima, but two modifications repair the landscape: adding the data norm
//! `‖x‖²` as a fixed regressor with trainable weight `α`, or penalizing
//! `γ‖QQᵀ − I‖²` so the first-layer weights stay near an orthonormal frame.
//! Because the global optimum of every variant coincides with a convex least
//! squares problem over lifted features, training outcomes can be certified
//! exactly.
//!
//! The crate provides:
//! - [`model`]: parameter containers and forward passes (single-layer,
//!   multivariate, deep, and degree-p polynomial variants),
//! - [`objective`]: losses, penalties, analytic gradients, and the
//!   second-order quadratic form used for curvature analysis,
//! - [`optimize`]: full-batch GD, mini-batch SGD, and ADAM trainers,
//! - [`oracle`]: the convex least-squares certifier and the closed-form
//!   eigendecomposition solver,
//! - [`landscape`]: stationary-point classification and the constructive
//!   spurious-minimum family,
//! - [`data`]: synthetic generators and the MNIST ingestion pipeline,
//! - [`harness`]: the experiment sweeps behind the CLI.

pub mod data;
pub mod error;
pub mod harness;
pub mod landscape;
pub(crate) mod linalg;
pub mod model;
pub mod objective;
pub mod optimize;
pub mod oracle;

pub use error::{Error, Result};
