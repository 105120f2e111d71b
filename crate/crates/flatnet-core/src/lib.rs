//! FlatNet: white-box autoencoder pairs built by greedy manifold flattening.
//!
//! A FlatNet is an ordered list of invertible layers. Each layer fits a local
//! quadratic model of the data around a randomly chosen base point (tangent
//! basis plus half the second fundamental form), blends an affine projection
//! onto the tangent plane with the identity through a Gaussian partition of
//! unity, and carries an analytically invertible reconstruction map. Composing
//! the layers flattens the sampled manifold onto an affine subspace; a final
//! PCA head turns the flattened features into minimal `d`-dimensional codes.
//!
//! Module map:
//!
//! - [`linalg`] — dense kernels (orthonormalization, weighted least squares,
//!   eigenvectors, jittered Cholesky, safeguarded scalar root finding) and the
//!   symmetric curvature tensor.
//! - [`dataset`] — synthetic manifold generators and CSV persistence.
//! - [`pou`] — Gaussian partitions of unity, their radius, weighted means.
//! - [`local_model`] — the per-layer estimation core: curvature solve,
//!   Stiefel-manifold tangent optimization, dimension and scale search.
//! - [`layer`] — one flattening/reconstruction layer pair.
//! - [`network`] — the construction loop, whole-network maps, PCA head,
//!   model persistence.
//! - [`flow`] — the convexification flows the layer map discretizes.
//! - [`metrics`] — reconstruction error, flatness proxy, distance-matrix
//!   distortion, and baseline intrinsic-dimension estimators.

pub mod dataset;
pub mod error;
pub mod flow;
pub mod layer;
pub mod linalg;
pub mod local_model;
pub mod metrics;
pub mod network;
pub mod pou;
mod serde_real;

pub use dataset::PointCloud;
pub use error::Error;
pub use layer::FlatLayer;
pub use linalg::{Matrix, SymTensor3, Vector};
pub use local_model::{Hyperparams, LocalQuadraticModel};
pub use network::FlatNetModel;
pub use pou::PartitionOfUnity;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
