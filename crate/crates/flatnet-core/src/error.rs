//! Error type shared by all modules.

use thiserror::Error;

/// Everything that can go wrong while building or evaluating a FlatNet.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParam { name: &'static str, message: String },

    #[error("rank-deficient input: column {column} is linearly dependent on earlier columns")]
    RankDeficient { column: usize },

    #[error("matrix is not symmetric: max |S - S^T| = {asymmetry:.3e} exceeds {tol:.3e}")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("Cholesky failed after {attempts} jitter escalations (last jitter {last_jitter:.3e})")]
    CholeskyFailed { attempts: usize, last_jitter: f64 },

    #[error("bracket [{lo}, {hi}] does not straddle target: g(lo) = {g_lo:.6e}, g(hi) = {g_hi:.6e}")]
    NoStraddle { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },

    #[error("root finder stopped after {iters} iterations at t = {last:.6e} (residual {residual:.3e})")]
    RootNotConverged { iters: usize, last: f64, residual: f64 },

    #[error("non-finite loss at optimizer iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("dimension search failed: loss {loss:.3e} above threshold {threshold:.3e} even at d = {dim}")]
    DimensionSearchFailed { dim: usize, loss: f64, threshold: f64 },

    #[error("no blend-weight root in ({lo:.3e}, {hi:.3e}]: residuals {res_lo:.3e}, {res_hi:.3e}")]
    InversionFailed { lo: f64, hi: f64, res_lo: f64, res_hi: f64 },

    #[error("non-finite value at point index {index}")]
    NonFinitePoint { index: usize },

    #[error("model has no PCA head")]
    MissingHead,

    #[error("model has no accepted layers")]
    NoLayers,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("{path}:{line}: {message}")]
    CsvFormat { path: String, line: usize, message: String },

    #[error("model file version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model schema violation in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("model file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParam { name, message: message.into() }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema { field: field.into(), message: message.into() }
    }
}
