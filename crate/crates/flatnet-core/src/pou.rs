//! Gaussian partitions of unity and weighted local averaging.

use crate::dataset::PointCloud;
use crate::error::Error;
use crate::linalg::Vector;
use crate::Result;

/// The weight `psi(x) = alpha * exp(-lambda ||x - x0||^2)`.
///
/// Strictly positive everywhere; far points receive exponentially small
/// weight but are never thresholded to zero, which keeps the layer inversion
/// and the curvature least-squares problem well posed.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOfUnity {
    base_point: Vector,
    lambda: f64,
    alpha: f64,
}

impl PartitionOfUnity {
    pub fn new(base_point: Vector, lambda: f64, alpha: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::param("lambda", format!("must be positive and finite, got {lambda}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1], got {alpha}")));
        }
        Ok(PartitionOfUnity { base_point, lambda, alpha })
    }

    pub fn base_point(&self) -> &Vector {
        &self.base_point
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha * exp(-lambda ||x - x0||^2)`.
    pub fn eval(&self, x: &Vector) -> f64 {
        let dist_sq = (x - &self.base_point).norm_squared();
        self.alpha * (-self.lambda * dist_sq).exp()
    }

    /// Distance at which the weight decays to `eps`.
    pub fn radius(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0 && eps < self.alpha) {
            return Err(Error::param("eps", format!("need 0 < eps < alpha = {}, got {eps}", self.alpha)));
        }
        Ok(((self.alpha / eps).ln() / self.lambda).sqrt())
    }

    /// Weighted sample average `sum_i x_i psi(x_i) / sum_i psi(x_i)`.
    ///
    /// Weights are computed relative to the nearest sample so the ratio stays
    /// well defined even when every absolute weight underflows.
    pub fn local_mean(&self, cloud: &PointCloud) -> Vector {
        let n = cloud.len();
        let mut dist_sq = Vec::with_capacity(n);
        let mut min_sq = f64::INFINITY;
        for j in 0..n {
            let d = (cloud.data.column(j) - &self.base_point).norm_squared();
            dist_sq.push(d);
            min_sq = min_sq.min(d);
        }
        let mut num = Vector::zeros(cloud.ambient_dim());
        let mut den = 0.0;
        for (j, d) in dist_sq.iter().enumerate() {
            // The common factor alpha * exp(-lambda * min_sq) cancels in the ratio.
            let w = (-self.lambda * (d - min_sq)).exp();
            num.axpy(w, &cloud.data.column(j).into_owned(), 1.0);
            den += w;
        }
        num / den
    }
}
