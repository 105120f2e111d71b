//! Evaluation quantities: reconstruction error, the flatness proxy, pairwise
//! distance-matrix distortion, and two baseline intrinsic-dimension
//! estimators.

use serde::{Deserialize, Serialize};

use crate::dataset::PointCloud;
use crate::error::Error;
use crate::linalg::Matrix;
use crate::network::FlatNetModel;
use crate::Result;

/// Summary of one model/data evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub recon_error: f64,
    pub flatness_proxy: f64,
    pub dim_estimates: DimEstimates,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edm_ratio_stats: Option<EdmStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimEstimates {
    /// Mode of the per-layer dimension estimates; absent for untrained models.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flatnet: Option<usize>,
    pub mle: f64,
    pub twonn: f64,
}

/// Statistics of the normalized distance-ratio matrix (max is 1 by construction).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdmStats {
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
}

/// Mean squared round-trip error `(1/N) sum ||x_i - g(f(x_i))||^2`.
pub fn reconstruction_error(model: &FlatNetModel, cloud: &PointCloud) -> Result<f64> {
    let features = model.flatten(cloud)?;
    let recon = model.reconstruct(&features)?;
    let mut acc = 0.0;
    for i in 0..cloud.len() {
        acc += (cloud.data.column(i) - recon.data.column(i)).norm_squared();
    }
    Ok(acc / cloud.len() as f64)
}

/// Result of a flatness-proxy evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ProxyResult {
    /// Sum over samples of the RMS residual of the best rank-`d` affine fit
    /// to the ball of radius `eta` around each sample.
    pub value: f64,
    /// Balls with fewer than `d + 1` points, skipped from the sum.
    pub skipped: usize,
}

/// Local-affinity flatness measure: zero exactly when every `eta`-ball is
/// affine of dimension at most `d`. Boundary effects are ignored: every
/// sample contributes its ball, however truncated.
pub fn flatness_proxy(cloud: &PointCloud, eta: f64, d: usize) -> ProxyResult {
    let n = cloud.len();
    let dim = cloud.ambient_dim();
    let eta_sq = eta * eta;
    let mut value = 0.0;
    let mut skipped = 0usize;
    for i in 0..n {
        let xi = cloud.data.column(i);
        let mut members = Vec::new();
        for j in 0..n {
            if (cloud.data.column(j) - xi).norm_squared() <= eta_sq {
                members.push(j);
            }
        }
        if members.len() < d + 1 {
            skipped += 1;
            continue;
        }
        // RMS distance to the best rank-d affine fit: trailing eigenvalue
        // mass of the neighborhood covariance.
        let m = members.len() as f64;
        let mut mean = nalgebra::DVector::zeros(dim);
        for &j in &members {
            mean += cloud.data.column(j);
        }
        mean /= m;
        let mut cov = Matrix::zeros(dim, dim);
        for &j in &members {
            let dv = cloud.data.column(j) - &mean;
            cov.ger(1.0 / m, &dv, &dv, 1.0);
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let trailing: f64 = values.iter().skip(d).sum();
        // Trailing mass at round-off level relative to the leading spread is
        // genuinely zero, not curvature.
        let floor = 1e-13 * values.first().copied().unwrap_or(0.0).max(0.0);
        if trailing > floor {
            value += trailing.sqrt();
        }
    }
    ProxyResult { value, skipped }
}

/// Elementwise distance-ratio matrix between features and intrinsic
/// coordinates, scaled by its maximum.
#[derive(Debug, Clone)]
pub struct EdmResult {
    /// `N x N` normalized ratios; diagonal and excluded pairs hold zero.
    pub normalized: Matrix,
    pub stats: EdmStats,
    /// Pairs excluded for a zero intrinsic distance.
    pub excluded: usize,
}

/// Ratio of feature-space to intrinsic-coordinate pairwise distances.
pub fn edm_distortion(features: &PointCloud, coords: &Matrix) -> Result<EdmResult> {
    let n = features.len();
    if coords.ncols() != n {
        return Err(Error::param("coords", format!("expected {n} columns, got {}", coords.ncols())));
    }
    if n < 2 {
        return Err(Error::param("features", "need at least two samples"));
    }
    let mut ratios = Matrix::zeros(n, n);
    let mut excluded = 0usize;
    let mut max_ratio = 0.0f64;
    for p in 0..n {
        for q in (p + 1)..n {
            let dc = (coords.column(p) - coords.column(q)).norm();
            if dc == 0.0 {
                excluded += 1;
                continue;
            }
            let dz = (features.data.column(p) - features.data.column(q)).norm();
            let r = dz / dc;
            ratios[(p, q)] = r;
            ratios[(q, p)] = r;
            max_ratio = max_ratio.max(r);
        }
    }
    if max_ratio == 0.0 {
        return Err(Error::DegenerateFit("all intrinsic pairwise distances are zero or features collapsed".into()));
    }
    let normalized = ratios / max_ratio;
    let mut count = 0usize;
    let mut mean = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            if normalized[(p, q)] > 0.0 {
                mean += normalized[(p, q)];
                count += 1;
            }
        }
    }
    mean /= count as f64;
    let mut var = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            if normalized[(p, q)] > 0.0 {
                var += (normalized[(p, q)] - mean).powi(2);
            }
        }
    }
    var /= count as f64;
    Ok(EdmResult {
        normalized,
        stats: EdmStats { max: 1.0, mean, stddev: var.sqrt() },
        excluded,
    })
}

/// Distance floor standing in for an RNG jitter on duplicate points.
const DUPLICATE_FLOOR: f64 = 1e-12;

/// Baseline dimension estimate with degeneracy bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct DimBaseline {
    pub value: f64,
    /// Whether any zero neighbor distance had to be floored.
    pub jittered: bool,
}

fn sorted_neighbor_distances(cloud: &PointCloud, i: usize, k: usize) -> (Vec<f64>, bool) {
    let n = cloud.len();
    let xi = cloud.data.column(i);
    let mut dists: Vec<f64> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (cloud.data.column(j) - xi).norm())
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists.truncate(k);
    let mut jittered = false;
    for d in dists.iter_mut() {
        if *d < DUPLICATE_FLOOR {
            *d = DUPLICATE_FLOOR;
            jittered = true;
        }
    }
    (dists, jittered)
}

/// Local maximum-likelihood dimension estimator, aggregated over points by
/// the reciprocal-mean convention `[mean_i 1/m_i]^{-1}` with
/// `1/m_i = (1/(k-1)) sum_{j<k} log(T_k / T_j)`.
///
/// `k` is capped at `N - 1`; with fewer than two usable neighbors the
/// estimate degenerates to the documented convention of `0`.
pub fn mle_dimension(cloud: &PointCloud, k: usize) -> Result<DimBaseline> {
    let n = cloud.len();
    if k < 2 {
        return Err(Error::param("k", "need k >= 2"));
    }
    if n < 2 {
        return Err(Error::param("cloud", "need at least two points"));
    }
    let k_eff = k.min(n - 1);
    if k_eff < 2 {
        return Ok(DimBaseline { value: 0.0, jittered: false });
    }
    let mut inv_sum = 0.0;
    let mut jittered = false;
    for i in 0..n {
        let (dists, j) = sorted_neighbor_distances(cloud, i, k_eff);
        jittered |= j;
        let t_k = dists[k_eff - 1];
        let mut acc = 0.0;
        for t in dists.iter().take(k_eff - 1) {
            acc += (t_k / t).ln();
        }
        inv_sum += acc / (k_eff - 1) as f64;
    }
    let mean_inv = inv_sum / n as f64;
    if mean_inv <= 0.0 {
        return Err(Error::DegenerateFit("all neighbor distances equal; dimension undetermined".into()));
    }
    Ok(DimBaseline { value: 1.0 / mean_inv, jittered })
}

/// Fraction of the largest neighbor-distance ratios dropped by the fit.
const TWONN_DISCARD: f64 = 0.1;

/// Two-nearest-neighbor estimator: the slope through the origin of
/// `-log(1 - F)` against `log(r_2 / r_1)` over the empirical CDF `F`,
/// after discarding the top decile of ratios.
pub fn twonn_dimension(cloud: &PointCloud) -> Result<DimBaseline> {
    let n = cloud.len();
    if n < 3 {
        return Err(Error::param("cloud", "need at least three points"));
    }
    let mut mus = Vec::with_capacity(n);
    let mut jittered = false;
    for i in 0..n {
        let (dists, j) = sorted_neighbor_distances(cloud, i, 2);
        jittered |= j;
        mus.push(dists[1] / dists[0]);
    }
    let spread = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - mus.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread < 1e-12 {
        return Err(Error::DegenerateFit("all neighbor-distance ratios equal; regression undefined".into()));
    }
    mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let keep = ((n as f64) * (1.0 - TWONN_DISCARD)).floor() as usize;
    let keep = keep.max(1).min(n - 1);
    let mut num = 0.0;
    let mut den = 0.0;
    for (idx, mu) in mus.iter().take(keep).enumerate() {
        let f = (idx + 1) as f64 / n as f64;
        let a = -(1.0 - f).ln();
        let b = mu.ln();
        num += a * b;
        den += b * b;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateFit("neighbor-distance ratios carry no signal".into()));
    }
    Ok(DimBaseline { value: num / den, jittered })
}
