//! Point-cloud simulators for the convexification flows that the layer map
//! discretizes.
//!
//! The unnormalized flow moves every point toward its weighted local mean;
//! the normalized flow restricts that velocity to the local normal space,
//! which is what one layer's blended projection realizes in a single step.

use crate::dataset::PointCloud;
use crate::error::Error;
use crate::linalg::{top_eigvectors, Matrix, Vector};
use crate::metrics::flatness_proxy;
use crate::network::PROXY_ETA_FRACTION;
use crate::pou::PartitionOfUnity;
use crate::Result;

/// One state of the discrete flow.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub cloud: PointCloud,
    pub step_index: usize,
    /// Euler step size; `0` gives the identity step.
    pub h: f64,
    /// Gaussian weight scale of the local averages.
    pub lambda: f64,
    /// Rank of the per-point tangent estimate in the normalized flow.
    pub tangent_dim: usize,
    /// Points left unmoved by the last normalized step (degenerate tangent).
    pub skipped: usize,
}

impl FlowState {
    pub fn new(cloud: PointCloud, h: f64, lambda: f64, tangent_dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::param("h", format!("step size must lie in [0, 1], got {h}")));
        }
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
        }
        if tangent_dim == 0 || tangent_dim >= cloud.ambient_dim().max(2) {
            return Err(Error::param(
                "tangent_dim",
                format!("need 1 <= d < D = {}, got {tangent_dim}", cloud.ambient_dim()),
            ));
        }
        Ok(FlowState { cloud, step_index: 0, h, lambda, tangent_dim, skipped: 0 })
    }

    fn check_finite(data: &Matrix) -> Result<()> {
        for j in 0..data.ncols() {
            if data.column(j).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePoint { index: j });
            }
        }
        Ok(())
    }
}

/// Explicit Euler step of the unnormalized flow: `x <- x + h (xbar - x)`,
/// with the local mean taken over the frozen previous cloud.
pub fn step_unnormalized(state: &FlowState) -> Result<FlowState> {
    let n = state.cloud.len();
    let mut next = state.cloud.data.clone();
    for i in 0..n {
        let x = state.cloud.point(i);
        let psi = PartitionOfUnity::new(x.clone(), state.lambda, 1.0)?;
        let mean = psi.local_mean(&state.cloud);
        let stepped = &x + (mean - &x) * state.h;
        next.set_column(i, &stepped);
    }
    FlowState::check_finite(&next)?;
    Ok(FlowState {
        cloud: PointCloud::with_coords(next, state.cloud.coords.clone())?,
        step_index: state.step_index + 1,
        skipped: 0,
        ..*state
    })
}

/// The frozen single-point update of the normalized flow:
/// `(1 - h) x + h (U U^T (x - xbar) + xbar)`.
pub fn project_step(x: &Vector, basis: &Matrix, mean: &Vector, h: f64) -> Vector {
    let centered = x - mean;
    let projected = basis * (basis.transpose() * centered) + mean;
    x * (1.0 - h) + projected * h
}

/// One step of the normalized flow: every point moves toward the affine
/// plane spanned by its weighted local tangent basis through its local mean.
/// Points whose weighted neighborhood has rank below `tangent_dim` are left
/// unmoved and counted.
pub fn step_normalized(state: &FlowState) -> Result<FlowState> {
    let n = state.cloud.len();
    let dim = state.cloud.ambient_dim();
    let mut next = state.cloud.data.clone();
    let mut skipped = 0usize;
    for i in 0..n {
        let x = state.cloud.point(i);
        let psi = PartitionOfUnity::new(x.clone(), state.lambda, 1.0)?;
        let mean = psi.local_mean(&state.cloud);

        // Squared-weight local PCA around the point itself.
        let mut cov = Matrix::zeros(dim, dim);
        for j in 0..n {
            let xj = state.cloud.point(j);
            let w = psi.eval(&xj);
            let dv = xj - &x;
            cov.ger(w * w, &dv, &dv, 1.0);
        }
        let covt = cov.transpose();
        cov = (cov + covt) * 0.5;
        let (basis, values) = top_eigvectors(&cov, state.tangent_dim)?;
        let rank_ok = values[0] > 0.0
            && values[state.tangent_dim - 1] > 1e-12 * values[0];
        if !rank_ok {
            skipped += 1;
            continue;
        }
        next.set_column(i, &project_step(&x, &basis, &mean, state.h));
    }
    FlowState::check_finite(&next)?;
    Ok(FlowState {
        cloud: PointCloud::with_coords(next, state.cloud.coords.clone())?,
        step_index: state.step_index + 1,
        skipped,
        ..*state
    })
}

/// A recorded normalized-flow run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `(step index, cloud)` snapshots, always including step 0 and the last.
    pub snapshots: Vec<(usize, PointCloud)>,
    /// `(step index, flatness proxy)` alongside each snapshot.
    pub proxies: Vec<(usize, f64)>,
}

/// Runs the normalized flow for `steps` steps, snapshotting every
/// `record_every` steps. The flatness proxy uses the run's `tangent_dim` and
/// a ball radius fixed at a fraction of the initial diameter.
pub fn simulate(
    cloud: &PointCloud,
    steps: usize,
    h: f64,
    lambda: f64,
    tangent_dim: usize,
    record_every: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::param("steps", "need at least one step"));
    }
    let every = record_every.max(1);
    let diam = cloud.diameter();
    let eta = if diam > 0.0 { PROXY_ETA_FRACTION * diam } else { 1.0 };

    let mut state = FlowState::new(cloud.clone(), h, lambda, tangent_dim)?;
    let mut snapshots = Vec::new();
    let mut proxies = Vec::new();
    snapshots.push((0, state.cloud.clone()));
    proxies.push((0, flatness_proxy(&state.cloud, eta, tangent_dim).value));
    for k in 1..=steps {
        state = step_normalized(&state)?;
        if k % every == 0 || k == steps {
            snapshots.push((k, state.cloud.clone()));
            proxies.push((k, flatness_proxy(&state.cloud, eta, tangent_dim).value));
        }
    }
    Ok(Trajectory { snapshots, proxies })
}
