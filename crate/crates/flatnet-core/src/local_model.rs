//! Local quadratic model estimation.
//!
//! Around a base point `x0`, the manifold is modeled as
//! `x0 + U w + V(w, w)` where `U` is an orthonormal tangent basis and `V` is
//! a symmetric tensor holding half the second fundamental form, so the
//! reconstruction map adds `V(., .)` with no extra factor. Fitting minimizes
//! the weighted autoencoding loss
//!
//! ```text
//! L(U, V) = (1/N) sum_i psi(x_i)^2 ||V(UU^T y_i, UU^T y_i) - (I - UU^T) y_i||^2,
//! y_i = x_i - x0,
//! ```
//!
//! by alternating an exact least-squares solve for `V` with Riemannian
//! gradient descent for `U` on the Stiefel manifold (tangent projection, QR
//! retraction, backtracking line search). The same loss drives the local
//! dimension search and the partition-of-unity scale search.

use serde::{Deserialize, Serialize};

use crate::dataset::PointCloud;
use crate::error::Error;
use crate::linalg::{
    qr_orthonormalize, scalar_root_find, top_eigvectors, weighted_least_squares, Matrix,
    SymTensor3, Vector,
};
use crate::pou::PartitionOfUnity;
use crate::Result;

/// The fitted local model: base point, weighted local mean, tangent basis,
/// and half-second-fundamental-form tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalQuadraticModel {
    /// Base point `x0` the layer was seeded at.
    pub base_point: Vector,
    /// Weighted local mean `xc`; the offset the flattening projects through.
    pub local_mean: Vector,
    /// Orthonormal tangent basis `U`, `D x d`.
    pub tangent: Matrix,
    /// Curvature tensor `V`; slices live in the normal space of `tangent`.
    pub curvature: SymTensor3,
}

impl LocalQuadraticModel {
    /// Evaluates the model surface at intrinsic coefficients `w`:
    /// `x0 + U w + V(w, w)`.
    pub fn embed(&self, w: &[f64]) -> Vector {
        let wv = Vector::from_column_slice(w);
        &self.base_point + &self.tangent * wv + self.curvature.apply_coeffs(w, w)
    }
}

/// Settings for the Stiefel-manifold descent in [`optimize_u`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiefelParams {
    pub max_iters: usize,
    /// Initial line-search length (Frobenius distance in basis space),
    /// reset at every outer iteration.
    #[serde(with = "crate::serde_real")]
    pub step0: f64,
    /// Stop when the projected gradient norm falls below this.
    #[serde(with = "crate::serde_real")]
    pub grad_tol: f64,
}

impl Default for StiefelParams {
    fn default() -> Self {
        StiefelParams { max_iters: 60, step0: 1.0, grad_tol: 1e-8 }
    }
}

/// Early-halting settings for the construction loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltParams {
    /// Minimum relative improvement of the flatness proxy (relative to the
    /// initial proxy) that counts as progress.
    #[serde(with = "crate::serde_real")]
    pub flat_tol: f64,
    /// Consecutive no-progress iterations tolerated before halting.
    pub patience: usize,
}

impl Default for HaltParams {
    fn default() -> Self {
        HaltParams { flat_tol: 1e-6, patience: 20 }
    }
}

/// All knobs of the construction algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Hard cap on the number of accepted layers.
    pub l_max: usize,
    /// Loss threshold of the local dimension search.
    #[serde(with = "crate::serde_real")]
    pub eps_dim: f64,
    /// Scale of the default partition of unity used by the dimension search.
    #[serde(with = "crate::serde_real")]
    pub lambda0: f64,
    /// Loss threshold of the partition-of-unity scale search.
    #[serde(with = "crate::serde_real")]
    pub eps_pou: f64,
    #[serde(with = "crate::serde_real")]
    pub lambda_max: f64,
    #[serde(with = "crate::serde_real")]
    pub lambda_min: f64,
    /// Cap on the multiplicative constant of the partition of unity;
    /// strictly below one so every layer stays smoothly invertible.
    #[serde(with = "crate::serde_real")]
    pub alpha_max: f64,
    pub stiefel: StiefelParams,
    pub halt: HaltParams,
}

impl Default for Hyperparams {
    fn default() -> Self {
        // Unit-scale data; use `for_data` to adapt to a concrete cloud.
        let ln2 = std::f64::consts::LN_2;
        Hyperparams {
            l_max: 300,
            eps_dim: 1e-3,
            lambda0: ln2 / (0.2f64 * 0.2),
            eps_pou: 1e-4,
            lambda_max: ln2 / (0.05f64 * 0.05),
            lambda_min: ln2,
            alpha_max: 0.95,
            stiefel: StiefelParams::default(),
            halt: HaltParams::default(),
        }
    }
}

impl Hyperparams {
    /// Data-relative defaults: loss thresholds scale with the total variance,
    /// partition radii with the diameter (half-weight radius of `lambda0` at
    /// 20% of the diameter, of `lambda_max` at 5%, of `lambda_min` at 100%).
    pub fn for_data(cloud: &PointCloud) -> Self {
        let var = cloud.total_variance().max(f64::MIN_POSITIVE);
        let diam = {
            let d = cloud.diameter();
            if d > 0.0 {
                d
            } else {
                1.0
            }
        };
        let ln2 = std::f64::consts::LN_2;
        Hyperparams {
            l_max: 300,
            eps_dim: 1e-3 * var,
            lambda0: ln2 / (0.2 * diam).powi(2),
            eps_pou: 1e-4 * var,
            lambda_max: ln2 / (0.05 * diam).powi(2),
            lambda_min: ln2 / diam.powi(2),
            alpha_max: 0.95,
            stiefel: StiefelParams { max_iters: 60, step0: 1.0, grad_tol: 1e-7 * var },
            halt: HaltParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max) {
            return Err(Error::param(
                "lambda_min",
                format!("need 0 < lambda_min < lambda_max, got {} vs {}", self.lambda_min, self.lambda_max),
            ));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return Err(Error::param("alpha_max", format!("must lie in (0, 1), got {}", self.alpha_max)));
        }
        for (name, v) in [
            ("eps_dim", self.eps_dim),
            ("eps_pou", self.eps_pou),
            ("lambda0", self.lambda0),
            ("flat_tol", self.halt.flat_tol),
            ("grad_tol", self.stiefel.grad_tol),
            ("step0", self.stiefel.step0),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::param("hyperparams", format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.l_max == 0 {
            return Err(Error::param("l_max", "must be at least 1"));
        }
        Ok(())
    }
}

/// Precomputed quantities for one `(cloud, x0, psi)` fitting problem.
///
/// `diffs` holds `y_i = x_i - x0` column-wise; `weights_sq` the squared
/// partition values. All heavy steps below are GEMMs against these.
struct FitProblem {
    diffs: Matrix,
    weights_sq: Vec<f64>,
}

impl FitProblem {
    fn new(cloud: &PointCloud, x0: &Vector, psi: &PartitionOfUnity) -> Self {
        let n = cloud.len();
        let dim = cloud.ambient_dim();
        let mut diffs = Matrix::zeros(dim, n);
        let mut weights_sq = Vec::with_capacity(n);
        for i in 0..n {
            let mut col = diffs.column_mut(i);
            col.copy_from(&cloud.data.column(i));
            col -= x0;
            let w = psi.eval(&cloud.data.column(i).into_owned());
            weights_sq.push(w * w);
        }
        FitProblem { diffs, weights_sq }
    }

    fn n(&self) -> usize {
        self.diffs.ncols()
    }

    /// Tangent coefficients `A = U^T Y`, `d x N`.
    fn coeffs(&self, u: &Matrix) -> Matrix {
        u.transpose() * &self.diffs
    }

    /// Packed quadratic monomials, `m x N` with `m = d(d+1)/2`:
    /// row `(j,k)` holds `a_j a_k` on the diagonal and `2 a_j a_k` off it.
    fn monomials(coeffs: &Matrix) -> Matrix {
        let d = coeffs.nrows();
        let n = coeffs.ncols();
        let m = d * (d + 1) / 2;
        let mut p = Matrix::zeros(m, n);
        for i in 0..n {
            let mut row = 0;
            for j in 0..d {
                for k in j..d {
                    let scale = if j == k { 1.0 } else { 2.0 };
                    p[(row, i)] = scale * coeffs[(j, i)] * coeffs[(k, i)];
                    row += 1;
                }
            }
        }
        p
    }

    /// Residual matrix `R = V P - Y + U A`, `D x N`; `vmat` is `D x m`.
    fn residuals(&self, u: &Matrix, coeffs: &Matrix, monomials: &Matrix, vmat: &Matrix) -> Matrix {
        let mut r = vmat * monomials;
        r -= &self.diffs;
        r.gemm(1.0, u, coeffs, 1.0);
        r
    }

    fn loss_from_residuals(&self, r: &Matrix) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n() {
            acc += self.weights_sq[i] * r.column(i).norm_squared();
        }
        acc / self.n() as f64
    }

    fn loss(&self, u: &Matrix, vmat: &Matrix) -> f64 {
        let a = self.coeffs(u);
        let p = Self::monomials(&a);
        let r = self.residuals(u, &a, &p, vmat);
        self.loss_from_residuals(&r)
    }

    /// Least-squares solve for the packed curvature matrix (`D x m`) at fixed `U`.
    fn solve_v_packed(&self, u: &Matrix) -> Result<(Matrix, bool)> {
        let a = self.coeffs(u);
        let p = Self::monomials(&a);
        // Targets: normal components (I - UU^T) y_i, one row per sample.
        let mut targets = self.diffs.clone();
        targets.gemm(-1.0, u, &a, 1.0);
        let sol = weighted_least_squares(&p.transpose(), &targets.transpose(), &self.weights_sq)?;
        Ok((sol.solution.transpose(), sol.unique))
    }

    /// Euclidean gradient of the loss in `U` with `V` held fixed.
    fn grad(&self, u: &Matrix, coeffs: &Matrix, vmat: &Matrix) -> Matrix {
        let d = u.ncols();
        let n = self.n();
        let p = Self::monomials(coeffs);
        let r = self.residuals(u, coeffs, &p, vmat);

        // s[(jk), i] = <r_i, v_jk>; then wtilde[j, i] = sum_k s[sym(j,k), i] a_ki.
        let s = vmat.transpose() * &r;
        let mut wtilde = Matrix::zeros(d, n);
        for i in 0..n {
            let mut row = 0;
            for j in 0..d {
                for k in j..d {
                    let sv = s[(row, i)];
                    wtilde[(j, i)] += sv * coeffs[(k, i)];
                    if k != j {
                        wtilde[(k, i)] += sv * coeffs[(j, i)];
                    }
                    row += 1;
                }
            }
        }

        // Fold the per-sample weights into copies of Y and R.
        let mut yw = self.diffs.clone();
        let mut rw = r.clone();
        for i in 0..n {
            yw.column_mut(i).scale_mut(self.weights_sq[i]);
            rw.column_mut(i).scale_mut(self.weights_sq[i]);
        }

        let utr = u.transpose() * &r;
        let scale = 1.0 / n as f64;
        let mut grad = &yw * wtilde.transpose() * (4.0 * scale);
        grad.gemm(2.0 * scale, &rw, &coeffs.transpose(), 1.0);
        grad.gemm(2.0 * scale, &yw, &utr.transpose(), 1.0);
        grad
    }

    /// Weighted PCA initialization: top-`d` eigenvectors of
    /// `sum_i psi(x_i)^2 y_i y_i^T`.
    fn pca_init(&self, d: usize) -> Result<Matrix> {
        let mut yw = self.diffs.clone();
        for i in 0..self.n() {
            yw.column_mut(i).scale_mut(self.weights_sq[i].sqrt());
        }
        let mut cov = &yw * yw.transpose();
        // Kill round-off asymmetry before the symmetric solver.
        let covt = cov.transpose();
        cov = (cov + covt) * 0.5;
        let (vecs, _) = top_eigvectors(&cov, d)?;
        Ok(vecs)
    }
}

fn unpack_tensor(vmat: &Matrix, dim: usize, d: usize) -> SymTensor3 {
    let mut tensor = SymTensor3::zeros(dim, d);
    let mut row = 0;
    for j in 0..d {
        for k in j..d {
            *tensor.slice_mut(j, k) = vmat.column(row).into_owned();
            row += 1;
        }
    }
    tensor
}

fn pack_tensor(v: &SymTensor3) -> Matrix {
    let dim = v.ambient_dim();
    let m = v.upper_slices().len();
    let mut vmat = Matrix::zeros(dim, m);
    for (idx, slice) in v.upper_slices().iter().enumerate() {
        vmat.set_column(idx, slice);
    }
    vmat
}

/// The weighted autoencoding loss of a candidate `(U, V)` pair.
pub fn recon_loss(
    u: &Matrix,
    v: &SymTensor3,
    cloud: &PointCloud,
    x0: &Vector,
    psi: &PartitionOfUnity,
) -> f64 {
    let problem = FitProblem::new(cloud, x0, psi);
    problem.loss(u, &pack_tensor(v))
}

/// Exact curvature fit at fixed tangent basis.
#[derive(Debug, Clone)]
pub struct VFit {
    pub tensor: SymTensor3,
    /// False when the monomial design matrix was rank-deficient and the
    /// minimum-norm solution was taken.
    pub unique: bool,
}

/// Solves the curvature least-squares problem of the loss at fixed `U`.
///
/// When the design matrix has full column rank the solution is unique and its
/// slices are orthogonal to `U`; otherwise the minimum-norm solution is
/// returned and flagged.
pub fn solve_v(u: &Matrix, cloud: &PointCloud, x0: &Vector, psi: &PartitionOfUnity) -> Result<VFit> {
    let problem = FitProblem::new(cloud, x0, psi);
    let (vmat, unique) = problem.solve_v_packed(u)?;
    Ok(VFit { tensor: unpack_tensor(&vmat, cloud.ambient_dim(), u.ncols()), unique })
}

/// Outcome of one tangent-basis optimization.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub tangent: Matrix,
    pub curvature: SymTensor3,
    pub loss: f64,
    /// Whether the final curvature solve was unique (full-rank design).
    pub unique: bool,
    /// Loss after each outer iteration; non-increasing by construction.
    pub loss_history: Vec<f64>,
}

const MAX_BACKTRACKS: usize = 40;

/// Minimizes the autoencoding loss over tangent bases of rank `d`.
///
/// Alternates the exact curvature solve with a projected-gradient step on the
/// Stiefel manifold (QR retraction). `init` must be orthonormal when given;
/// otherwise a weighted-PCA basis seeds the descent. Returns a local
/// minimizer; global optimality is not claimed.
pub fn optimize_u(
    cloud: &PointCloud,
    x0: &Vector,
    psi: &PartitionOfUnity,
    d: usize,
    init: Option<&Matrix>,
    params: &StiefelParams,
) -> Result<FitResult> {
    let dim = cloud.ambient_dim();
    if d == 0 || d > dim {
        return Err(Error::param("d", format!("need 1 <= d <= {dim}, got {d}")));
    }
    let problem = FitProblem::new(cloud, x0, psi);
    let mut u = match init {
        Some(m) => {
            if m.shape() != (dim, d) {
                return Err(Error::param("init", format!("expected {dim}x{d}, got {}x{}", m.nrows(), m.ncols())));
            }
            m.clone()
        }
        None => problem.pca_init(d)?,
    };

    let (mut vmat, mut unique) = problem.solve_v_packed(&u)?;
    let mut loss = problem.loss(&u, &vmat);
    let mut history = vec![loss];

    for iteration in 0..params.max_iters {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let coeffs = problem.coeffs(&u);
        let grad = problem.grad(&u, &coeffs, &vmat);
        // Project onto the Stiefel tangent space: G - U sym(U^T G).
        let utg = u.transpose() * &grad;
        let sym = (&utg + utg.transpose()) * 0.5;
        let pgrad = &grad - &u * sym;
        let pnorm = pgrad.norm();
        if pnorm < params.grad_tol {
            break;
        }

        let direction = &pgrad / pnorm;
        let mut step = params.step0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &u - &direction * step;
            if let Ok(trial) = qr_orthonormalize(&candidate) {
                let trial_loss = problem.loss(&trial, &vmat);
                if trial_loss.is_finite() && trial_loss < loss {
                    accepted = Some(trial);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            break; // No descent at line-search resolution: local minimizer.
        };
        u = next;
        let solved = problem.solve_v_packed(&u)?;
        vmat = solved.0;
        unique = solved.1;
        loss = problem.loss(&u, &vmat);
        history.push(loss);
    }

    Ok(FitResult {
        curvature: unpack_tensor(&vmat, dim, d),
        tangent: u,
        loss,
        unique,
        loss_history: history,
    })
}

/// `Recon(d, psi)`: the achieved loss of an auto-initialized fit, with the
/// minimizing pair. Used by the dimension and scale searches.
pub fn recon(
    d: usize,
    psi: &PartitionOfUnity,
    cloud: &PointCloud,
    x0: &Vector,
    params: &StiefelParams,
) -> Result<FitResult> {
    optimize_u(cloud, x0, psi, d, None, params)
}

/// Result of the local dimension search.
#[derive(Debug, Clone, Copy)]
pub struct DimensionEstimate {
    pub d: usize,
    /// Number of full fits the search spent.
    pub recon_calls: usize,
}

/// Finds the smallest `d` whose fit reaches `eps_dim`, warm-started at
/// `d_start`: probe downward while the constraint holds, upward until it does.
pub fn estimate_local_dimension(
    cloud: &PointCloud,
    x0: &Vector,
    psi0: &PartitionOfUnity,
    eps_dim: f64,
    d_start: usize,
    params: &StiefelParams,
) -> Result<DimensionEstimate> {
    let dim = cloud.ambient_dim();
    let mut calls = 0usize;
    let mut fit_at = |d: usize| -> Result<f64> {
        calls += 1;
        Ok(recon(d, psi0, cloud, x0, params)?.loss)
    };

    let start = d_start.clamp(1, dim);
    let start_loss = fit_at(start)?;
    if start_loss <= eps_dim {
        let mut d = start;
        while d > 1 {
            if fit_at(d - 1)? <= eps_dim {
                d -= 1;
            } else {
                break;
            }
        }
        Ok(DimensionEstimate { d, recon_calls: calls })
    } else {
        let mut d = start;
        let mut last = start_loss;
        while d < dim {
            d += 1;
            last = fit_at(d)?;
            if last <= eps_dim {
                return Ok(DimensionEstimate { d, recon_calls: calls });
            }
        }
        Err(Error::DimensionSearchFailed { dim, loss: last, threshold: eps_dim })
    }
}

/// Result of the partition-of-unity scale search.
#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `ell(lambda)`, the fit loss at the selected scale.
    pub ell: f64,
    pub fit: FitResult,
    /// Set when the root finder failed and the scale was clamped to
    /// `lambda_max` as a fallback.
    pub warning: Option<String>,
}

/// Relative target tolerance of the scale root-finder.
const LAMBDA_ROOT_RTOL: f64 = 0.02;

/// Picks the smallest scale whose fit loss still meets `eps_pou`.
///
/// `ell(lambda) = Recon(d_hat, psi_lambda)` is non-increasing in `lambda`
/// (larger scale means smaller radius means an easier fit), so the search
/// clamps at the ends and otherwise runs the safeguarded solver on
/// `log(lambda)`. Every evaluation fits from its own weighted-PCA
/// initialization, keeping `ell` a function of the scale alone.
pub fn select_lambda(
    cloud: &PointCloud,
    x0: &Vector,
    d_hat: usize,
    eps_pou: f64,
    lambda_min: f64,
    lambda_max: f64,
    params: &StiefelParams,
) -> Result<LambdaSelection> {
    if !(lambda_min > 0.0 && lambda_min < lambda_max) {
        return Err(Error::param(
            "lambda_min",
            format!("need 0 < lambda_min < lambda_max, got {lambda_min} vs {lambda_max}"),
        ));
    }

    use std::cell::RefCell;
    let last_fit: RefCell<Option<(f64, FitResult)>> = RefCell::new(None);
    let failure: RefCell<Option<Error>> = RefCell::new(None);

    let eval = |lambda: f64| -> f64 {
        let psi = match PartitionOfUnity::new(x0.clone(), lambda, 1.0) {
            Ok(p) => p,
            Err(e) => {
                *failure.borrow_mut() = Some(e);
                return f64::NAN;
            }
        };
        let fit = match optimize_u(cloud, x0, &psi, d_hat, None, params) {
            Ok(f) => f,
            Err(e) => {
                *failure.borrow_mut() = Some(e);
                return f64::NAN;
            }
        };
        let loss = fit.loss;
        *last_fit.borrow_mut() = Some((lambda, fit));
        loss
    };

    let take_fit = |lambda: f64, warning: Option<String>| -> Result<LambdaSelection> {
        let cached = last_fit.borrow_mut().take();
        let fit = match cached {
            Some((l, f)) if l == lambda => f,
            _ => {
                let loss = eval(lambda);
                if !loss.is_finite() {
                    return Err(failure.borrow_mut().take().unwrap_or(Error::NonFiniteLoss { iteration: 0 }));
                }
                last_fit.borrow_mut().take().expect("fit cached by eval").1
            }
        };
        Ok(LambdaSelection { lambda, ell: fit.loss, fit, warning })
    };

    let loss_max = eval(lambda_max);
    if loss_max.is_nan() {
        return Err(failure.borrow_mut().take().expect("failure recorded"));
    }
    if loss_max > eps_pou {
        return take_fit(lambda_max, None);
    }
    let fit_max_cache = last_fit.borrow().clone();

    let loss_min = eval(lambda_min);
    if loss_min.is_nan() {
        return Err(failure.borrow_mut().take().expect("failure recorded"));
    }
    if loss_min <= eps_pou {
        return take_fit(lambda_min, None);
    }

    let g = |t: f64| eval(t.exp());
    let bracket = (lambda_min.ln(), lambda_max.ln());
    match scalar_root_find(g, eps_pou, bracket, LAMBDA_ROOT_RTOL * eps_pou) {
        Ok(t) => take_fit(t.exp(), None),
        Err(e) => {
            // Fall back to the largest scale; its fit met the threshold.
            *last_fit.borrow_mut() = fit_max_cache;
            take_fit(lambda_max, Some(format!("scale search fell back to lambda_max: {e}")))
        }
    }
}

/// Builds the final partition of unity: `alpha` compensates an unmet loss
/// threshold, capped at `alpha_max` (with `alpha = alpha_max` at zero loss).
pub fn finalize_pou(
    lambda_hat: f64,
    ell_hat: f64,
    eps_pou: f64,
    alpha_max: f64,
    x0: Vector,
) -> Result<PartitionOfUnity> {
    if ell_hat < 0.0 {
        return Err(Error::param("ell_hat", format!("loss must be nonnegative, got {ell_hat}")));
    }
    let alpha = if ell_hat > 0.0 { alpha_max.min((eps_pou / ell_hat).sqrt()) } else { alpha_max };
    PartitionOfUnity::new(x0, lambda_hat, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn vector(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    fn wide_psi(x0: &Vector) -> PartitionOfUnity {
        // Effectively uniform weights over desk-scale data.
        PartitionOfUnity::new(x0.clone(), 1e-300, 1.0).unwrap()
    }

    fn parabola_cloud() -> PointCloud {
        let ts: Vec<f64> = vec![-0.5, -0.4, -0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4, 0.5];
        let mut data = Matrix::zeros(2, ts.len());
        for (i, t) in ts.iter().enumerate() {
            data[(0, i)] = *t;
            data[(1, i)] = t * t;
        }
        PointCloud::new(data).unwrap()
    }

    /// Random plane through the origin in R^5 spanned by 2 columns.
    fn plane_cloud(seed: u64, n: usize) -> (PointCloud, Matrix) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let raw = Matrix::from_fn(5, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let basis = qr_orthonormalize(&raw).unwrap();
        let mut data = Matrix::zeros(5, n);
        for i in 0..n {
            let w = vector(&[rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0]);
            data.set_column(i, &(&basis * w));
        }
        (PointCloud::new(data).unwrap(), basis)
    }

    /// Largest principal angle between equal-rank subspaces.
    fn principal_angle(a: &Matrix, b: &Matrix) -> f64 {
        let overlap = a.transpose() * b;
        let svd = overlap.svd(false, false);
        let smin = svd.singular_values.min();
        smin.clamp(-1.0, 1.0).acos()
    }

    /// Unvectorized triple-loop loss, used only as an oracle.
    fn naive_loss(u: &Matrix, v: &SymTensor3, cloud: &PointCloud, x0: &Vector, psi: &PartitionOfUnity) -> f64 {
        let n = cloud.len();
        let d = u.ncols();
        let mut acc = 0.0;
        for i in 0..n {
            let x = cloud.point(i);
            let y = &x - x0;
            let proj = u * (u.transpose() * &y);
            let mut quad = Vector::zeros(cloud.ambient_dim());
            for j in 0..d {
                for k in 0..d {
                    let c = u.column(j).dot(&proj) * u.column(k).dot(&proj);
                    quad.axpy(c, v.slice(j, k), 1.0);
                }
            }
            let resid = quad - (&y - &proj);
            let w = psi.eval(&x);
            acc += w * w * resid.norm_squared();
        }
        acc / n as f64
    }

    #[test]
    fn loss_zero_on_affine_plane() {
        let (cloud, basis) = plane_cloud(3, 40);
        let x0 = cloud.point(0);
        let psi = wide_psi(&x0);
        let v = SymTensor3::zeros(5, 2);
        assert!(recon_loss(&basis, &v, &cloud, &x0, &psi) < 1e-28);
    }

    #[test]
    fn loss_zero_on_exact_parabola() {
        let cloud = parabola_cloud();
        let x0 = vector(&[0.0, 0.0]);
        let u = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let mut v = SymTensor3::zeros(2, 1);
        *v.slice_mut(0, 0) = vector(&[0.0, 1.0]);
        let psi = wide_psi(&x0);
        assert!(recon_loss(&u, &v, &cloud, &x0, &psi) < 1e-30);
    }

    #[test]
    fn loss_matches_naive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let cloud = PointCloud::new(Matrix::from_fn(4, 12, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(0);
        let u = qr_orthonormalize(&Matrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let mut v = SymTensor3::zeros(4, 2);
        for j in 0..2 {
            for k in j..2 {
                *v.slice_mut(j, k) = Vector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
            }
        }
        let psi = PartitionOfUnity::new(x0.clone(), 2.0, 0.8).unwrap();
        let fast = recon_loss(&u, &v, &cloud, &x0, &psi);
        let slow = naive_loss(&u, &v, &cloud, &x0, &psi);
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-12 * slow.max(1.0));
    }

    #[test]
    fn loss_rigid_motion_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let cloud = PointCloud::new(Matrix::from_fn(3, 15, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(2);
        let u = qr_orthonormalize(&Matrix::from_fn(3, 1, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let mut v = SymTensor3::zeros(3, 1);
        *v.slice_mut(0, 0) = Vector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
        let psi = PartitionOfUnity::new(x0.clone(), 1.5, 0.9).unwrap();
        let base = recon_loss(&u, &v, &cloud, &x0, &psi);

        for trial in 0..4 {
            let rot = qr_orthonormalize(&Matrix::from_fn(3, 3, |_, _| {
                rng.random::<f64>() - 0.5
            }))
            .unwrap();
            let shift = Vector::from_fn(3, |_, _| rng.random::<f64>() * 3.0);
            let mut data = &rot * &cloud.data;
            for i in 0..data.ncols() {
                let mut col = data.column_mut(i);
                col += &shift;
            }
            let moved = PointCloud::new(data).unwrap();
            let x0m = &rot * &x0 + &shift;
            let um = &rot * &u;
            let mut vm = SymTensor3::zeros(3, 1);
            *vm.slice_mut(0, 0) = &rot * v.slice(0, 0);
            let psim = PartitionOfUnity::new(x0m.clone(), 1.5, 0.9).unwrap();
            let moved_loss = recon_loss(&um, &vm, &moved, &x0m, &psim);
            assert_abs_diff_eq!(base, moved_loss, epsilon = 1e-10 * base.max(1.0));
            let _ = trial;
        }
    }

    #[test]
    fn solve_v_flat_data_is_zero() {
        let (cloud, basis) = plane_cloud(5, 30);
        let x0 = cloud.point(1);
        let psi = wide_psi(&x0);
        let fit = solve_v(&basis, &cloud, &x0, &psi).unwrap();
        assert!(fit.unique);
        for s in fit.tensor.upper_slices() {
            assert!(s.norm() < 1e-10);
        }
    }

    #[test]
    fn solve_v_parabola_closed_form() {
        let cloud = parabola_cloud();
        let x0 = vector(&[0.0, 0.0]);
        let u = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let psi = wide_psi(&x0);
        let fit = solve_v(&u, &cloud, &x0, &psi).unwrap();
        assert!(fit.unique);
        let v11 = fit.tensor.slice(0, 0);
        assert_abs_diff_eq!(v11[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v11[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_v_slices_orthogonal_to_tangent() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let cloud = PointCloud::new(Matrix::from_fn(5, 60, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(0);
        let u = qr_orthonormalize(&Matrix::from_fn(5, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let psi = PartitionOfUnity::new(x0.clone(), 0.5, 1.0).unwrap();
        let fit = solve_v(&u, &cloud, &x0, &psi).unwrap();
        assert!(fit.unique);
        assert!(fit.tensor.max_tangential_norm(&u) < 1e-8);
    }

    #[test]
    fn solve_v_beats_random_perturbations() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let cloud = PointCloud::new(Matrix::from_fn(3, 25, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(0);
        let u = qr_orthonormalize(&Matrix::from_fn(3, 1, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let psi = PartitionOfUnity::new(x0.clone(), 1.0, 0.9).unwrap();
        let fit = solve_v(&u, &cloud, &x0, &psi).unwrap();
        let best = recon_loss(&u, &fit.tensor, &cloud, &x0, &psi);
        for _ in 0..100 {
            let mut perturbed = fit.tensor.clone();
            for j in 0..1 {
                *perturbed.slice_mut(j, j) += Vector::from_fn(3, |_, _| (rng.random::<f64>() - 0.5) * 0.1);
            }
            let other = recon_loss(&u, &perturbed, &cloud, &x0, &psi);
            assert!(other >= best - 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let cloud = PointCloud::new(Matrix::from_fn(4, 20, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(0);
        let psi = PartitionOfUnity::new(x0.clone(), 1.0, 0.9).unwrap();
        let problem = FitProblem::new(&cloud, &x0, &psi);
        let u = qr_orthonormalize(&Matrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let (vmat, _) = problem.solve_v_packed(&u).unwrap();
        let coeffs = problem.coeffs(&u);
        let grad = problem.grad(&u, &coeffs, &vmat);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut up = u.clone();
                up[(i, j)] += h;
                let mut dn = u.clone();
                dn[(i, j)] -= h;
                let fd = (problem.loss(&up, &vmat) - problem.loss(&dn, &vmat)) / (2.0 * h);
                assert_abs_diff_eq!(grad[(i, j)], fd, epsilon = 1e-5 * grad[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn optimize_recovers_plane() {
        let (cloud, basis) = plane_cloud(7, 50);
        let x0 = cloud.point(0);
        let psi = wide_psi(&x0);
        let fit = optimize_u(&cloud, &x0, &psi, 2, None, &StiefelParams::default()).unwrap();
        assert!(fit.loss < 1e-12, "loss = {}", fit.loss);
        assert!(principal_angle(&fit.tangent, &basis) < 1e-6);
    }

    #[test]
    fn optimize_recovers_parabola_tangent() {
        let cloud = parabola_cloud();
        let x0 = vector(&[0.0, 0.0]);
        // Tight weighting focused at the origin.
        let psi = PartitionOfUnity::new(x0.clone(), 8.0, 1.0).unwrap();
        let fit = optimize_u(&cloud, &x0, &psi, 1, None, &StiefelParams::default()).unwrap();
        assert!(fit.loss < 1e-10, "loss = {}", fit.loss);
        let e1 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(principal_angle(&fit.tangent, &e1) < 1e-3);
    }

    #[test]
    fn optimize_does_not_worsen_optimal_init() {
        let (cloud, basis) = plane_cloud(9, 40);
        let x0 = cloud.point(0);
        let psi = wide_psi(&x0);
        let at_init = {
            let fit = solve_v(&basis, &cloud, &x0, &psi).unwrap();
            recon_loss(&basis, &fit.tensor, &cloud, &x0, &psi)
        };
        let fit = optimize_u(&cloud, &x0, &psi, 2, Some(&basis), &StiefelParams::default()).unwrap();
        assert!(fit.loss <= at_init + 1e-18);
    }

    #[test]
    fn optimize_loss_history_non_increasing() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let cloud = PointCloud::new(Matrix::from_fn(4, 40, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(0);
        let psi = PartitionOfUnity::new(x0.clone(), 1.0, 0.9).unwrap();
        let fit = optimize_u(&cloud, &x0, &psi, 2, None, &StiefelParams::default()).unwrap();
        for pair in fit.loss_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
    }

    #[test]
    fn recon_full_dimension_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let cloud = PointCloud::new(Matrix::from_fn(3, 20, |_, _| rng.random::<f64>())).unwrap();
        let x0 = cloud.point(0);
        let psi = PartitionOfUnity::new(x0.clone(), 1.0, 0.9).unwrap();
        let fit = recon(3, &psi, &cloud, &x0, &StiefelParams::default()).unwrap();
        assert!(fit.loss < 1e-25);
    }

    #[test]
    fn dimension_search_finds_plane() {
        let (cloud, _) = plane_cloud(11, 60);
        let x0 = cloud.point(3);
        let psi0 = PartitionOfUnity::new(x0.clone(), 1.0, 1.0).unwrap();
        let est = estimate_local_dimension(&cloud, &x0, &psi0, 1e-8, 1, &StiefelParams::default()).unwrap();
        assert_eq!(est.d, 2);
    }

    #[test]
    fn dimension_search_parabola_is_one() {
        let cloud = parabola_cloud();
        let x0 = vector(&[0.0, 0.0]);
        let psi0 = PartitionOfUnity::new(x0.clone(), 2.0, 1.0).unwrap();
        let est = estimate_local_dimension(&cloud, &x0, &psi0, 1e-8, 1, &StiefelParams::default()).unwrap();
        assert_eq!(est.d, 1);
    }

    #[test]
    fn dimension_search_warm_start_is_cheap() {
        let (cloud, _) = plane_cloud(13, 60);
        let x0 = cloud.point(0);
        let psi0 = PartitionOfUnity::new(x0.clone(), 1.0, 1.0).unwrap();
        let est = estimate_local_dimension(&cloud, &x0, &psi0, 1e-8, 2, &StiefelParams::default()).unwrap();
        assert_eq!(est.d, 2);
        assert!(est.recon_calls <= 2, "spent {} fits", est.recon_calls);
    }

    #[test]
    fn select_lambda_flat_data_clamps_low() {
        let (cloud, _) = plane_cloud(17, 50);
        let x0 = cloud.point(0);
        let sel = select_lambda(&cloud, &x0, 2, 1e-4, 0.1, 100.0, &StiefelParams::default()).unwrap();
        assert_eq!(sel.lambda, 0.1);
        assert!(sel.ell < 1e-20);
        assert!(sel.warning.is_none());
    }

    #[test]
    fn select_lambda_wiggly_data_clamps_high() {
        // White noise in 3D with a rank-1 model never reaches the threshold.
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let cloud = PointCloud::new(Matrix::from_fn(3, 60, |_, _| rng.random::<f64>() * 4.0)).unwrap();
        let x0 = cloud.point(0);
        let sel = select_lambda(&cloud, &x0, 1, 1e-12, 0.01, 0.5, &StiefelParams::default()).unwrap();
        assert_eq!(sel.lambda, 0.5);
        assert!(sel.ell > 1e-12);
    }

    #[test]
    fn select_lambda_hits_target_on_sine() {
        let cloud = crate::dataset::gen_sine(50, 1.0, 1.0, 0.05, 4).unwrap();
        let hp = Hyperparams::for_data(&cloud);
        let x0 = cloud.point(10);
        let sel = select_lambda(
            &cloud,
            &x0,
            1,
            hp.eps_pou,
            hp.lambda_min,
            hp.lambda_max,
            &hp.stiefel,
        )
        .unwrap();
        if sel.lambda > hp.lambda_min && sel.lambda < hp.lambda_max {
            assert!((sel.ell - hp.eps_pou).abs() <= 0.05 * hp.eps_pou, "ell = {}, eps = {}", sel.ell, hp.eps_pou);
            // Dense grid oracle: the achieved scale sits where the grid crosses.
            let mut below = hp.lambda_max;
            let mut above = hp.lambda_min;
            for i in 0..=40 {
                let t = hp.lambda_min.ln() + (hp.lambda_max.ln() - hp.lambda_min.ln()) * i as f64 / 40.0;
                let lam = t.exp();
                let fit = recon(1, &PartitionOfUnity::new(x0.clone(), lam, 1.0).unwrap(), &cloud, &x0, &hp.stiefel).unwrap();
                if fit.loss > hp.eps_pou {
                    above = above.max(lam);
                } else {
                    below = below.min(lam);
                }
            }
            assert!(
                sel.lambda >= above / 3.0 && sel.lambda <= below * 3.0,
                "lambda {} outside grid crossing [{above}, {below}]",
                sel.lambda
            );
        }
    }

    #[test]
    fn ell_non_increasing_in_lambda() {
        let cloud = crate::dataset::gen_sine(40, 1.0, 1.0, 0.02, 8).unwrap();
        let hp = Hyperparams::for_data(&cloud);
        let x0 = cloud.point(5);
        let mut last = f64::INFINITY;
        for i in 0..10 {
            let t = hp.lambda_min.ln() + (hp.lambda_max.ln() - hp.lambda_min.ln()) * i as f64 / 9.0;
            let lam = t.exp();
            let psi = PartitionOfUnity::new(x0.clone(), lam, 1.0).unwrap();
            let fit = recon(1, &psi, &cloud, &x0, &hp.stiefel).unwrap();
            // Ties allowed at zero loss; small slack for optimizer jitter.
            assert!(
                fit.loss <= last * (1.0 + 5e-2) + 1e-18,
                "loss rose from {last} to {} at lambda {lam}",
                fit.loss
            );
            last = fit.loss;
        }
    }

    #[test]
    fn finalize_pou_alpha_rules() {
        let x0 = vector(&[0.0]);
        let eps = 1e-4;
        let a = finalize_pou(1.0, eps, eps, 0.9, x0.clone()).unwrap();
        assert_eq!(a.alpha(), 0.9);
        let b = finalize_pou(1.0, 4.0 * eps, eps, 0.9, x0.clone()).unwrap();
        assert_abs_diff_eq!(b.alpha(), 0.5, epsilon = 1e-12);
        let c = finalize_pou(1.0, 0.0, eps, 0.9, x0).unwrap();
        assert_eq!(c.alpha(), 0.9);
    }
}
