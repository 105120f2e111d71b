//! Dense linear-algebra kernels and the symmetric curvature tensor.
//!
//! Matrices are [`nalgebra`] dynamic matrices, stored column-major; all file
//! I/O converts explicitly to and from this layout. Values are expected to be
//! finite: generators construct finite data and loaders validate on read.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Dense column-major matrix of `f64`.
pub type Matrix = DMatrix<f64>;
/// Dense column vector of `f64`.
pub type Vector = DVector<f64>;

/// Relative threshold below which a QR diagonal entry flags rank deficiency.
const QR_RANK_TOL: f64 = 1e-12;

/// Orthonormalizes the columns of `m` (thin QR, `d <= D` columns).
///
/// Returns `Q` with `Q^T Q = I` and `span(Q) = span(m)`. Column signs are
/// normalized so the triangular factor has a positive diagonal, which makes
/// the map idempotent on already-orthonormal input.
pub fn qr_orthonormalize(m: &Matrix) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(Error::param("m", format!("need cols <= rows, got {rows}x{cols}")));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let scale = r[(0, 0)].abs().max(1.0);
    for j in 0..cols {
        let diag = r[(j, j)];
        if diag.abs() <= QR_RANK_TOL * scale {
            return Err(Error::RankDeficient { column: j });
        }
        if diag < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Solution of a weighted least-squares problem.
#[derive(Debug, Clone)]
pub struct WlsSolution {
    /// The `m x D` minimizer of `||diag(sqrt(w)) (A M - C)||_F`.
    pub solution: Matrix,
    /// False when `A` was rank-deficient and the minimum-norm solution was taken.
    pub unique: bool,
}

/// Minimizes `||diag(sqrt(w)) (A M - C)||_F^2` over `M`.
///
/// Full column rank is detected from a column-pivoted QR of the weighted
/// system; rank-deficient systems fall back to an SVD-based minimum-norm
/// solution and are flagged as non-unique.
pub fn weighted_least_squares(a: &Matrix, c: &Matrix, w: &[f64]) -> Result<WlsSolution> {
    let (n, m) = a.shape();
    if c.nrows() != n {
        return Err(Error::param("c", format!("row count {} != {}", c.nrows(), n)));
    }
    if w.len() != n {
        return Err(Error::param("w", format!("weight count {} != {}", w.len(), n)));
    }
    if !w.iter().any(|&wi| wi > 0.0) {
        return Err(Error::param("w", "all weights are zero"));
    }
    let mut aw = a.clone();
    let mut cw = c.clone();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        aw.row_mut(i).scale_mut(s);
        cw.row_mut(i).scale_mut(s);
    }

    let qr = aw.clone().col_piv_qr();
    let rank = {
        let r = qr.r();
        let scale = (0..m.min(n)).map(|j| r[(j, j)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        (0..m.min(n)).take_while(|&j| r[(j, j)].abs() > 1e-12 * scale).count()
    };

    if rank == m && n >= m {
        // Q^T C, back-substitute, undo the column permutation.
        let q = qr.q();
        let r = qr.r();
        let rhs = q.transpose() * &cw;
        let mut sol = rhs.rows(0, m).into_owned();
        let r_top = r.rows(0, m).into_owned();
        if r_top.solve_upper_triangular_mut(&mut sol) {
            qr.p().inv_permute_rows(&mut sol);
            return Ok(WlsSolution { solution: sol, unique: true });
        }
        // Fall through to SVD if the triangular solve stalls.
    }

    let svd = aw.svd(true, true);
    let sol = svd
        .solve(&cw, 1e-12 * svd.singular_values.max())
        .map_err(|e| Error::param("a", e))?;
    Ok(WlsSolution { solution: sol, unique: false })
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues descending.
pub fn top_eigvectors(s: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::param("s", format!("matrix must be square, got {}x{}", n, s.ncols())));
    }
    if k == 0 || k > n {
        return Err(Error::param("k", format!("need 1 <= k <= {n}, got {k}")));
    }
    let mut asym: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s[(i, j)] - s[(j, i)]).abs());
            scale = scale.max(s[(i, j)].abs()).max(s[(i, i)].abs());
        }
    }
    let tol = 1e-10 * scale;
    if asym > tol {
        return Err(Error::NotSymmetric { asymmetry: asym, tol });
    }
    let eig = nalgebra::SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut vectors = Matrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for (out, &idx) in order.iter().take(k).enumerate() {
        vectors.set_column(out, &eig.eigenvectors.column(idx));
        values.push(eig.eigenvalues[idx]);
    }
    Ok((vectors, values))
}

/// Result of a jittered Cholesky factorization.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    /// Lower-triangular factor with `L L^T = S + jitter * I`.
    pub l: Matrix,
    /// The diagonal shift that made the factorization succeed.
    pub jitter: f64,
}

/// Cholesky with escalating diagonal jitter `{0, j0, 10 j0, ..., 10^7 j0}`.
pub fn cholesky_jitter(s: &Matrix, jitter0: f64) -> Result<JitteredCholesky> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::param("s", format!("matrix must be square, got {}x{}", n, s.ncols())));
    }
    let mut last = 0.0;
    for attempt in 0..=8usize {
        let jitter = if attempt == 0 { 0.0 } else { jitter0 * 10f64.powi(attempt as i32 - 1) };
        last = jitter;
        let mut shifted = s.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            return Ok(JitteredCholesky { l: chol.l(), jitter });
        }
    }
    Err(Error::CholeskyFailed { attempts: 8, last_jitter: last })
}

/// Maximum iterations for the safeguarded scalar solver.
pub const ROOT_MAX_ITERS: usize = 200;

/// Solves `g(t) = target` on a bracket by secant steps safeguarded by bisection.
///
/// `g(lo)` and `g(hi)` must straddle the target. A secant candidate is taken
/// only when it lands strictly inside the current bracket; otherwise the step
/// bisects. The returned point never leaves `[lo, hi]`.
pub fn scalar_root_find(
    g: impl Fn(f64) -> f64,
    target: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64> {
    let (lo, hi) = bracket;
    let f = |t: f64| g(t) - target;
    let f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo.abs() <= tol {
        return Ok(lo);
    }
    if f_hi.abs() <= tol {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || !f_lo.is_finite() || !f_hi.is_finite() {
        return Err(Error::NoStraddle { lo, hi, g_lo: f_lo + target, g_hi: f_hi + target });
    }

    let (mut a, mut fa, mut b, mut fb) = (lo, f_lo, hi, f_hi);
    // Secant memory: the two most recent iterates.
    let (mut t_prev, mut f_prev) = (a, fa);
    let (mut t_curr, mut f_curr) = (b, fb);
    for iters in 1..=ROOT_MAX_ITERS {
        let secant = if (f_curr - f_prev).abs() > 0.0 {
            t_curr - f_curr * (t_curr - t_prev) / (f_curr - f_prev)
        } else {
            f64::NAN
        };
        let inside = secant.is_finite() && secant > a.min(b) && secant < a.max(b);
        let t = if inside { secant } else { 0.5 * (a + b) };
        let ft = f(t);
        if ft.abs() <= tol {
            return Ok(t);
        }
        if !ft.is_finite() {
            return Err(Error::RootNotConverged { iters, last: t, residual: f64::NAN });
        }
        if ft.signum() == fa.signum() {
            a = t;
            fa = ft;
        } else {
            b = t;
            fb = ft;
        }
        t_prev = t_curr;
        f_prev = f_curr;
        t_curr = t;
        f_curr = ft;
        if (b - a).abs() <= f64::EPSILON * (a.abs() + b.abs()).max(1.0) {
            // Bracket exhausted; report the better end.
            let (t_best, f_best) = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
            if f_best.abs() <= tol {
                return Ok(t_best);
            }
            return Err(Error::RootNotConverged { iters, last: t_best, residual: f_best });
        }
    }
    Err(Error::RootNotConverged { iters: ROOT_MAX_ITERS, last: t_curr, residual: f_curr })
}

/// Symmetric rank-3 tensor holding the half-second-fundamental-form.
///
/// Stores one ambient vector `v_jk` in `R^D` per unordered intrinsic index
/// pair `(j, k)`, `j <= k <= d`; the lower triangle is mirrored on read.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor3 {
    ambient_dim: usize,
    intrinsic_dim: usize,
    slices: Vec<Vector>,
}

impl SymTensor3 {
    /// Zero tensor of the given shape.
    pub fn zeros(ambient_dim: usize, intrinsic_dim: usize) -> Self {
        let count = intrinsic_dim * (intrinsic_dim + 1) / 2;
        SymTensor3 {
            ambient_dim,
            intrinsic_dim,
            slices: vec![Vector::zeros(ambient_dim); count],
        }
    }

    /// Builds from upper-triangular slices ordered `(0,0), (0,1), ..., (d-1,d-1)`.
    pub fn from_upper_slices(ambient_dim: usize, intrinsic_dim: usize, slices: Vec<Vector>) -> Result<Self> {
        let expect = intrinsic_dim * (intrinsic_dim + 1) / 2;
        if slices.len() != expect {
            return Err(Error::param("slices", format!("expected {expect} slices, got {}", slices.len())));
        }
        if let Some(bad) = slices.iter().position(|s| s.len() != ambient_dim) {
            return Err(Error::param("slices", format!("slice {bad} has wrong ambient dimension")));
        }
        Ok(SymTensor3 { ambient_dim, intrinsic_dim, slices })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    /// Index into the packed upper triangle for `j <= k`.
    fn upper_index(&self, j: usize, k: usize) -> usize {
        debug_assert!(j <= k && k < self.intrinsic_dim);
        j * self.intrinsic_dim - j * (j + 1) / 2 + k
    }

    /// The slice `v_jk`; symmetric in `(j, k)`.
    pub fn slice(&self, j: usize, k: usize) -> &Vector {
        let (j, k) = if j <= k { (j, k) } else { (k, j) };
        &self.slices[self.upper_index(j, k)]
    }

    pub fn slice_mut(&mut self, j: usize, k: usize) -> &mut Vector {
        let (j, k) = if j <= k { (j, k) } else { (k, j) };
        let idx = self.upper_index(j, k);
        &mut self.slices[idx]
    }

    /// Packed upper-triangular slices in `(0,0), (0,1), ...` order.
    pub fn upper_slices(&self) -> &[Vector] {
        &self.slices
    }

    /// Evaluates `sum_{j,k} v_jk a_j b_k` for intrinsic coefficient vectors.
    pub fn apply_coeffs(&self, a: &[f64], b: &[f64]) -> Vector {
        let d = self.intrinsic_dim;
        debug_assert_eq!(a.len(), d);
        debug_assert_eq!(b.len(), d);
        let mut out = Vector::zeros(self.ambient_dim);
        for j in 0..d {
            for k in j..d {
                let coeff = if j == k { a[j] * b[j] } else { a[j] * b[k] + a[k] * b[j] };
                if coeff != 0.0 {
                    out.axpy(coeff, self.slice(j, k), 1.0);
                }
            }
        }
        out
    }

    /// Evaluates the bilinear form on ambient vectors via the basis `u`:
    /// `sum_{j,k} v_jk <u_j, w1> <u_k, w2>`.
    pub fn apply_ambient(&self, u: &Matrix, w1: &Vector, w2: &Vector) -> Vector {
        let a = u.transpose() * w1;
        let b = u.transpose() * w2;
        self.apply_coeffs(a.as_slice(), b.as_slice())
    }

    /// Max over slices of `||U^T v_jk||`, the tangential leakage of the tensor.
    pub fn max_tangential_norm(&self, u: &Matrix) -> f64 {
        self.slices
            .iter()
            .map(|v| (u.transpose() * v).norm())
            .fold(0.0, f64::max)
    }
}
