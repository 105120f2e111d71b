//! The full network: construction loop, whole-network maps, PCA head, and
//! versioned JSON persistence.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PointCloud;
use crate::error::Error;
use crate::layer::FlatLayer;
use crate::linalg::{top_eigvectors, Matrix, SymTensor3, Vector};
use crate::local_model::{
    estimate_local_dimension, finalize_pou, select_lambda, Hyperparams, LocalQuadraticModel,
};
use crate::metrics::flatness_proxy;
use crate::pou::PartitionOfUnity;
use crate::Result;

/// Orthonormal basis and offset producing minimal codes from flattened features.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaHead {
    /// `D x d` orthonormal basis of the flattened feature subspace.
    pub basis: Matrix,
    /// Feature-space offset (the mean of the flattened training features).
    pub origin: Vector,
}

/// Per-accepted-layer training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLog {
    /// Index of the base point in the working dataset the layer was seeded at.
    pub x0_index: usize,
    pub d_hat: usize,
    #[serde(with = "crate::serde_real")]
    pub lambda_hat: f64,
    #[serde(with = "crate::serde_real")]
    pub alpha: f64,
    /// Fit loss at the selected scale, before the alpha amendment.
    #[serde(with = "crate::serde_real")]
    pub ell_hat: f64,
    /// Fit loss under the finalized partition (`alpha^2 * ell_hat`).
    #[serde(with = "crate::serde_real")]
    pub loss: f64,
    #[serde(with = "crate::serde_real")]
    pub proxy_before: f64,
    #[serde(with = "crate::serde_real")]
    pub proxy_after: f64,
}

/// An ordered stack of flattening layers with an optional PCA head.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatNetModel {
    pub ambient_dim: usize,
    pub hyperparams: Hyperparams,
    pub layers: Vec<FlatLayer>,
    pub head: Option<PcaHead>,
    pub log: Vec<LayerLog>,
    pub warnings: Vec<String>,
}

/// Fraction of the data diameter used as the flatness-proxy ball radius
/// throughout construction and evaluation.
pub const PROXY_ETA_FRACTION: f64 = 0.2;

/// Builds a FlatNet greedily on `cloud`.
///
/// Each iteration samples a base point uniformly from the current working
/// (partially flattened) dataset, estimates the local dimension warm-started
/// from the previous layer, selects the partition scale, fits the local
/// model, and applies the new layer to the working dataset. Candidates whose
/// curvature fit is rank-deficient or whose effective sample count falls
/// below the number of curvature unknowns are rejected and resampled;
/// rejections do not consume the layer budget but do count toward patience.
/// Construction halts early once the flatness proxy of the working dataset
/// has stopped improving for `patience` consecutive iterations.
pub fn construct(cloud: &PointCloud, hp: &Hyperparams, seed: u64) -> Result<FlatNetModel> {
    hp.validate()?;
    if cloud.len() < 2 {
        return Err(Error::param("cloud", "need at least two samples"));
    }
    let n = cloud.len();
    let dim = cloud.ambient_dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut working = cloud.data.clone();

    let mut model = FlatNetModel {
        ambient_dim: dim,
        hyperparams: hp.clone(),
        layers: Vec::new(),
        head: None,
        log: Vec::new(),
        warnings: Vec::new(),
    };

    let diam = cloud.diameter();
    let proxy_eta = if diam > 0.0 { PROXY_ETA_FRACTION * diam } else { 1.0 };
    // The halting proxy uses the mode of the attempted dimension estimates.
    // A single early misestimate (in particular d = D, whose rank-D residual
    // is identically zero) must not poison the whole halting series, so the
    // baseline is rebased whenever the mode moves.
    let mut dim_votes: Vec<usize> = Vec::new();
    let mut proxy_dim: Option<usize> = None;
    let mut proxy_initial = 0.0f64;
    let mut proxy_current = 0.0f64;
    let mut proxy_best = f64::INFINITY;

    fn vote_mode(votes: &[usize]) -> usize {
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for &v in votes {
            *counts.entry(v).or_insert(0) += 1;
        }
        *counts
            .iter()
            .max_by_key(|(d, c)| (**c, std::cmp::Reverse(**d)))
            .expect("votes non-empty")
            .0
    }

    let mut d_prev = 1usize;
    let mut no_progress = 0usize;
    let mut consecutive_rejects = 0usize;

    // Base points are drawn in shuffled epochs (uniform without replacement
    // within each sweep) so construction covers the whole cloud evenly
    // instead of hammering a region while neglecting others.
    let mut queue: Vec<usize> = Vec::new();

    while model.layers.len() < hp.l_max {
        if queue.is_empty() {
            queue = (0..n).collect();
            // Fisher-Yates from the construction stream.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                queue.swap(i, j);
            }
        }
        let candidate_index = queue.pop().expect("refilled above");
        let x0 = working.column(candidate_index).into_owned();
        let working_cloud = PointCloud::new(working.clone())?;

        let psi0 = PartitionOfUnity::new(x0.clone(), hp.lambda0, 1.0)?;
        let dim_est =
            estimate_local_dimension(&working_cloud, &x0, &psi0, hp.eps_dim, d_prev, &hp.stiefel)?;
        let d_hat = dim_est.d;

        dim_votes.push(d_hat);
        let mode = vote_mode(&dim_votes);
        if proxy_dim != Some(mode) {
            proxy_dim = Some(mode);
            proxy_initial = flatness_proxy(cloud, proxy_eta, mode).value;
            proxy_current = flatness_proxy(&working_cloud, proxy_eta, mode).value;
            proxy_best = proxy_current;
            no_progress = 0;
        }
        let pdim = proxy_dim.expect("set above");

        let selection = select_lambda(
            &working_cloud,
            &x0,
            d_hat,
            hp.eps_pou,
            hp.lambda_min,
            hp.lambda_max,
            &hp.stiefel,
        )?;
        if let Some(w) = &selection.warning {
            model.warnings.push(format!("layer {}: {w}", model.layers.len()));
        }
        let psi = finalize_pou(selection.lambda, selection.ell, hp.eps_pou, hp.alpha_max, x0.clone())?;

        // Degeneracy guards: rank-deficient curvature fit, or too few
        // effective samples for the d(d+1)/2 curvature unknowns.
        let needed = (d_hat * d_hat + d_hat) / 2;
        let ess = {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in 0..n {
                let w = psi.eval(&working.column(i).into_owned());
                let w2 = w * w;
                sum += w2;
                sum_sq += w2 * w2;
            }
            if sum_sq > 0.0 {
                sum * sum / sum_sq
            } else {
                0.0
            }
        };
        if !selection.fit.unique || ess < needed as f64 {
            model.warnings.push(format!(
                "candidate at index {candidate_index} rejected: unique={}, effective samples {ess:.1} < {needed}",
                selection.fit.unique
            ));
            consecutive_rejects += 1;
            no_progress += 1;
            if consecutive_rejects >= n {
                model.warnings.push("all candidate base points rejected in one sweep".to_string());
                break;
            }
            if no_progress >= hp.halt.patience {
                break;
            }
            continue;
        }
        consecutive_rejects = 0;

        let local = LocalQuadraticModel {
            base_point: x0,
            local_mean: psi.local_mean(&working_cloud),
            tangent: selection.fit.tangent.clone(),
            curvature: selection.fit.curvature.clone(),
        };
        let layer = FlatLayer::new(local, psi.clone())?;

        for i in 0..n {
            let mapped = layer.forward(&working.column(i).into_owned());
            if mapped.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePoint { index: i });
            }
            working.set_column(i, &mapped);
        }

        let flattened_cloud = PointCloud::new(working.clone())?;
        let proxy_after = flatness_proxy(&flattened_cloud, proxy_eta, pdim).value;
        model.log.push(LayerLog {
            x0_index: candidate_index,
            d_hat,
            lambda_hat: selection.lambda,
            alpha: psi.alpha(),
            ell_hat: selection.ell,
            loss: psi.alpha() * psi.alpha() * selection.ell,
            proxy_before: proxy_current,
            proxy_after,
        });
        model.layers.push(layer);
        d_prev = d_hat;

        // Progress means beating the best proxy seen so far; the flow is not
        // strictly monotone, so step-to-step comparisons would halt on
        // oscillation plateaus that still trend downward.
        let improvement = proxy_best - proxy_after;
        let threshold = hp.halt.flat_tol * proxy_initial.max(f64::MIN_POSITIVE);
        if improvement <= threshold {
            no_progress += 1;
        } else {
            no_progress = 0;
        }
        proxy_best = proxy_best.min(proxy_after);
        proxy_current = proxy_after;
        if no_progress >= hp.halt.patience {
            break;
        }
        // Converged outright: the working set is flat at the proxy scale.
        // Vacuous baselines (already-flat data, or a full-rank dimension
        // vote) stay on the patience path instead.
        if proxy_initial > 0.0 && proxy_after <= 1e-9 * proxy_initial {
            break;
        }
    }

    Ok(model)
}

impl FlatNetModel {
    /// An empty model (zero layers): both maps are the identity.
    pub fn empty(ambient_dim: usize, hyperparams: Hyperparams) -> Self {
        FlatNetModel {
            ambient_dim,
            hyperparams,
            layers: Vec::new(),
            head: None,
            log: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.ambient_dim {
            return Err(Error::param(
                "x",
                format!("ambient dimension {got} does not match model dimension {}", self.ambient_dim),
            ));
        }
        Ok(())
    }

    /// Applies all layers in order.
    pub fn flatten_point(&self, x: &Vector) -> Result<Vector> {
        self.check_dim(x.len())?;
        let mut z = x.clone();
        for layer in &self.layers {
            z = layer.forward(&z);
        }
        Ok(z)
    }

    /// Applies all backward maps in reverse order.
    pub fn reconstruct_point(&self, z: &Vector) -> Result<Vector> {
        self.check_dim(z.len())?;
        let mut x = z.clone();
        for layer in self.layers.iter().rev() {
            x = layer.backward(&x)?;
        }
        Ok(x)
    }

    /// Flattens a whole cloud, carrying intrinsic coordinates through.
    pub fn flatten(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.check_dim(cloud.ambient_dim())?;
        let mut data = Matrix::zeros(cloud.ambient_dim(), cloud.len());
        for i in 0..cloud.len() {
            data.set_column(i, &self.flatten_point(&cloud.point(i))?);
        }
        let mut out = PointCloud::with_coords(data, cloud.coords.clone())?;
        out.seed = cloud.seed;
        Ok(out)
    }

    /// Reconstructs a whole cloud of features.
    pub fn reconstruct(&self, features: &PointCloud) -> Result<PointCloud> {
        self.check_dim(features.ambient_dim())?;
        let mut data = Matrix::zeros(features.ambient_dim(), features.len());
        for i in 0..features.len() {
            data.set_column(i, &self.reconstruct_point(&features.point(i))?);
        }
        let mut out = PointCloud::with_coords(data, features.coords.clone())?;
        out.seed = features.seed;
        Ok(out)
    }

    /// Mode of the per-layer dimension estimates; ties break toward smaller.
    pub fn global_dimension(&self) -> Result<usize> {
        if self.log.is_empty() {
            return Err(Error::NoLayers);
        }
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for rec in &self.log {
            *counts.entry(rec.d_hat).or_insert(0) += 1;
        }
        let best = counts.iter().max_by_key(|(d, c)| (**c, std::cmp::Reverse(**d)));
        Ok(*best.expect("non-empty").0)
    }

    /// Fits the PCA head on the flattened features of `cloud`.
    ///
    /// The code dimension comes from `dim_override` when given, otherwise the
    /// mode of the per-layer estimates; for an untrained model it falls back
    /// to the numerical rank of the feature covariance.
    pub fn fit_head(&mut self, cloud: &PointCloud, dim_override: Option<usize>) -> Result<()> {
        let features = self.flatten(cloud)?;
        let n = features.len();
        let origin = features.centroid();
        let mut cov = Matrix::zeros(self.ambient_dim, self.ambient_dim);
        for i in 0..n {
            let d = features.point(i) - &origin;
            cov.ger(1.0 / n as f64, &d, &d, 1.0);
        }
        let covt = cov.transpose();
        cov = (cov + covt) * 0.5;

        let code_dim = match dim_override {
            Some(d) => {
                if d == 0 || d > self.ambient_dim {
                    return Err(Error::param("dim_override", format!("need 1 <= d <= {}", self.ambient_dim)));
                }
                d
            }
            None => match self.global_dimension() {
                Ok(d) => d,
                Err(Error::NoLayers) => {
                    // Pure-PCA fallback: numerical rank of the covariance.
                    let (_, values) = top_eigvectors(&cov, self.ambient_dim)?;
                    let total: f64 = values.iter().sum();
                    let mut trailing = total;
                    let mut d = self.ambient_dim;
                    for (k, v) in values.iter().enumerate() {
                        trailing -= v;
                        if trailing <= 1e-10 * total.max(f64::MIN_POSITIVE) {
                            d = k + 1;
                            break;
                        }
                    }
                    d
                }
                Err(e) => return Err(e),
            },
        };

        let (basis, _) = top_eigvectors(&cov, code_dim)?;
        self.head = Some(PcaHead { basis, origin });
        Ok(())
    }

    /// Minimal code of a point: `U_head^T (flatten(x) - z0)`.
    pub fn encode(&self, x: &Vector) -> Result<Vector> {
        let head = self.head.as_ref().ok_or(Error::MissingHead)?;
        let z = self.flatten_point(x)?;
        Ok(head.basis.transpose() * (z - &head.origin))
    }

    /// Reconstruction of a code: `reconstruct(U_head code + z0)`.
    pub fn decode(&self, code: &Vector) -> Result<Vector> {
        let head = self.head.as_ref().ok_or(Error::MissingHead)?;
        if code.len() != head.basis.ncols() {
            return Err(Error::param(
                "code",
                format!("code length {} does not match head dimension {}", code.len(), head.basis.ncols()),
            ));
        }
        let z = &head.basis * code + &head.origin;
        self.reconstruct_point(&z)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ModelFile::from_model(self);
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.into_model()
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    #[serde(with = "crate::serde_real::vec")]
    x0: Vec<f64>,
    #[serde(with = "crate::serde_real::vec")]
    xc: Vec<f64>,
    /// Row-major `D x d` tangent basis.
    #[serde(rename = "U", with = "crate::serde_real::vec")]
    u: Vec<f64>,
    /// Upper-triangular curvature slices in `(0,0), (0,1), ...` order.
    #[serde(rename = "V")]
    v: Vec<RealVec>,
    #[serde(with = "crate::serde_real")]
    lambda: f64,
    #[serde(with = "crate::serde_real")]
    alpha: f64,
}

/// A vector of reals encoded as decimal text.
#[derive(Serialize, Deserialize)]
struct RealVec(#[serde(with = "crate::serde_real::vec")] Vec<f64>);

#[derive(Serialize, Deserialize)]
struct HeadFile {
    /// Row-major `D x d` head basis.
    #[serde(rename = "U_head", with = "crate::serde_real::vec")]
    u_head: Vec<f64>,
    #[serde(with = "crate::serde_real::vec")]
    z0: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(rename = "D")]
    ambient_dim: usize,
    hyperparams: Hyperparams,
    layers: Vec<LayerFile>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    head: Option<HeadFile>,
    log: Vec<LayerLog>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    warnings: Vec<String>,
}

fn row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_row_major(field: &str, flat: &[f64], rows: usize) -> Result<Matrix> {
    if rows == 0 || flat.is_empty() || !flat.len().is_multiple_of(rows) {
        return Err(Error::schema(field, format!("length {} is not a multiple of D = {rows}", flat.len())));
    }
    let cols = flat.len() / rows;
    Ok(Matrix::from_row_slice(rows, cols, flat))
}

impl ModelFile {
    fn from_model(model: &FlatNetModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|layer| LayerFile {
                x0: layer.model.base_point.as_slice().to_vec(),
                xc: layer.model.local_mean.as_slice().to_vec(),
                u: row_major(&layer.model.tangent),
                v: layer
                    .model
                    .curvature
                    .upper_slices()
                    .iter()
                    .map(|s| RealVec(s.as_slice().to_vec()))
                    .collect(),
                lambda: layer.psi.lambda(),
                alpha: layer.psi.alpha(),
            })
            .collect();
        let head = model.head.as_ref().map(|h| HeadFile {
            u_head: row_major(&h.basis),
            z0: h.origin.as_slice().to_vec(),
        });
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            ambient_dim: model.ambient_dim,
            hyperparams: model.hyperparams.clone(),
            layers,
            head,
            log: model.log.clone(),
            warnings: model.warnings.clone(),
        }
    }

    fn into_model(self) -> Result<FlatNetModel> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: self.version, expected: MODEL_FORMAT_VERSION });
        }
        let dim = self.ambient_dim;
        if dim == 0 {
            return Err(Error::schema("D", "ambient dimension must be positive"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, lf) in self.layers.iter().enumerate() {
            let field = |name: &str| format!("layers[{idx}].{name}");
            if lf.x0.len() != dim {
                return Err(Error::schema(field("x0"), format!("expected {dim} entries, got {}", lf.x0.len())));
            }
            if lf.xc.len() != dim {
                return Err(Error::schema(field("xc"), format!("expected {dim} entries, got {}", lf.xc.len())));
            }
            let tangent = from_row_major(&field("U"), &lf.u, dim)?;
            let d = tangent.ncols();
            let expect_slices = d * (d + 1) / 2;
            if lf.v.len() != expect_slices {
                return Err(Error::schema(field("V"), format!("expected {expect_slices} slices, got {}", lf.v.len())));
            }
            let mut slices = Vec::with_capacity(expect_slices);
            for (s, rv) in lf.v.iter().enumerate() {
                if rv.0.len() != dim {
                    return Err(Error::schema(
                        format!("layers[{idx}].V[{s}]"),
                        format!("expected {dim} entries, got {}", rv.0.len()),
                    ));
                }
                slices.push(Vector::from_column_slice(&rv.0));
            }
            let curvature = SymTensor3::from_upper_slices(dim, d, slices)
                .map_err(|e| Error::schema(field("V"), e.to_string()))?;
            let base_point = Vector::from_column_slice(&lf.x0);
            let psi = PartitionOfUnity::new(base_point.clone(), lf.lambda, lf.alpha)
                .map_err(|e| Error::schema(field("lambda"), e.to_string()))?;
            let model = LocalQuadraticModel {
                base_point,
                local_mean: Vector::from_column_slice(&lf.xc),
                tangent,
                curvature,
            };
            let layer = FlatLayer::new(model, psi).map_err(|e| Error::schema(field("alpha"), e.to_string()))?;
            layers.push(layer);
        }
        let head = match &self.head {
            Some(h) => {
                let basis = from_row_major("head.U_head", &h.u_head, dim)?;
                if h.z0.len() != dim {
                    return Err(Error::schema("head.z0", format!("expected {dim} entries, got {}", h.z0.len())));
                }
                Some(PcaHead { basis, origin: Vector::from_column_slice(&h.z0) })
            }
            None => None,
        };
        Ok(FlatNetModel {
            ambient_dim: dim,
            hyperparams: self.hyperparams,
            layers,
            head,
            log: self.log,
            warnings: self.warnings,
        })
    }
}
