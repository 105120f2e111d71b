//! Synthetic manifold datasets and CSV persistence.
//!
//! All generators are driven by a ChaCha20 stream cipher RNG, seeded from a
//! `u64` and split into one stream per logical source of randomness (stream 0
//! for intrinsic coordinates, streams 1.. for per-ambient-coordinate noise),
//! so the same seed reproduces the same cloud on every platform.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::linalg::{cholesky_jitter, Matrix, Vector};
use crate::Result;

/// A set of `N` ambient points in `R^D`, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// `D x N` data matrix.
    pub data: Matrix,
    /// Generating intrinsic coordinates, `d x N`, kept for synthetic data.
    pub coords: Option<Matrix>,
    /// Seed used to generate the cloud, when it came from a generator.
    pub seed: Option<u64>,
}

impl PointCloud {
    pub fn new(data: Matrix) -> Result<Self> {
        Self::with_coords(data, None)
    }

    pub fn with_coords(data: Matrix, coords: Option<Matrix>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::param("data", "point cloud must contain at least one point"));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePoint { index: bad / data.nrows() });
        }
        if let Some(c) = &coords {
            if c.ncols() != data.ncols() {
                return Err(Error::param(
                    "coords",
                    format!("coordinate count {} != sample count {}", c.ncols(), data.ncols()),
                ));
            }
            if let Some(bad) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinitePoint { index: bad / c.nrows() });
            }
        }
        Ok(PointCloud { data, coords, seed: None })
    }

    /// Ambient dimension `D`.
    pub fn ambient_dim(&self) -> usize {
        self.data.nrows()
    }

    /// Sample count `N`.
    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn point(&self, i: usize) -> Vector {
        self.data.column(i).into_owned()
    }

    pub fn centroid(&self) -> Vector {
        let mut c = Vector::zeros(self.ambient_dim());
        for j in 0..self.len() {
            c += self.data.column(j);
        }
        c / self.len() as f64
    }

    /// Mean squared distance to the centroid (trace of the covariance).
    pub fn total_variance(&self) -> f64 {
        let c = self.centroid();
        let mut acc = 0.0;
        for j in 0..self.len() {
            acc += (self.data.column(j) - &c).norm_squared();
        }
        acc / self.len() as f64
    }

    /// Largest pairwise distance. Quadratic in `N`; fine at desk scale.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (self.data.column(i) - self.data.column(j)).norm_squared();
                best = best.max(d);
            }
        }
        best.sqrt()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples a random manifold with intrinsic dimension `d` embedded in `R^D`.
///
/// Intrinsic coordinates are uniform on `[0, 1]^d`. Each ambient coordinate
/// `i` is an independent Gaussian-process draw over those coordinates with
/// covariance `(L_i / D) * exp(-||c_p - c_q||^2 / 2)`, factored by a jittered
/// Cholesky and pushed through a standard normal vector from stream `i + 1`.
pub fn gen_gp_manifold(
    intrinsic_dim: usize,
    ambient_dim: usize,
    n: usize,
    length_scales: Option<&[f64]>,
    seed: u64,
) -> Result<PointCloud> {
    if intrinsic_dim == 0 || intrinsic_dim >= ambient_dim {
        return Err(Error::param("intrinsic_dim", format!("need 1 <= d < D, got d={intrinsic_dim}, D={ambient_dim}")));
    }
    if n < 2 {
        return Err(Error::param("n", "need at least two samples"));
    }
    let scales: Vec<f64> = match length_scales {
        Some(l) => {
            if l.len() != ambient_dim {
                return Err(Error::param("length_scales", format!("expected {ambient_dim} entries, got {}", l.len())));
            }
            l.to_vec()
        }
        None => vec![1.0; ambient_dim],
    };

    let mut coord_rng = stream_rng(seed, 0);
    let coords = Matrix::from_fn(intrinsic_dim, n, |_, _| coord_rng.random::<f64>());

    // Squared-distance kernel over intrinsic coordinates, shared by all rows.
    let kernel = Matrix::from_fn(n, n, |p, q| {
        let rho = (coords.column(p) - coords.column(q)).norm_squared();
        (-rho / 2.0).exp()
    });

    let uniform_scale = scales.iter().all(|&s| s == scales[0]);
    let mut cached: Option<crate::linalg::JitteredCholesky> = None;

    let mut data = Matrix::zeros(ambient_dim, n);
    for i in 0..ambient_dim {
        let factor = scales[i] / ambient_dim as f64;
        let chol = if uniform_scale {
            if cached.is_none() {
                let sigma = &kernel * factor;
                let jitter0 = 1e-10 * sigma.trace() / n as f64;
                cached = Some(cholesky_jitter(&sigma, jitter0)?);
            }
            cached.clone().unwrap()
        } else {
            let sigma = &kernel * factor;
            let jitter0 = 1e-10 * sigma.trace() / n as f64;
            cholesky_jitter(&sigma, jitter0)?
        };
        let mut rng = stream_rng(seed, i as u64 + 1);
        let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let row = &chol.l * xi;
        for p in 0..n {
            data[(i, p)] = row[p];
        }
    }

    let mut cloud = PointCloud::with_coords(data, Some(coords))?;
    cloud.seed = Some(seed);
    Ok(cloud)
}

/// Points on the graph of `y = amplitude * sin(frequency * x)` over one period,
/// with optional Gaussian observation noise on `y`.
pub fn gen_sine(n: usize, amplitude: f64, frequency: f64, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    if n < 2 {
        return Err(Error::param("n", "need at least two samples"));
    }
    if frequency <= 0.0 {
        return Err(Error::param("frequency", "must be positive"));
    }
    let period = std::f64::consts::TAU / frequency;
    let mut coord_rng = stream_rng(seed, 0);
    let mut noise_rng = stream_rng(seed, 1);
    let mut data = Matrix::zeros(2, n);
    let mut coords = Matrix::zeros(1, n);
    for p in 0..n {
        let x = coord_rng.random::<f64>() * period;
        let eps: f64 = if noise_sigma > 0.0 { StandardNormal.sample(&mut noise_rng) } else { 0.0 };
        data[(0, p)] = x;
        data[(1, p)] = amplitude * (frequency * x).sin() + noise_sigma * eps;
        coords[(0, p)] = x;
    }
    let mut cloud = PointCloud::with_coords(data, Some(coords))?;
    cloud.seed = Some(seed);
    Ok(cloud)
}

/// Points on an arc of a circle with radial Gaussian noise.
pub fn gen_circle(n: usize, radius: f64, arc_fraction: f64, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    if n < 2 {
        return Err(Error::param("n", "need at least two samples"));
    }
    if !(arc_fraction > 0.0 && arc_fraction <= 1.0) {
        return Err(Error::param("arc_fraction", "must lie in (0, 1]"));
    }
    let mut coord_rng = stream_rng(seed, 0);
    let mut noise_rng = stream_rng(seed, 1);
    let mut data = Matrix::zeros(2, n);
    let mut coords = Matrix::zeros(1, n);
    for p in 0..n {
        let theta = coord_rng.random::<f64>() * arc_fraction * std::f64::consts::TAU;
        let eps: f64 = if noise_sigma > 0.0 { StandardNormal.sample(&mut noise_rng) } else { 0.0 };
        let r = radius + noise_sigma * eps;
        data[(0, p)] = r * theta.cos();
        data[(1, p)] = r * theta.sin();
        coords[(0, p)] = theta;
    }
    let mut cloud = PointCloud::with_coords(data, Some(coords))?;
    cloud.seed = Some(seed);
    Ok(cloud)
}

/// The Swiss roll `(t cos t, h, t sin t)` with `t` in `[1.5 pi, 4.5 pi]` and
/// `h` in `[0, 21]`. When `augmented`, a fourth coordinate `x1^2 + x3^2` is
/// appended, which unrolls the self-inward curl.
pub fn gen_swiss_roll(n: usize, augmented: bool, seed: u64) -> Result<PointCloud> {
    if n < 2 {
        return Err(Error::param("n", "need at least two samples"));
    }
    let mut t_rng = stream_rng(seed, 0);
    let mut h_rng = stream_rng(seed, 1);
    let dim = if augmented { 4 } else { 3 };
    let mut data = Matrix::zeros(dim, n);
    let mut coords = Matrix::zeros(2, n);
    for p in 0..n {
        let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * t_rng.random::<f64>());
        let h = 21.0 * h_rng.random::<f64>();
        let x1 = t * t.cos();
        let x3 = t * t.sin();
        data[(0, p)] = x1;
        data[(1, p)] = h;
        data[(2, p)] = x3;
        if augmented {
            data[(3, p)] = x1 * x1 + x3 * x3;
        }
        coords[(0, p)] = t;
        coords[(1, p)] = h;
    }
    let mut cloud = PointCloud::with_coords(data, Some(coords))?;
    cloud.seed = Some(seed);
    Ok(cloud)
}

/// Formats a real as decimal text with 17 significant digits; parsing the
/// result recovers the exact `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn sibling_coords_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}_coords.{e}"),
        None => format!("{stem}_coords"),
    };
    path.with_file_name(name)
}

fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# D={} N={}", m.nrows(), m.ncols()).expect("string write");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_real(m[(i, j)])).collect();
        writeln!(out, "{}", row.join(",")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::CsvFormat { path: display.clone(), line: 1, message: "empty file".into() })?;
    let header = header.trim();
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| Error::CsvFormat {
            path: display.clone(),
            line: header_line + 1,
            message: "missing `# D=<int> N=<int>` header".into(),
        })?
        .trim();
    let mut dim = None;
    let mut count = None;
    for part in body.split_whitespace() {
        if let Some(v) = part.strip_prefix("D=") {
            dim = v.parse::<usize>().ok();
        } else if let Some(v) = part.strip_prefix("N=") {
            count = v.parse::<usize>().ok();
        }
    }
    let (dim, count) = match (dim, count) {
        (Some(d), Some(n)) if d > 0 && n > 0 => (d, n),
        _ => {
            return Err(Error::CsvFormat {
                path: display,
                line: header_line + 1,
                message: format!("malformed header `{header}`"),
            })
        }
    };

    let mut data = Matrix::zeros(dim, count);
    let mut rows_seen = 0usize;
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if rows_seen >= dim {
            return Err(Error::CsvFormat {
                path: display,
                line: idx + 1,
                message: format!("more than {dim} data rows"),
            });
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != count {
            return Err(Error::CsvFormat {
                path: display,
                line: idx + 1,
                message: format!("expected {count} columns, found {}", cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvFormat {
                path: display.clone(),
                line: idx + 1,
                message: format!("non-numeric cell `{}` in column {}", cell.trim(), j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvFormat {
                    path: display.clone(),
                    line: idx + 1,
                    message: format!("non-finite cell in column {}", j + 1),
                });
            }
            data[(rows_seen, j)] = v;
        }
        rows_seen += 1;
    }
    if rows_seen != dim {
        return Err(Error::CsvFormat {
            path: display,
            line: rows_seen + 1,
            message: format!("expected {dim} data rows, found {rows_seen}"),
        });
    }
    Ok(data)
}

/// Writes `X` to `path` and, when intrinsic coordinates are present, writes
/// them to the sibling file `<stem>_coords.<ext>`.
pub fn save_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_matrix_csv(&cloud.data, path)?;
    if let Some(c) = &cloud.coords {
        write_matrix_csv(c, &sibling_coords_path(path))?;
    }
    Ok(())
}

/// Loads `X` from `path`, picking up intrinsic coordinates from the sibling
/// `<stem>_coords.<ext>` file when it exists.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let data = read_matrix_csv(path)?;
    let coords_path = sibling_coords_path(path);
    let coords = if coords_path.exists() { Some(read_matrix_csv(&coords_path)?) } else { None };
    PointCloud::with_coords(data, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gp_diagonal_covariance_value() {
        // With rho = 0 on the diagonal, every variance is L_i / D.
        let d = 2;
        let big_d = 5;
        let n = 20;
        let cloud = gen_gp_manifold(d, big_d, n, None, 3).unwrap();
        assert_eq!(cloud.ambient_dim(), big_d);
        assert_eq!(cloud.len(), n);
        let coords = cloud.coords.as_ref().unwrap();
        assert_eq!(coords.nrows(), d);
        // Rebuild the covariance for row 0 and check the diagonal.
        let sigma = Matrix::from_fn(n, n, |p, q| {
            let rho = (coords.column(p) - coords.column(q)).norm_squared();
            (1.0 / big_d as f64) * (-rho / 2.0).exp()
        });
        for p in 0..n {
            assert_abs_diff_eq!(sigma[(p, p)], 1.0 / big_d as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn gp_identical_coordinates_give_identical_columns() {
        // Force duplicate intrinsic coordinates by construction: sample a cloud,
        // then overwrite its kernel path manually. Easier: two samples with the
        // same coordinates arise with a 1-point grid trick, so instead check the
        // correlation directly: draw with d=1 and verify nearly-equal coords give
        // nearly-equal columns. Exact duplicates are exercised in the Cholesky
        // jitter unit test.
        let cloud = gen_gp_manifold(1, 3, 40, None, 9).unwrap();
        let coords = cloud.coords.as_ref().unwrap();
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for p in 0..cloud.len() {
            for q in (p + 1)..cloud.len() {
                pairs.push((p, q, (coords[(0, p)] - coords[(0, q)]).abs()));
            }
        }
        pairs.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
        let (p, q, gap) = pairs[0];
        let col_gap = (cloud.data.column(p) - cloud.data.column(q)).norm();
        // Columns shrink together with the coordinate gap: correlation near 1.
        assert!(col_gap < 10.0 * (gap + 1e-3).sqrt(), "col_gap={col_gap}, coord gap={gap}");
    }

    #[test]
    fn gp_monte_carlo_covariance() {
        // Empirical covariance over redraws approaches Sigma_i within 10%
        // Frobenius. Redraws vary the noise streams only, keeping coordinates
        // fixed, by regenerating with the same seed for coordinates but a
        // different seed for the data stream: easiest honest check is to fix
        // a tiny kernel by hand.
        let n = 20;
        let trials = 5000;
        let coords: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let sigma = Matrix::from_fn(n, n, |p, q| {
            (-(coords[p] - coords[q]).powi(2) / 2.0).exp() / 2.0
        });
        let jitter0 = 1e-10 * sigma.trace() / n as f64;
        let chol = cholesky_jitter(&sigma, jitter0).unwrap();
        let mut acc = Matrix::zeros(n, n);
        let mut rng = stream_rng(123, 1);
        for _ in 0..trials {
            let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let row = &chol.l * xi;
            acc += &row * row.transpose();
        }
        acc /= trials as f64;
        let err = (&acc - &sigma).norm() / sigma.norm();
        assert!(err < 0.10, "relative Frobenius error {err}");
    }

    #[test]
    fn sine_noiseless_on_curve() {
        let cloud = gen_sine(50, 1.3, 2.0, 0.0, 5).unwrap();
        assert_eq!(cloud.ambient_dim(), 2);
        assert_eq!(cloud.len(), 50);
        for p in 0..cloud.len() {
            let x = cloud.data[(0, p)];
            assert_abs_diff_eq!(cloud.data[(1, p)], 1.3 * (2.0 * x).sin(), epsilon = 1e-14);
        }
    }

    #[test]
    fn sine_zero_amplitude_is_segment() {
        let cloud = gen_sine(30, 0.0, 1.0, 0.0, 5).unwrap();
        for p in 0..cloud.len() {
            assert_eq!(cloud.data[(1, p)], 0.0);
        }
    }

    #[test]
    fn circle_three_quarters_leaves_gap() {
        let cloud = gen_circle(300, 1.0, 0.75, 0.0, 11).unwrap();
        let coords = cloud.coords.as_ref().unwrap();
        for p in 0..cloud.len() {
            assert!(coords[(0, p)] < 0.75 * std::f64::consts::TAU);
        }
    }

    #[test]
    fn circle_noiseless_has_exact_radius() {
        let cloud = gen_circle(64, 2.5, 1.0, 0.0, 1).unwrap();
        for p in 0..cloud.len() {
            assert_abs_diff_eq!(cloud.data.column(p).norm(), 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn circle_noisy_mean_radius() {
        let n = 200;
        let sigma = 0.05;
        let cloud = gen_circle(n, 1.0, 1.0, sigma, 77).unwrap();
        let mean_r: f64 = (0..n).map(|p| cloud.data.column(p).norm()).sum::<f64>() / n as f64;
        assert!((mean_r - 1.0).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn swiss_roll_dims_and_augmented_feature() {
        let plain = gen_swiss_roll(100, false, 2).unwrap();
        assert_eq!(plain.ambient_dim(), 3);
        let aug = gen_swiss_roll(100, true, 2).unwrap();
        assert_eq!(aug.ambient_dim(), 4);
        for p in 0..aug.len() {
            let expect = aug.data[(0, p)].powi(2) + aug.data[(2, p)].powi(2);
            assert_eq!(aug.data[(3, p)], expect);
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let a = gen_gp_manifold(2, 6, 30, None, 42).unwrap();
        let b = gen_gp_manifold(2, 6, 30, None, 42).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.coords, b.coords);
        let c = gen_gp_manifold(2, 6, 30, None, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn csv_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.csv");
        let cloud = gen_sine(17, 1.0, 1.0, 0.05, 9).unwrap();
        save_csv(&cloud, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(cloud.data, loaded.data);
        assert_eq!(cloud.coords, loaded.coords);
        let first = std::fs::read(&path).unwrap();
        save_csv(&loaded, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn csv_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::CsvFormat { .. })));
    }

    #[test]
    fn csv_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.csv");
        std::fs::write(&path, "# D=3 N=4\n1,2,3,4\n5,6,7,8\n9,10,11,12\n").unwrap();
        let cloud = load_csv(&path).unwrap();
        assert_eq!(cloud.ambient_dim(), 3);
        assert_eq!(cloud.len(), 4);
        assert_eq!(cloud.data[(2, 3)], 12.0);
    }

    #[test]
    fn csv_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# D=2 N=2\n1,2\n3,oops\n").unwrap();
        match load_csv(&path) {
            Err(Error::CsvFormat { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected CSV error, got {other:?}"),
        }
    }

    #[test]
    fn csv_inconsistent_width_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "# D=2 N=3\n1,2,3\n4,5\n").unwrap();
        match load_csv(&path) {
            Err(Error::CsvFormat { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected CSV error, got {other:?}"),
        }
    }
}
