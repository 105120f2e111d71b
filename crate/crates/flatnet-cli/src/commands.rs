//! Implementations of the five subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flatnet_core::dataset::{self, format_real, PointCloud};
use flatnet_core::linalg::{top_eigvectors, Matrix, Vector};
use flatnet_core::local_model::Hyperparams;
use flatnet_core::metrics::{self, DimEstimates, EvalReport};
use flatnet_core::network::{self, FlatNetModel, PROXY_ETA_FRACTION};
use flatnet_core::flow;

use crate::config::{resolve, ConfigFile, Resolved};
use crate::svg::{self, ScatterGroup};
use crate::{Cli, Command, Failure, GenKind, HyperOpts};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.get::<u64>("seed")?.unwrap_or(0),
    };
    match cli.command {
        Command::Gen { kind } => run_gen(kind, seed, &out_dir, &cfg),
        Command::Train { data, hyper } => run_train(&data, &hyper, seed, &out_dir, &cfg),
        Command::Eval { model, data, edm, interpolate, k } => {
            run_eval(&model, &data, edm, interpolate, k, seed, &out_dir, &cfg)
        }
        Command::Flow { data, steps, h, lambda, d, record_every } => {
            run_flow(&data, steps, h, lambda, d, record_every, seed, &out_dir, &cfg)
        }
        Command::Dimsweep { d_list, ambient, n, trials, hyper } => {
            run_dimsweep(&d_list, ambient, n, trials, &hyper, seed, &out_dir, &cfg)
        }
    }
}

fn ensure_out(out_dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

fn load_cloud(path: &Path) -> Result<PointCloud, Failure> {
    if !path.exists() {
        return Err(Failure::data(format!("dataset not found: {}", path.display())));
    }
    Ok(dataset::load_csv(path)?)
}

// ---------------------------------------------------------------- gen

fn run_gen(kind: GenKind, seed: u64, out_dir: &Path, cfg: &ConfigFile) -> Result<(), Failure> {
    let mut resolved = Resolved::new("gen");
    resolved.set("seed", seed);

    let cloud = match kind {
        GenKind::Gp { d, ambient, n, scale } => {
            resolved.set("kind", "gp");
            let d = resolve(d, cfg, "d", 2usize, &mut resolved)?;
            let ambient = resolve(ambient, cfg, "D", 10usize, &mut resolved)?;
            let n = resolve(n, cfg, "n", 500usize, &mut resolved)?;
            let scales = if scale.is_empty() { vec![1.0; ambient] } else { scale };
            if scales.len() != ambient {
                return Err(Failure::usage(format!(
                    "--scale needs {ambient} entries, got {}",
                    scales.len()
                )));
            }
            resolved.set("scale", scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
            dataset::gen_gp_manifold(d, ambient, n, Some(&scales), seed)?
        }
        GenKind::Sine { n, amplitude, frequency, noise } => {
            resolved.set("kind", "sine");
            let n = resolve(n, cfg, "n", 50usize, &mut resolved)?;
            let amplitude = resolve(amplitude, cfg, "amplitude", 1.0, &mut resolved)?;
            let frequency = resolve(frequency, cfg, "frequency", 1.0, &mut resolved)?;
            let noise = resolve(noise, cfg, "noise", 0.05, &mut resolved)?;
            dataset::gen_sine(n, amplitude, frequency, noise, seed)?
        }
        GenKind::Circle { n, radius, arc_fraction, noise } => {
            resolved.set("kind", "circle");
            let n = resolve(n, cfg, "n", 200usize, &mut resolved)?;
            let radius = resolve(radius, cfg, "radius", 1.0, &mut resolved)?;
            let arc_fraction = resolve(arc_fraction, cfg, "arc_fraction", 1.0, &mut resolved)?;
            let noise = resolve(noise, cfg, "noise", 0.05, &mut resolved)?;
            dataset::gen_circle(n, radius, arc_fraction, noise, seed)?
        }
        GenKind::Swissroll { n, augmented } => {
            resolved.set("kind", "swissroll");
            let n = resolve(n, cfg, "n", 3000usize, &mut resolved)?;
            resolved.set("augmented", augmented);
            dataset::gen_swiss_roll(n, augmented, seed)?
        }
    };

    ensure_out(out_dir)?;
    let data_path = out_dir.join("data.csv");
    dataset::save_csv(&cloud, &data_path)?;
    resolved.set("data_file", data_path.display());
    resolved.write(out_dir)?;
    println!("wrote {} (D={}, N={})", data_path.display(), cloud.ambient_dim(), cloud.len());
    Ok(())
}

// ---------------------------------------------------------------- train

fn resolve_hyperparams(
    opts: &HyperOpts,
    cfg: &ConfigFile,
    cloud: &PointCloud,
    resolved: &mut Resolved,
) -> Result<Hyperparams, Failure> {
    let defaults = Hyperparams::for_data(cloud);
    let mut hp = defaults.clone();
    hp.eps_dim = resolve(opts.eps_dim, cfg, "eps_dim", defaults.eps_dim, resolved)?;
    hp.lambda0 = resolve(opts.lambda0, cfg, "lambda0", defaults.lambda0, resolved)?;
    hp.eps_pou = resolve(opts.eps_pou, cfg, "eps_pou", defaults.eps_pou, resolved)?;
    hp.lambda_max = resolve(opts.lambda_max, cfg, "lambda_max", defaults.lambda_max, resolved)?;
    hp.lambda_min = resolve(opts.lambda_min, cfg, "lambda_min", defaults.lambda_min, resolved)?;
    hp.alpha_max = resolve(opts.alpha_max, cfg, "alpha_max", defaults.alpha_max, resolved)?;
    hp.l_max = resolve(opts.l_max, cfg, "l_max", defaults.l_max, resolved)?;
    hp.halt.patience = resolve(opts.patience, cfg, "patience", defaults.halt.patience, resolved)?;
    hp.halt.flat_tol = resolve(opts.flat_tol, cfg, "flat_tol", defaults.halt.flat_tol, resolved)?;
    hp.stiefel.max_iters =
        resolve(opts.stiefel_max_iters, cfg, "stiefel_max_iters", defaults.stiefel.max_iters, resolved)?;
    hp.stiefel.step0 = resolve(opts.stiefel_step0, cfg, "stiefel_step0", defaults.stiefel.step0, resolved)?;
    hp.stiefel.grad_tol =
        resolve(opts.stiefel_grad_tol, cfg, "stiefel_grad_tol", defaults.stiefel.grad_tol, resolved)?;
    hp.validate().map_err(Failure::from)?;
    Ok(hp)
}

fn training_log_csv(model: &FlatNetModel) -> String {
    let mut out = String::from("layer,x0_index,d_hat,lambda_hat,alpha,ell_hat,loss,proxy\n");
    for (i, rec) in model.log.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            i + 1,
            rec.x0_index,
            rec.d_hat,
            format_real(rec.lambda_hat),
            format_real(rec.alpha),
            format_real(rec.ell_hat),
            format_real(rec.loss),
            format_real(rec.proxy_after),
        )
        .unwrap();
    }
    out
}

fn run_train(
    data: &Path,
    opts: &HyperOpts,
    seed: u64,
    out_dir: &Path,
    cfg: &ConfigFile,
) -> Result<(), Failure> {
    let cloud = load_cloud(data)?;
    let mut resolved = Resolved::new("train");
    resolved.set("seed", seed);
    resolved.set("data", data.display());
    let hp = resolve_hyperparams(opts, cfg, &cloud, &mut resolved)?;

    let mut model = network::construct(&cloud, &hp, seed)?;
    model.fit_head(&cloud, None)?;

    ensure_out(out_dir)?;
    let model_path = out_dir.join("model.json");
    model.save(&model_path)?;
    std::fs::write(out_dir.join("training_log.csv"), training_log_csv(&model))?;
    resolved.set("model_file", model_path.display());
    resolved.write(out_dir)?;
    for w in &model.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "trained {} layers (global dimension {}), wrote {}",
        model.layers.len(),
        model.global_dimension().map(|d| d.to_string()).unwrap_or_else(|_| "-".to_string()),
        model_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

/// Shared 2D projection: identity in the plane, top two principal axes
/// of the reference cloud otherwise.
fn plot_projection(reference: &PointCloud) -> Result<Matrix, Failure> {
    let dim = reference.ambient_dim();
    if dim == 2 {
        return Ok(Matrix::identity(2, 2).transpose());
    }
    let mean = reference.centroid();
    let mut cov = Matrix::zeros(dim, dim);
    for i in 0..reference.len() {
        let d = reference.point(i) - &mean;
        cov.ger(1.0 / reference.len() as f64, &d, &d, 1.0);
    }
    let covt = cov.transpose();
    cov = (cov + covt) * 0.5;
    let (basis, _) = top_eigvectors(&cov, 2).map_err(Failure::from)?;
    Ok(basis)
}

fn project_points(cloud: &Matrix, basis: &Matrix) -> Vec<(f64, f64)> {
    let proj = basis.transpose() * cloud;
    (0..proj.ncols()).map(|i| (proj[(0, i)], proj[(1, i)])).collect()
}

/// Decoded convex interpolants between training codes. For one-dimensional
/// codes this traces the learned curve; otherwise consecutive code pairs are
/// bridged.
fn decode_interpolants(model: &FlatNetModel, cloud: &PointCloud, per_gap: usize) -> Result<Vec<Vector>, Failure> {
    let mut codes = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        codes.push(model.encode(&cloud.point(i))?);
    }
    let head_dim = codes[0].len();
    let mut out = Vec::new();
    if head_dim == 1 {
        let mut scalars: Vec<f64> = codes.iter().map(|c| c[0]).collect();
        scalars.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in scalars.windows(2) {
            for t in 0..per_gap {
                let alpha = t as f64 / per_gap as f64;
                let code = Vector::from_column_slice(&[pair[0] * (1.0 - alpha) + pair[1] * alpha]);
                out.push(model.decode(&code)?);
            }
        }
        out.push(model.decode(&Vector::from_column_slice(&[*scalars.last().unwrap()]))?);
    } else {
        for pair in codes.windows(2) {
            for t in 0..=per_gap {
                let alpha = t as f64 / per_gap as f64;
                let code = &pair[0] * (1.0 - alpha) + &pair[1] * alpha;
                out.push(model.decode(&code)?);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    model_path: &Path,
    data: &Path,
    edm: bool,
    interpolate: bool,
    k: Option<usize>,
    seed: u64,
    out_dir: &Path,
    cfg: &ConfigFile,
) -> Result<(), Failure> {
    if !model_path.exists() {
        return Err(Failure::data(format!("model not found: {}", model_path.display())));
    }
    let model = FlatNetModel::load(model_path)?;
    let cloud = load_cloud(data)?;
    let mut resolved = Resolved::new("eval");
    resolved.set("seed", seed);
    resolved.set("model", model_path.display());
    resolved.set("data", data.display());
    resolved.set("edm", edm);
    resolved.set("interpolate", interpolate);
    let k = resolve(k, cfg, "k", 10usize, &mut resolved)?;

    if interpolate && model.head.is_none() {
        return Err(Failure::data("interpolation requested but the model has no PCA head".to_string()));
    }
    if edm && cloud.coords.is_none() {
        return Err(Failure::data(
            "--edm needs intrinsic coordinates (sibling *_coords.csv file) for this dataset".to_string(),
        ));
    }

    let recon_error = metrics::reconstruction_error(&model, &cloud)?;
    let features = model.flatten(&cloud)?;

    let diam = cloud.diameter();
    let eta = if diam > 0.0 { PROXY_ETA_FRACTION * diam } else { 1.0 };
    let proxy_dim = model
        .head
        .as_ref()
        .map(|h| h.basis.ncols())
        .or_else(|| model.global_dimension().ok())
        .unwrap_or(1);
    resolved.set("proxy_eta", format_real(eta));
    resolved.set("proxy_dim", proxy_dim);
    let proxy = metrics::flatness_proxy(&cloud, eta, proxy_dim);

    let mle = metrics::mle_dimension(&cloud, k)?;
    let twonn = metrics::twonn_dimension(&cloud)?;

    let edm_result = if edm {
        Some(metrics::edm_distortion(&features, cloud.coords.as_ref().expect("checked above"))?)
    } else {
        None
    };

    let report = EvalReport {
        recon_error,
        flatness_proxy: proxy.value,
        dim_estimates: DimEstimates {
            flatnet: model.global_dimension().ok(),
            mle: mle.value,
            twonn: twonn.value,
        },
        edm_ratio_stats: edm_result.as_ref().map(|r| r.stats.clone()),
    };

    ensure_out(out_dir)?;
    let report_path = out_dir.join("report.json");
    let mut report_text = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure { code: crate::EXIT_DATA, message: e.to_string() })?;
    report_text.push('\n');
    std::fs::write(&report_path, report_text)?;

    if let Some(r) = &edm_result {
        let mut csv = String::new();
        for i in 0..r.normalized.nrows() {
            let row: Vec<String> = (0..r.normalized.ncols()).map(|j| format_real(r.normalized[(i, j)])).collect();
            writeln!(csv, "{}", row.join(",")).unwrap();
        }
        std::fs::write(out_dir.join("edm.csv"), csv)?;
        std::fs::write(out_dir.join("edm.svg"), svg::heatmap(&r.normalized))?;
    }

    if cloud.ambient_dim() == 2 || cloud.ambient_dim() == 3 {
        let basis = plot_projection(&cloud)?;
        let mut groups = vec![
            ScatterGroup {
                id: "data",
                color: "#1f77b4",
                points: project_points(&cloud.data, &basis),
                polyline: false,
            },
            ScatterGroup {
                id: "features",
                color: "#d62728",
                points: project_points(&features.data, &basis),
                polyline: false,
            },
        ];
        if model.head.is_some() {
            let interpolants = decode_interpolants(&model, &cloud, 10)?;
            let mut m = Matrix::zeros(cloud.ambient_dim(), interpolants.len());
            for (i, p) in interpolants.iter().enumerate() {
                m.set_column(i, p);
            }
            let head_dim = model.head.as_ref().map(|h| h.basis.ncols()).unwrap_or(1);
            groups.push(ScatterGroup {
                id: "interpolants",
                color: "#2ca02c",
                points: project_points(&m, &basis),
                polyline: head_dim == 1,
            });
        }
        std::fs::write(out_dir.join("scatter.svg"), svg::scatter(&groups))?;
    }

    resolved.write(out_dir)?;
    println!(
        "recon_error={} proxy={} dims: flatnet={} mle={:.2} twonn={:.2}",
        format_real(recon_error),
        format_real(proxy.value),
        report.dim_estimates.flatnet.map(|d| d.to_string()).unwrap_or_else(|| "-".to_string()),
        mle.value,
        twonn.value
    );
    Ok(())
}

// ---------------------------------------------------------------- flow

#[allow(clippy::too_many_arguments)]
fn run_flow(
    data: &Path,
    steps: Option<usize>,
    h: Option<f64>,
    lambda: Option<f64>,
    d: Option<usize>,
    record_every: Option<usize>,
    seed: u64,
    out_dir: &Path,
    cfg: &ConfigFile,
) -> Result<(), Failure> {
    let cloud = load_cloud(data)?;
    let mut resolved = Resolved::new("flow");
    resolved.set("seed", seed);
    resolved.set("data", data.display());

    let steps = resolve(steps, cfg, "steps", 200usize, &mut resolved)?;
    let h = resolve(h, cfg, "h", 0.5f64, &mut resolved)?;
    let diam = cloud.diameter();
    let default_lambda = if diam > 0.0 {
        std::f64::consts::LN_2 / (0.2 * diam).powi(2)
    } else {
        1.0
    };
    let lambda = resolve(lambda, cfg, "lambda", default_lambda, &mut resolved)?;
    let d = resolve(d, cfg, "d", 1usize, &mut resolved)?;
    let record_every = resolve(record_every, cfg, "record_every", 10usize, &mut resolved)?;

    if steps == 0 {
        return Err(Failure::usage("--steps must be at least 1".to_string()));
    }

    let trajectory = flow::simulate(&cloud, steps, h, lambda, d, record_every)?;

    ensure_out(out_dir)?;
    for (step, snapshot) in &trajectory.snapshots {
        dataset::save_csv(snapshot, out_dir.join(format!("snapshot_{step:06}.csv")))?;
    }
    let mut proxy_csv = String::from("step,proxy\n");
    for (step, value) in &trajectory.proxies {
        writeln!(proxy_csv, "{step},{}", format_real(*value)).unwrap();
    }
    std::fs::write(out_dir.join("proxy.csv"), proxy_csv)?;
    resolved.write(out_dir)?;
    let first = trajectory.proxies.first().map(|p| p.1).unwrap_or(0.0);
    let last = trajectory.proxies.last().map(|p| p.1).unwrap_or(0.0);
    println!("flow: {} snapshots, proxy {} -> {}", trajectory.snapshots.len(), format_real(first), format_real(last));
    Ok(())
}

// ---------------------------------------------------------------- dimsweep

struct TrialRow {
    d_true: usize,
    flatnet: usize,
    mle: f64,
    twonn: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[allow(clippy::too_many_arguments)]
fn run_dimsweep(
    d_list: &[usize],
    ambient: Option<usize>,
    n: Option<usize>,
    trials: Option<usize>,
    opts: &HyperOpts,
    seed: u64,
    out_dir: &Path,
    cfg: &ConfigFile,
) -> Result<(), Failure> {
    if d_list.is_empty() {
        return Err(Failure::usage("--d-list must name at least one dimension".to_string()));
    }
    let mut resolved = Resolved::new("dimsweep");
    resolved.set("seed", seed);
    resolved.set("d_list", d_list.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
    let ambient = resolve(ambient, cfg, "D", 20usize, &mut resolved)?;
    let n = resolve(n, cfg, "n", 500usize, &mut resolved)?;
    let trials = resolve(trials, cfg, "trials", 3usize, &mut resolved)?;
    if trials == 0 {
        return Err(Failure::usage("--trials must be at least 1".to_string()));
    }
    let k = resolve(None, cfg, "k", 10usize, &mut resolved)?;

    ensure_out(out_dir)?;
    // Partial results are flushed per trial by design.
    let trials_path = out_dir.join("trials.csv");
    let mut trials_csv = String::from("d_true,trial,seed,flatnet,mle,twonn\n");
    std::fs::write(&trials_path, &trials_csv)?;

    let mut rows: Vec<TrialRow> = Vec::new();
    let mut hyper_recorded = false;
    for (d_index, &d_true) in d_list.iter().enumerate() {
        for trial in 0..trials {
            let trial_seed = seed
                .wrapping_add((d_index * trials + trial) as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let cloud = dataset::gen_gp_manifold(d_true, ambient, n, None, trial_seed)?;
            let hp = if hyper_recorded {
                let mut throwaway = Resolved::new("dimsweep");
                resolve_hyperparams(opts, cfg, &cloud, &mut throwaway)?
            } else {
                hyper_recorded = true;
                resolve_hyperparams(opts, cfg, &cloud, &mut resolved)?
            };
            let model = network::construct(&cloud, &hp, trial_seed)?;
            let flatnet = model.global_dimension()?;
            let mle = metrics::mle_dimension(&cloud, k)?.value;
            let twonn = metrics::twonn_dimension(&cloud)?.value;
            writeln!(
                trials_csv,
                "{d_true},{trial},{trial_seed},{flatnet},{},{}",
                format_real(mle),
                format_real(twonn)
            )
            .unwrap();
            std::fs::write(&trials_path, &trials_csv)?;
            println!("d={d_true} trial={trial}: flatnet={flatnet} mle={mle:.2} twonn={twonn:.2}");
            rows.push(TrialRow { d_true, flatnet, mle, twonn });
        }
    }

    let mut summary = String::from(
        "d_true,flatnet_mean,flatnet_std,mle_mean,mle_std,twonn_mean,twonn_std\n",
    );
    for &d_true in d_list {
        let of_d: Vec<&TrialRow> = rows.iter().filter(|r| r.d_true == d_true).collect();
        let (fm, fs) = mean_std(&of_d.iter().map(|r| r.flatnet as f64).collect::<Vec<_>>());
        let (mm, ms) = mean_std(&of_d.iter().map(|r| r.mle).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&of_d.iter().map(|r| r.twonn).collect::<Vec<_>>());
        writeln!(
            summary,
            "{d_true},{},{},{},{},{},{}",
            format_real(fm),
            format_real(fs),
            format_real(mm),
            format_real(ms),
            format_real(tm),
            format_real(ts)
        )
        .unwrap();
    }
    std::fs::write(out_dir.join("summary.csv"), summary)?;
    resolved.write(out_dir)?;
    Ok(())
}
