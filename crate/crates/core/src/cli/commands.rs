use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use qrlaplace::ald::{AlScale, QuantileLevel, TemperingRate};
use qrlaplace::curvature::{CurvatureEstimate, CurvatureMethod, TkcConfig};
use qrlaplace::design::{CrossedDesign, DesignKind, FixedDesign, GpDesign, GroupedDesign, LatentDesign, PriorCovParams};
use qrlaplace::laplace::{
    fit, laplace_log_marginal, predict_with, HyperParams, NewLatent, OptimizerConfig, QuantileModel, RestartSummary,
};
use qrlaplace::mode::ModeStart;
use qrlaplace::sim::{run_experiment, DesignSpec, ExperimentConfig, NoiseSpec};
use qrlaplace::studies::{coverage_study, mean_coverage, mll_check, CoverageConfig, IntervalKind, MllConfig};
use qrlaplace::Error;

use super::data::{encode_labels, read_config, sha256_hex, write_cells, write_csv, write_json, Table};
use super::{Cli, CliError, Command, Overrides};

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let stamp = !cli.no_timestamp;
    match &cli.command {
        Command::Simulate { config, out, overrides } => simulate(config, out, overrides, stamp),
        Command::Fit {
            data,
            config,
            out,
            overrides,
        } => fit_cmd(data, config, out, overrides, stamp),
        Command::Predict { fit, data, out } => predict_cmd(fit, data, out),
        Command::Benchmark { config, out, overrides } => benchmark(config, out, overrides, stamp),
        Command::MllCheck { config, out, overrides } => mll(config, out, overrides),
        Command::Coverage { config, out, overrides } => coverage(config, out, overrides),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn tau_override(tau: Option<f64>) -> Result<Option<QuantileLevel>, CliError> {
    tau.map(|t| QuantileLevel::new(t).map_err(|e| CliError::Config(format!("--tau: {e}"))))
        .transpose()
}

fn num(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    design: DesignSpec,
    noise: NoiseSpec,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_unix: Option<u64>,
    design: &'a DesignSpec,
    noise: &'a NoiseSpec,
    seed: u64,
    n_obs: usize,
    noise_scale: f64,
    true_theta: PriorCovParams,
}

fn simulate(config: &Path, out: &Path, ov: &Overrides, stamp: bool) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = read_config(config)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(t) = tau_override(ov.tau)? {
        cfg.noise.tau = t;
    }
    if ov.curvature.is_some() {
        return Err(CliError::Config("--curvature does not apply to simulate".into()));
    }
    let ds = cfg.design.generate(&cfg.noise, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;

    let n = ds.n_obs();
    let (mut header, mut truth_header) = (vec!["y".to_string()], vec!["q_true".to_string()]);
    let mut cells: Vec<Vec<String>> = ds.y.iter().map(|&y| vec![num(y)]).collect();
    let mut truth: Vec<Vec<String>> = ds.q_true.iter().map(|&q| vec![num(q)]).collect();
    match &ds.latent {
        LatentDesign::Grouped(g) => {
            header.push("group1".into());
            truth_header.push("b1".into());
            for i in 0..n {
                let j = g.group_index()[i];
                cells[i].push(j.to_string());
                truth[i].push(num(ds.b_true[j]));
            }
        }
        LatentDesign::Crossed(c) => {
            header.extend(["group1".into(), "group2".into()]);
            truth_header.extend(["b1".into(), "b2".into()]);
            let m1 = c.first().num_groups();
            for i in 0..n {
                let (j, k) = (c.first().group_index()[i], c.second().group_index()[i]);
                cells[i].extend([j.to_string(), k.to_string()]);
                truth[i].extend([num(ds.b_true[j]), num(ds.b_true[m1 + k])]);
            }
        }
        LatentDesign::Gp(g) => {
            header.extend((1..=g.dim()).map(|k| format!("coord{k}")));
            truth_header.push("f".into());
            for i in 0..n {
                cells[i].extend((0..g.dim()).map(|k| num(g.coords()[(i, k)])));
                truth[i].push(num(ds.b_true[i]));
            }
        }
    }
    write_cells(&out.join("data.csv"), &header, &cells)?;
    write_cells(&out.join("truth.csv"), &truth_header, &truth)?;
    write_json(
        &out.join("metadata.json"),
        &SimulateMeta {
            schema_version: 1,
            created_unix: stamp.then(unix_now),
            design: &cfg.design,
            noise: &cfg.noise,
            seed: cfg.seed,
            n_obs: n,
            noise_scale: ds.meta.noise_scale,
            true_theta: ds.meta.true_theta,
        },
    )
}

// --------------------------------------------------------------------- fit

fn default_curvature() -> CurvatureMethod {
    CurvatureMethod::Tkc
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    design: DesignKind,
    tau: QuantileLevel,
    #[serde(default = "default_curvature")]
    curvature: CurvatureMethod,
    /// Add an intercept column to the covariates `x1, x2, ...`.
    #[serde(default = "yes")]
    intercept: bool,
    #[serde(default)]
    tkc: Option<TkcConfig>,
    #[serde(default)]
    tempering: Option<TemperingRate>,
    #[serde(default)]
    optimizer: OptimizerConfig,
    #[serde(default)]
    init: Option<HyperParams>,
}

/// How data columns map onto the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    covariates: Vec<String>,
    intercept: bool,
    /// Sorted labels of each grouping factor.
    groups: Vec<Vec<String>>,
    coords: Vec<String>,
}

fn fixed_design(table: &Table, layout: &Layout) -> Result<FixedDesign, CliError> {
    let x = table.matrix(&layout.covariates)?;
    let n = table.n_rows();
    if !layout.intercept {
        return Ok(FixedDesign::new(x)?);
    }
    let mut full = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    full.columns_mut(1, x.ncols()).copy_from(&x);
    Ok(FixedDesign::new(full)?)
}

fn training_model(table: &Table, cfg: &FitConfig) -> Result<(QuantileModel, Vec<f64>, Layout), CliError> {
    let y = table.numeric("y")?;
    if y.is_empty() {
        return Err(CliError::Data("the data file has no rows".into()));
    }
    let covariates = table.numbered("x");
    let mut layout = Layout {
        covariates,
        intercept: cfg.intercept,
        groups: Vec::new(),
        coords: Vec::new(),
    };
    let factor = |name: &str| -> Result<(Vec<String>, GroupedDesign), CliError> {
        let (labels, index) = encode_labels(&table.text(name)?);
        let g = GroupedDesign::new(index, labels.len())?;
        Ok((labels, g))
    };
    let latent = match cfg.design {
        DesignKind::Grouped => {
            let (labels, g) = factor("group1")?;
            layout.groups.push(labels);
            LatentDesign::Grouped(g)
        }
        DesignKind::Crossed => {
            let (l1, g1) = factor("group1")?;
            let (l2, g2) = factor("group2")?;
            layout.groups = vec![l1, l2];
            LatentDesign::Crossed(CrossedDesign::new(g1, g2)?)
        }
        DesignKind::Gp => {
            layout.coords = table.numbered("coord");
            if layout.coords.is_empty() {
                return Err(CliError::Data("a GP design needs columns coord1, coord2, ...".into()));
            }
            LatentDesign::Gp(GpDesign::new(table.matrix(&layout.coords)?)?)
        }
    };
    let fixed = fixed_design(table, &layout)?;
    let mut model = QuantileModel::new(cfg.tau, fixed, latent, cfg.curvature)?;
    if let Some(t) = &cfg.tkc {
        model = model.with_tkc(t.clone());
    }
    if let Some(a) = cfg.tempering {
        model = model.with_tempering(a);
    }
    Ok((model, y, layout))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataRef {
    path: String,
    sha256: String,
    n_obs: usize,
}

#[derive(Serialize)]
struct CurvatureReport<'a> {
    #[serde(flatten)]
    estimate: &'a CurvatureEstimate,
    fallback: &'a Option<String>,
}

#[derive(Serialize)]
struct FitDocument<'a> {
    schema_version: u32,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_unix: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_s: Option<f64>,
    data: DataRef,
    config: &'a FitConfig,
    layout: &'a Layout,
    theta_hat: PriorCovParams,
    beta_hat: &'a [f64],
    lambda_hat: f64,
    log_marginal: f64,
    curvature: CurvatureReport<'a>,
    converged: bool,
    iterations: usize,
    evaluations: usize,
    trace: &'a [f64],
    restarts: &'a [RestartSummary],
    warnings: &'a [String],
}

#[derive(Serialize)]
struct FitFailure {
    schema_version: u32,
    status: &'static str,
    error_kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<serde_json::Value>,
}

/// Fields of a fit document that prediction needs.
#[derive(Deserialize)]
struct FitInput {
    schema_version: u32,
    status: String,
    data: DataRef,
    config: FitConfig,
    layout: Layout,
    theta_hat: PriorCovParams,
    beta_hat: Vec<f64>,
    lambda_hat: f64,
}

fn fit_cmd(data: &Path, config: &Path, out: &Path, ov: &Overrides, stamp: bool) -> Result<(), CliError> {
    let mut cfg: FitConfig = read_config(config)?;
    if let Some(s) = ov.seed {
        cfg.optimizer.seed = s;
    }
    if let Some(c) = ov.curvature {
        cfg.curvature = c.into();
    }
    if let Some(t) = tau_override(ov.tau)? {
        cfg.tau = t;
    }
    let bytes = fs::read(data).map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?;
    let table = Table::parse(&bytes, data)?;
    let (model, y, layout) = training_model(&table, &cfg)?;
    let data_ref = DataRef {
        path: fs::canonicalize(data)
            .map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?
            .display()
            .to_string(),
        sha256: sha256_hex(&bytes),
        n_obs: y.len(),
    };
    let start = Instant::now();
    let fitted = match fit(&model, &y, cfg.init.as_ref(), &cfg.optimizer) {
        Ok(f) => f,
        Err(e) => {
            let diagnostics = match &e {
                Error::ModeNotConverged {
                    iterations,
                    objective_trace,
                    ..
                } => Some(serde_json::json!({
                    "mode_iterations": iterations,
                    "objective_trace": objective_trace,
                })),
                _ => None,
            };
            let cli_err = CliError::from(e);
            let kind = match cli_err {
                CliError::Config(_) => "config",
                CliError::Data(_) => "data",
                CliError::Numerical(_) => "numerical",
            };
            write_json(
                out,
                &FitFailure {
                    schema_version: 1,
                    status: "error",
                    error_kind: kind,
                    message: cli_err.to_string(),
                    diagnostics,
                },
            )?;
            return Err(cli_err);
        }
    };
    let wall = start.elapsed().as_secs_f64();
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    write_json(
        out,
        &FitDocument {
            schema_version: 1,
            status: "ok",
            created_unix: stamp.then(unix_now),
            wall_time_s: stamp.then_some(wall),
            data: data_ref,
            config: &cfg,
            layout: &layout,
            theta_hat: fitted.theta_hat,
            beta_hat: &fitted.beta_hat,
            lambda_hat: fitted.lambda_hat.get(),
            log_marginal: fitted.posterior.log_marginal,
            curvature: CurvatureReport {
                estimate: &fitted.posterior.curvature,
                fallback: &fitted.posterior.fallback,
            },
            converged: fitted.converged,
            iterations: fitted.iterations,
            evaluations: fitted.evaluations,
            trace: &fitted.trace,
            restarts: &fitted.restarts,
            warnings: &fitted.warnings,
        },
    )
}

// ----------------------------------------------------------------- predict

fn predict_cmd(fit_path: &Path, newdata: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(fit_path).map_err(|e| CliError::Data(format!("{}: {e}", fit_path.display())))?;
    let doc: FitInput =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", fit_path.display())))?;
    if doc.schema_version != 1 || doc.status != "ok" {
        return Err(CliError::Data(format!(
            "{}: not a successful version-1 fit result",
            fit_path.display()
        )));
    }
    let train_path = Path::new(&doc.data.path);
    let bytes = fs::read(train_path).map_err(|e| CliError::Data(format!("training data {}: {e}", train_path.display())))?;
    if sha256_hex(&bytes) != doc.data.sha256 {
        return Err(CliError::Data(format!(
            "training data {} changed since the fit",
            train_path.display()
        )));
    }
    let train = Table::parse(&bytes, train_path)?;
    let (model, y, layout) = training_model(&train, &doc.config)?;
    if layout != doc.layout {
        return Err(CliError::Data("training data columns no longer match the fit result".into()));
    }
    let params = HyperParams {
        theta: doc.theta_hat,
        beta: doc.beta_hat,
        lambda: AlScale::new(doc.lambda_hat)?,
    };
    let post = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &doc.config.optimizer.mode)?;

    let table = Table::read(newdata)?;
    for c in &layout.covariates {
        if !table.has(c) {
            return Err(CliError::Data(format!("new data lacks covariate column `{c}`")));
        }
    }
    let fixed = fixed_design(&table, &layout)?;
    let lookup = |name: &str, labels: &[String]| -> Result<Vec<Option<usize>>, CliError> {
        Ok(table
            .text(name)?
            .iter()
            .map(|l| labels.binary_search(l).ok())
            .collect())
    };
    let new_latent = match doc.config.design {
        DesignKind::Grouped => NewLatent::Grouped(lookup("group1", &layout.groups[0])?),
        DesignKind::Crossed => {
            let a = lookup("group1", &layout.groups[0])?;
            let b = lookup("group2", &layout.groups[1])?;
            NewLatent::Crossed(a.into_iter().zip(b).map(|(a, b)| [a, b]).collect())
        }
        DesignKind::Gp => NewLatent::Gp(table.matrix(&layout.coords)?),
    };
    let preds = predict_with(&model, &params, &post, &fixed, &new_latent)?;
    let rows: Vec<Vec<String>> = preds.iter().map(|p| vec![num(p.quantile), num(p.latent_sd)]).collect();
    write_cells(out, &["quantile_estimate".into(), "latent_sd".into()], &rows)
}

// --------------------------------------------------------------- benchmark

#[derive(Serialize)]
struct BenchmarkRow<'a> {
    design: &'a str,
    noise: &'a str,
    m: usize,
    n_j: Option<usize>,
    method: CurvatureMethod,
    metric: &'a str,
    mean: f64,
    se: f64,
    runtime_s: Option<f64>,
}

fn benchmark(config: &Path, out: &Path, ov: &Overrides, stamp: bool) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(c) = ov.curvature {
        cfg.methods = vec![c.into()];
    }
    if let Some(t) = tau_override(ov.tau)? {
        cfg.noise.tau = t;
    }
    let report = run_experiment(&cfg)?;
    let failed: Vec<_> = report.records.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!(
            "warning: replication {} ({:?}) failed: {}",
            r.replication,
            r.method,
            r.error.as_deref().unwrap_or("")
        );
    }
    if failed.len() == report.records.len() {
        return Err(CliError::Numerical("every replication failed".into()));
    }
    let rows: Vec<BenchmarkRow> = report
        .rows
        .iter()
        .map(|r| BenchmarkRow {
            design: &r.design,
            noise: &r.noise,
            m: r.m,
            n_j: r.n_j,
            method: r.method,
            metric: &r.metric,
            mean: r.mean,
            se: r.se,
            runtime_s: stamp.then_some(r.runtime_s),
        })
        .collect();
    write_csv(out, &rows)?;
    let mut records = serde_json::to_value(&report.records).map_err(|e| CliError::Data(e.to_string()))?;
    if !stamp {
        if let Some(list) = records.as_array_mut() {
            for r in list {
                if let Some(o) = r.as_object_mut() {
                    o.remove("runtime_s");
                }
            }
        }
    }
    write_json(
        &out.with_extension("replications.json"),
        &serde_json::json!({ "schema_version": 1, "records": records }),
    )
}

// --------------------------------------------------------- mll-check, coverage

fn mll(config: &Path, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg: MllConfig = read_config(config)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(c) = ov.curvature {
        cfg.methods = vec![c.into()];
    }
    if let Some(t) = tau_override(ov.tau)? {
        cfg.noise.tau = t;
    }
    let rows = mll_check(&cfg)?;
    write_csv(out, &rows)
}

fn coverage(config: &Path, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg: CoverageConfig = read_config(config)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if ov.curvature.is_some() {
        return Err(CliError::Config("coverage always fits with TKC curvature".into()));
    }
    if let Some(t) = tau_override(ov.tau)? {
        cfg.tau = t;
    }
    let rows = coverage_study(&cfg)?;
    for &family in &cfg.families {
        for kind in [
            IntervalKind::Naive,
            IntervalKind::SandwichAsPaper,
            IntervalKind::SandwichDensityScale,
        ] {
            if let Some(c) = mean_coverage(&rows, family, kind) {
                eprintln!("{} {:?}: mean coverage {c:.3}", family.name(), kind);
            }
        }
    }
    write_csv(out, &rows)
}
