//! Marginal-likelihood accuracy and interval coverage studies on simulated
//! single-level grouped data.

use serde::{Deserialize, Serialize};

use crate::ald::{AlScale, QuantileLevel};
use crate::calibration::{empirical_coverage, sandwich_standard_errors, wald_interval, SandwichScale};
use crate::curvature::{CurvatureMethod, TkcConfig};
use crate::design::{FixedDesign, PriorCovParams};
use crate::error::{Error, Result};
use crate::laplace::{fit, laplace_log_marginal, HyperParams, OptimizerConfig, QuantileModel};
use crate::mode::{ModeConfig, ModeStart};
use crate::quadrature::{exact_log_marginal, OracleMethod, QuadratureConfig};
use crate::sim::{derive_seed, gen_grouped, NoiseFamily, NoiseSpec};

const STREAM_MLL: u64 = 11;
const STREAM_COVERAGE: u64 = 12;
const STREAM_COVERAGE_FIT: u64 = 13;

fn tau_08() -> QuantileLevel {
    QuantileLevel::new(0.8).expect("valid tau")
}

/// Laplace versus quadrature at the data-generating hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MllConfig {
    pub m: usize,
    pub group_sizes: Vec<usize>,
    pub datasets: usize,
    pub sigma2: f64,
    /// Noise of the simulated data. The model always uses AL with `lambda`.
    pub noise: NoiseSpec,
    pub lambda: f64,
    pub methods: Vec<CurvatureMethod>,
    /// The reference whose value fills the `oracle` column. Adaptive
    /// Gauss-Hermite is always reported alongside.
    pub oracle: OracleMethod,
    pub quadrature: QuadratureConfig,
    pub tkc: TkcConfig,
    pub seed: u64,
}

impl Default for MllConfig {
    fn default() -> Self {
        Self {
            m: 20,
            group_sizes: vec![100, 1000],
            datasets: 20,
            sigma2: 1.0,
            noise: NoiseSpec::new(NoiseFamily::Ald, tau_08()).with_scale(1.0),
            lambda: 1.0,
            methods: vec![CurvatureMethod::Tkc, CurvatureMethod::Fisher],
            oracle: OracleMethod::ClosedForm,
            quadrature: QuadratureConfig::default(),
            tkc: TkcConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MllRow {
    pub dataset: usize,
    pub n_j: usize,
    pub method: CurvatureMethod,
    pub log_marginal: f64,
    pub oracle: f64,
    /// `|z_LA / z - 1|` against the configured oracle.
    pub relative_error: f64,
    pub agh: f64,
    /// `|z_LA / z - 1|` against adaptive Gauss-Hermite.
    pub relative_error_agh: f64,
}

/// One row per dataset, group size and curvature method.
pub fn mll_check(cfg: &MllConfig) -> Result<Vec<MllRow>> {
    cfg.quadrature.validate()?;
    cfg.tkc.validate()?;
    if cfg.methods.contains(&CurvatureMethod::Population) {
        return Err(Error::Config("population curvature is not a Laplace method".into()));
    }
    let lambda = AlScale::new(cfg.lambda)?;
    let tau = cfg.noise.tau;
    let params = HyperParams {
        theta: PriorCovParams::Grouped { sigma2: cfg.sigma2 },
        beta: Vec::new(),
        lambda,
    };
    let mut rows = Vec::new();
    for &n_j in &cfg.group_sizes {
        for k in 0..cfg.datasets {
            let seed = derive_seed(cfg.seed, (n_j as u64) << 32 | k as u64, STREAM_MLL);
            let data = gen_grouped(cfg.m, n_j, cfg.sigma2, &cfg.noise, seed)?;
            let n = data.n_obs();
            let oracle_cfg = QuadratureConfig {
                method: cfg.oracle,
                ..cfg.quadrature.clone()
            };
            let agh_cfg = QuadratureConfig {
                method: OracleMethod::Agh,
                ..cfg.quadrature.clone()
            };
            for &method in &cfg.methods {
                let model = QuantileModel::new(tau, FixedDesign::empty(n), data.latent.clone(), method)?
                    .with_tkc(cfg.tkc.clone());
                let oracle = exact_log_marginal(&model, &data.y, &params, &oracle_cfg)?;
                let agh = exact_log_marginal(&model, &data.y, &params, &agh_cfg)?;
                let la = laplace_log_marginal(&model, &data.y, &params, ModeStart::Zero, &ModeConfig::default())?
                    .log_marginal;
                rows.push(MllRow {
                    dataset: k,
                    n_j,
                    method,
                    log_marginal: la,
                    oracle,
                    relative_error: (la - oracle).exp_m1().abs(),
                    agh,
                    relative_error_agh: (la - agh).exp_m1().abs(),
                });
            }
        }
    }
    Ok(rows)
}

/// Median of `relative_error` over the rows for one group size and method.
pub fn median_relative_error(rows: &[MllRow], n_j: usize, method: CurvatureMethod, against_agh: bool) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.n_j == n_j && r.method == method)
        .map(|r| if against_agh { r.relative_error_agh } else { r.relative_error })
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) })
}

/// Coverage of Wald intervals for the group effects of a TKC fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub m: usize,
    pub n_j: usize,
    pub sigma2: f64,
    pub tau: QuantileLevel,
    pub level: f64,
    pub replications: usize,
    pub families: Vec<NoiseFamily>,
    pub snr: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            m: 100,
            n_j: 100,
            sigma2: 1.0,
            tau: tau_08(),
            level: 0.9,
            replications: 10,
            families: vec![NoiseFamily::Gaussian, NoiseFamily::StudentT2],
            snr: 5.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// Laplace posterior standard deviation.
    Naive,
    SandwichAsPaper,
    SandwichDensityScale,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub design: &'static str,
    pub noise: NoiseFamily,
    pub interval: IntervalKind,
    pub level: f64,
    pub replication: usize,
    pub seed: u64,
    pub coverage: f64,
    pub error: Option<String>,
}

fn coverage_one(cfg: &CoverageConfig, family: NoiseFamily, seed: u64, fit_seed: u64) -> Result<Vec<(IntervalKind, f64)>> {
    let noise = NoiseSpec {
        snr: cfg.snr,
        ..NoiseSpec::new(family, cfg.tau)
    };
    let data = gen_grouped(cfg.m, cfg.n_j, cfg.sigma2, &noise, seed)?;
    let model = QuantileModel::new(cfg.tau, FixedDesign::empty(data.n_obs()), data.latent.clone(), CurvatureMethod::Tkc)?;
    let opt = OptimizerConfig {
        seed: fit_seed,
        ..cfg.optimizer.clone()
    };
    let fitted = fit(&model, &data.y, None, &opt)?;
    let b = &fitted.posterior.b_hat;
    let mut out = Vec::new();
    let naive = (0..b.len())
        .map(|j| wald_interval(b[j], fitted.posterior.variance(j)?.sqrt(), cfg.level))
        .collect::<Result<Vec<_>>>()?;
    out.push((IntervalKind::Naive, empirical_coverage(&naive, &data.b_true)?));
    for (kind, scale) in [
        (IntervalKind::SandwichAsPaper, SandwichScale::AsPaper),
        (IntervalKind::SandwichDensityScale, SandwichScale::DensityScale),
    ] {
        let se = sandwich_standard_errors(&model, &data.y, &fitted, &model.tkc, scale)?;
        let iv = b
            .iter()
            .zip(&se)
            .map(|(&c, &s)| wald_interval(c, s, cfg.level))
            .collect::<Result<Vec<_>>>()?;
        out.push((kind, empirical_coverage(&iv, &data.b_true)?));
    }
    Ok(out)
}

/// Per-replication coverage of naive and sandwich intervals. A failed
/// replication yields rows with `NaN` coverage and the error message.
pub fn coverage_study(cfg: &CoverageConfig) -> Result<Vec<CoverageRow>> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Config("level must lie in (0, 1)".into()));
    }
    let mut rows = Vec::new();
    for (fi, &family) in cfg.families.iter().enumerate() {
        for r in 0..cfg.replications {
            let seed = derive_seed(cfg.seed, (fi as u64) << 32 | r as u64, STREAM_COVERAGE);
            let fit_seed = derive_seed(cfg.seed, (fi as u64) << 32 | r as u64, STREAM_COVERAGE_FIT);
            let row = |interval, coverage, error| CoverageRow {
                design: "grouped",
                noise: family,
                interval,
                level: cfg.level,
                replication: r,
                seed,
                coverage,
                error,
            };
            match coverage_one(cfg, family, seed, fit_seed) {
                Ok(cov) => rows.extend(cov.into_iter().map(|(k, c)| row(k, c, None))),
                Err(e) => rows.extend(
                    [
                        IntervalKind::Naive,
                        IntervalKind::SandwichAsPaper,
                        IntervalKind::SandwichDensityScale,
                    ]
                    .map(|k| row(k, f64::NAN, Some(e.to_string()))),
                ),
            }
        }
    }
    Ok(rows)
}

/// Mean coverage over successful replications.
pub fn mean_coverage(rows: &[CoverageRow], family: NoiseFamily, interval: IntervalKind) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.noise == family && r.interval == interval && r.error.is_none())
        .map(|r| r.coverage)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
