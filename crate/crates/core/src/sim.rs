//! Simulated designs, accuracy metrics and the replication driver.
//!
//! Every generator centres its noise so that the `tau`-quantile of each
//! error is zero, which makes the latent effect the true conditional
//! quantile. Noise scales follow from a signal-to-noise ratio unless an
//! explicit scale is supplied.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ald::{ald_sample, ald_variance, pinball_loss, AlScale, QuantileLevel};
use crate::curvature::{CurvatureMethod, TkcConfig};
use crate::design::{
    cholesky_with_jitter, matern15, CrossedDesign, DesignKind, FixedDesign, GpDesign, GroupedDesign, LatentDesign,
    PriorCovParams,
};
use crate::error::{Error, Result};
use crate::laplace::{fit, predict, NewLatent, OptimizerConfig, QuantileModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Ald,
    Gaussian,
    StudentT2,
    HeteroGaussianGp,
}

impl NoiseFamily {
    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::Ald => "ald",
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::StudentT2 => "student_t2",
            NoiseFamily::HeteroGaussianGp => "hetero_gaussian_gp",
        }
    }
}

fn default_snr() -> f64 {
    5.0
}

/// Noise distribution, centred at its `tau`-quantile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    #[serde(default = "default_snr")]
    pub snr: f64,
    pub tau: QuantileLevel,
    /// Explicit scale overriding the SNR rule: `lambda` for AL noise, the
    /// standard deviation for Gaussian noise, the t scale for t noise.
    #[serde(default)]
    pub scale: Option<f64>,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, tau: QuantileLevel) -> Self {
        Self {
            family,
            snr: default_snr(),
            tau,
            scale: None,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "snr",
                value: self.snr,
                reason: "must be positive",
            });
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "scale",
                    value: s,
                    reason: "must be positive",
                });
            }
        }
        Ok(())
    }

    /// Scale parameter of the noise for a signal with the given variance.
    ///
    /// For t(2) noise, whose variance is infinite, the scale matches the
    /// interquartile range of the Gaussian noise at the same SNR.
    pub fn scale_for(&self, signal_variance: f64) -> f64 {
        if let Some(s) = self.scale {
            return s;
        }
        let noise_var = signal_variance / self.snr;
        match self.family {
            NoiseFamily::Ald => {
                let unit = ald_variance(AlScale::new(1.0).expect("unit scale"), self.tau);
                (noise_var / unit).sqrt()
            }
            NoiseFamily::Gaussian | NoiseFamily::HeteroGaussianGp => noise_var.sqrt(),
            NoiseFamily::StudentT2 => noise_var.sqrt() * normal_quantile(0.75) / t2_quantile(0.75),
        }
    }

    /// One draw with `tau`-quantile zero. `sd_factor` multiplies the scale
    /// (the heteroscedastic factor; 1 otherwise).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64, sd_factor: f64) -> f64 {
        let tau = self.tau.get();
        let s = scale * sd_factor;
        match self.family {
            NoiseFamily::Ald => ald_sample(rng, 0.0, AlScale::new(s).expect("positive scale"), self.tau),
            NoiseFamily::Gaussian | NoiseFamily::HeteroGaussianGp => {
                let z: f64 = StandardNormal.sample(rng);
                s * (z - normal_quantile(tau))
            }
            NoiseFamily::StudentT2 => s * (t2_quantile(open_uniform(rng)) - t2_quantile(tau)),
        }
    }
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Quantile function of Student's t with 2 degrees of freedom.
pub fn t2_quantile(p: f64) -> f64 {
    (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt()
}

/// Matérn-1.5 parameters of the simulated latent process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpKernel {
    pub sigma2: f64,
    pub length_scale: f64,
}

impl GpKernel {
    /// Length scale `0.25 sqrt(d / 2)`, unit variance.
    pub fn for_dim(d: usize) -> Self {
        Self {
            sigma2: 1.0,
            length_scale: 0.25 * (d as f64 / 2.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub design: DesignKind,
    pub noise: NoiseSpec,
    /// Scale actually used to draw the noise.
    pub noise_scale: f64,
    pub true_theta: PriorCovParams,
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub y: Vec<f64>,
    pub latent: LatentDesign,
    /// Latent effects: group effects, both factors' effects concatenated, or
    /// the GP values at the inputs.
    pub b_true: Vec<f64>,
    /// True conditional `tau`-quantile per observation.
    pub q_true: Vec<f64>,
    /// Per-observation noise standard-deviation factor (heteroscedastic GP
    /// noise only).
    pub sd_factor: Option<Vec<f64>>,
    pub seed: u64,
    pub meta: GeneratorMeta,
}

impl SimulatedDataset {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

fn check_count(name: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::InvalidParameter {
            name,
            value: 0.0,
            reason: "must be at least 1",
        })
    } else {
        Ok(())
    }
}

fn check_variance(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value: v,
            reason: "must be positive",
        })
    }
}

fn homoscedastic(noise: &NoiseSpec) -> Result<()> {
    noise.validate()?;
    if noise.family == NoiseFamily::HeteroGaussianGp {
        return Err(Error::Unsupported(
            "heteroscedastic noise is only defined for GP designs".into(),
        ));
    }
    Ok(())
}

/// `m` groups of `n_j` observations each, `y = b_j + eps`.
pub fn gen_grouped(m: usize, n_j: usize, sigma2_u: f64, noise: &NoiseSpec, seed: u64) -> Result<SimulatedDataset> {
    check_count("m", m)?;
    check_count("n_j", n_j)?;
    check_variance("sigma2_u", sigma2_u)?;
    homoscedastic(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = sigma2_u.sqrt();
    let b: Vec<f64> = (0..m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let index: Vec<usize> = (0..m).flat_map(|j| std::iter::repeat_n(j, n_j)).collect();
    let scale = noise.scale_for(sigma2_u);
    let q_true: Vec<f64> = index.iter().map(|&j| b[j]).collect();
    let y = q_true.iter().map(|q| q + noise.sample(&mut rng, scale, 1.0)).collect();
    Ok(SimulatedDataset {
        y,
        latent: LatentDesign::Grouped(GroupedDesign::new(index, m)?),
        b_true: b,
        q_true,
        sd_factor: None,
        seed,
        meta: GeneratorMeta {
            design: DesignKind::Grouped,
            noise: noise.clone(),
            noise_scale: scale,
            true_theta: PriorCovParams::Grouped { sigma2: sigma2_u },
        },
    })
}

/// Two crossed factors. Each first-factor level has `n_j` observations whose
/// second-factor levels cycle through `0..m2`.
pub fn gen_crossed(
    m1: usize,
    m2: usize,
    n_j: usize,
    sigma2_1: f64,
    sigma2_2: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SimulatedDataset> {
    check_count("m1", m1)?;
    check_count("m2", m2)?;
    check_count("n_j", n_j)?;
    check_variance("sigma2_1", sigma2_1)?;
    check_variance("sigma2_2", sigma2_2)?;
    homoscedastic(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s1, s2) = (sigma2_1.sqrt(), sigma2_2.sqrt());
    let b1: Vec<f64> = (0..m1).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let b2: Vec<f64> = (0..m2).map(|_| s2 * rng.sample::<f64, _>(StandardNormal)).collect();
    let first: Vec<usize> = (0..m1).flat_map(|j| std::iter::repeat_n(j, n_j)).collect();
    let second: Vec<usize> = (0..m1).flat_map(|_| (0..n_j).map(|i| i % m2)).collect();
    let q_true: Vec<f64> = first.iter().zip(&second).map(|(&j, &k)| b1[j] + b2[k]).collect();
    let scale = noise.scale_for(sigma2_1 + sigma2_2);
    let y = q_true.iter().map(|q| q + noise.sample(&mut rng, scale, 1.0)).collect();
    let latent = LatentDesign::Crossed(CrossedDesign::new(
        GroupedDesign::new(first, m1)?,
        GroupedDesign::new(second, m2)?,
    )?);
    Ok(SimulatedDataset {
        y,
        latent,
        b_true: b1.into_iter().chain(b2).collect(),
        q_true,
        sd_factor: None,
        seed,
        meta: GeneratorMeta {
            design: DesignKind::Crossed,
            noise: noise.clone(),
            noise_scale: scale,
            true_theta: PriorCovParams::Crossed {
                sigma2: [sigma2_1, sigma2_2],
            },
        },
    })
}

fn sample_gp<R: Rng + ?Sized>(rng: &mut R, k: &DMatrix<f64>, sigma2: f64) -> Result<Vec<f64>> {
    let (ch, _) = cholesky_with_jitter(k, sigma2)?;
    let z = DVector::from_iterator(k.nrows(), (0..k.nrows()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((ch.l() * z).iter().copied().collect())
}

/// Latent Matérn-1.5 process at `n` uniform inputs on `[0, 1]^d`.
///
/// Heteroscedastic noise draws the log standard-deviation factor from an
/// independent process with the same kernel.
pub fn gen_gp(n: usize, d: usize, kernel: GpKernel, noise: &NoiseSpec, seed: u64) -> Result<SimulatedDataset> {
    check_count("n", n)?;
    check_count("d", d)?;
    check_variance("sigma2", kernel.sigma2)?;
    check_variance("length_scale", kernel.length_scale)?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let design = GpDesign::new(coords)?;
    let k = matern15(&design, kernel.sigma2, kernel.length_scale);
    let f = sample_gp(&mut rng, &k, kernel.sigma2)?;
    let sd_factor = if noise.family == NoiseFamily::HeteroGaussianGp {
        Some(sample_gp(&mut rng, &k, kernel.sigma2)?.into_iter().map(f64::exp).collect::<Vec<_>>())
    } else {
        None
    };
    let scale = noise.scale_for(kernel.sigma2);
    let y = f
        .iter()
        .enumerate()
        .map(|(i, q)| q + noise.sample(&mut rng, scale, sd_factor.as_ref().map_or(1.0, |s| s[i])))
        .collect();
    Ok(SimulatedDataset {
        y,
        latent: LatentDesign::Gp(design),
        b_true: f.clone(),
        q_true: f,
        sd_factor,
        seed,
        meta: GeneratorMeta {
            design: DesignKind::Gp,
            noise: noise.clone(),
            noise_scale: scale,
            true_theta: PriorCovParams::Gp {
                sigma2: kernel.sigma2,
                length_scale: kernel.length_scale,
            },
        },
    })
}

/// Root mean squared difference.
pub fn rmse(q_hat: &[f64], q_true: &[f64]) -> Result<f64> {
    if q_hat.len() != q_true.len() {
        return Err(Error::dims("rmse inputs", q_true.len(), q_hat.len()));
    }
    if q_hat.is_empty() {
        return Err(Error::Domain("rmse of an empty vector".into()));
    }
    let ss: f64 = q_hat.iter().zip(q_true).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / q_hat.len() as f64).sqrt())
}

/// Mean pinball loss of `q_hat` on `y`.
pub fn quantile_loss(y: &[f64], q_hat: &[f64], tau: QuantileLevel) -> Result<f64> {
    if q_hat.len() != y.len() {
        return Err(Error::dims("quantile_loss inputs", y.len(), q_hat.len()));
    }
    if y.is_empty() {
        return Err(Error::Domain("quantile loss of an empty vector".into()));
    }
    let total: f64 = y.iter().zip(q_hat).map(|(&y, &q)| pinball_loss(y, q, tau)).sum();
    Ok(total / y.len() as f64)
}

/// SplitMix64 finalizer over `(seed, index, stream)`, giving independent
/// seeds per replication and purpose.
pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_FIT: u64 = 3;

/// Uniform random split of `0..n` into sorted train and test indices.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64, replication: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, replication, STREAM_SPLIT));
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(n);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Simulated design of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    Grouped {
        m: usize,
        n_j: usize,
        #[serde(default = "one")]
        sigma2: f64,
    },
    Crossed {
        m1: usize,
        m2: usize,
        n_j: usize,
        #[serde(default = "crossed_default")]
        sigma2: [f64; 2],
    },
    Gp {
        n: usize,
        d: usize,
        #[serde(default)]
        kernel: Option<GpKernel>,
    },
}

fn one() -> f64 {
    1.0
}

fn crossed_default() -> [f64; 2] {
    [1.0, 2.0]
}

impl DesignSpec {
    pub fn generate(&self, noise: &NoiseSpec, seed: u64) -> Result<SimulatedDataset> {
        match *self {
            DesignSpec::Grouped { m, n_j, sigma2 } => gen_grouped(m, n_j, sigma2, noise, seed),
            DesignSpec::Crossed { m1, m2, n_j, sigma2 } => gen_crossed(m1, m2, n_j, sigma2[0], sigma2[1], noise, seed),
            DesignSpec::Gp { n, d, kernel } => gen_gp(n, d, kernel.unwrap_or(GpKernel::for_dim(d)), noise, seed),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DesignSpec::Grouped { .. } => "grouped",
            DesignSpec::Crossed { .. } => "crossed",
            DesignSpec::Gp { .. } => "gp",
        }
    }

    /// `(m, n_j)` report columns; a GP design reports `n` as `m`.
    fn report_sizes(&self) -> (usize, Option<usize>) {
        match *self {
            DesignSpec::Grouped { m, n_j, .. } => (m, Some(n_j)),
            DesignSpec::Crossed { m1, n_j, .. } => (m1, Some(n_j)),
            DesignSpec::Gp { n, .. } => (n, None),
        }
    }

    /// Mixed models fit an intercept by default, GP models do not.
    fn default_intercept(&self) -> bool {
        !matches!(self, DesignSpec::Gp { .. })
    }
}

fn default_replications() -> usize {
    10
}

fn default_train_fraction() -> f64 {
    0.75
}

fn default_methods() -> Vec<CurvatureMethod> {
    vec![CurvatureMethod::Tkc, CurvatureMethod::Fisher]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub design: DesignSpec,
    pub noise: NoiseSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<CurvatureMethod>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Defaults to true for grouped and crossed designs, false for GP.
    #[serde(default)]
    pub fit_intercept: Option<bool>,
    /// Overrides the per-design TKC defaults.
    #[serde(default)]
    pub tkc: Option<TkcConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl ExperimentConfig {
    pub fn new(design: DesignSpec, noise: NoiseSpec) -> Self {
        Self {
            design,
            noise,
            methods: default_methods(),
            replications: default_replications(),
            seed: 0,
            train_fraction: default_train_fraction(),
            fit_intercept: None,
            tkc: None,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must be nonempty".into()));
        }
        if self.methods.contains(&CurvatureMethod::Population) {
            return Err(Error::Config("population curvature cannot be fit".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if let Some(t) = &self.tkc {
            t.validate()?;
        }
        Ok(())
    }
}

/// Outcome of one fit in one replication.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: CurvatureMethod,
    pub rmse: f64,
    pub quantile_loss: f64,
    pub runtime_s: f64,
    /// Absolute error of each covariance parameter, in `PriorCovParams` order.
    pub theta_abs_error: Vec<f64>,
    pub lambda_hat: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

/// One aggregated report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub design: String,
    pub noise: String,
    pub m: usize,
    pub n_j: Option<usize>,
    pub method: CurvatureMethod,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub records: Vec<ReplicationRecord>,
}

impl ExperimentReport {
    /// Mean of `metric` for `method`, if any replication succeeded.
    pub fn mean(&self, method: CurvatureMethod, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric)
            .map(|r| r.mean)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wr.serialize(row).map_err(|e| Error::Config(format!("writing report: {e}")))?;
        }
        wr.flush().map_err(|e| Error::Config(format!("writing report: {e}")))?;
        Ok(())
    }
}

fn theta_values(t: &PriorCovParams) -> Vec<f64> {
    match *t {
        PriorCovParams::Grouped { sigma2 } => vec![sigma2],
        PriorCovParams::Crossed { sigma2 } => sigma2.to_vec(),
        PriorCovParams::Gp { sigma2, length_scale } => vec![sigma2, length_scale],
    }
}

fn theta_names(kind: DesignKind) -> &'static [&'static str] {
    match kind {
        DesignKind::Grouped => &["sigma2_abs_error"],
        DesignKind::Crossed => &["sigma2_1_abs_error", "sigma2_2_abs_error"],
        DesignKind::Gp => &["sigma2_abs_error", "length_scale_abs_error"],
    }
}

fn new_latent_for(latent: &LatentDesign, rows: &[usize], train: &LatentDesign) -> NewLatent {
    match (latent, train) {
        (LatentDesign::Grouped(g), LatentDesign::Grouped(tg)) => NewLatent::Grouped(
            rows.iter()
                .map(|&i| Some(g.group_index()[i]).filter(|&j| tg.counts()[j] > 0))
                .collect(),
        ),
        (LatentDesign::Crossed(c), LatentDesign::Crossed(tc)) => NewLatent::Crossed(
            rows.iter()
                .map(|&i| {
                    let j = c.first().group_index()[i];
                    let k = c.second().group_index()[i];
                    [
                        Some(j).filter(|&j| tc.first().counts()[j] > 0),
                        Some(k).filter(|&k| tc.second().counts()[k] > 0),
                    ]
                })
                .collect(),
        ),
        (LatentDesign::Gp(g), _) => NewLatent::Gp(g.coords().select_rows(rows)),
        _ => unreachable!("training design is a subset of the full design"),
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    data: &SimulatedDataset,
    train: &[usize],
    test: &[usize],
    method: CurvatureMethod,
    replication: usize,
) -> ReplicationRecord {
    let start = Instant::now();
    let mut record = ReplicationRecord {
        replication,
        method,
        rmse: f64::NAN,
        quantile_loss: f64::NAN,
        runtime_s: 0.0,
        theta_abs_error: Vec::new(),
        lambda_hat: f64::NAN,
        converged: false,
        warnings: Vec::new(),
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let intercept = cfg.fit_intercept.unwrap_or(cfg.design.default_intercept());
        let n = data.n_obs();
        let fixed = if intercept {
            FixedDesign::intercept(n)
        } else {
            FixedDesign::empty(n)
        };
        let full = QuantileModel::new(cfg.noise.tau, fixed, data.latent.clone(), method)?;
        let full = match &cfg.tkc {
            Some(t) => full.with_tkc(t.clone()),
            None => full,
        };
        let model = full.subset(train);
        let y_train: Vec<f64> = train.iter().map(|&i| data.y[i]).collect();
        let opt = OptimizerConfig {
            seed: derive_seed(cfg.seed, replication as u64, STREAM_FIT),
            ..cfg.optimizer.clone()
        };
        let fitted = fit(&model, &y_train, None, &opt)?;
        let new_fixed = full.fixed.subset(test);
        let new_latent = new_latent_for(&data.latent, test, &model.latent);
        let pred = predict(&model, &fitted, &new_fixed, &new_latent)?;
        let q_hat: Vec<f64> = pred.iter().map(|p| p.quantile).collect();
        let q_true: Vec<f64> = test.iter().map(|&i| data.q_true[i]).collect();
        let y_test: Vec<f64> = test.iter().map(|&i| data.y[i]).collect();
        record.rmse = rmse(&q_hat, &q_true)?;
        record.quantile_loss = quantile_loss(&y_test, &q_hat, cfg.noise.tau)?;
        record.theta_abs_error = theta_values(&fitted.theta_hat)
            .iter()
            .zip(theta_values(&data.meta.true_theta))
            .map(|(a, b)| (a - b).abs())
            .collect();
        record.lambda_hat = fitted.lambda_hat.get();
        record.converged = fitted.converged;
        record.warnings = fitted.warnings;
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record.runtime_s = start.elapsed().as_secs_f64();
    record
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Replicated generate / split / fit / predict loop.
///
/// Replications run in parallel on the current rayon pool. Each one draws
/// its data, split and optimizer jitter from seeds derived from
/// `(seed, replication)`, so results do not depend on the thread count.
/// A failed fit is recorded in its replication record and left out of the
/// aggregated rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut records: Vec<ReplicationRecord> = (0..cfg.replications)
        .into_par_iter()
        .flat_map_iter(|r| {
            let data = cfg
                .design
                .generate(&cfg.noise, derive_seed(cfg.seed, r as u64, STREAM_DATA));
            let recs: Vec<ReplicationRecord> = match data {
                Ok(data) => {
                    let (train, test) = train_test_split(data.n_obs(), cfg.train_fraction, cfg.seed, r as u64);
                    cfg.methods
                        .iter()
                        .map(|&m| run_one(cfg, &data, &train, &test, m, r))
                        .collect()
                }
                Err(e) => cfg
                    .methods
                    .iter()
                    .map(|&m| ReplicationRecord {
                        replication: r,
                        method: m,
                        rmse: f64::NAN,
                        quantile_loss: f64::NAN,
                        runtime_s: 0.0,
                        theta_abs_error: Vec::new(),
                        lambda_hat: f64::NAN,
                        converged: false,
                        warnings: Vec::new(),
                        error: Some(e.to_string()),
                    })
                    .collect(),
            };
            recs
        })
        .collect();
    records.sort_by_key(|r| {
        (
            r.replication,
            cfg.methods.iter().position(|m| *m == r.method).unwrap_or(usize::MAX),
        )
    });

    let (m, n_j) = cfg.design.report_sizes();
    let kind = match cfg.design {
        DesignSpec::Grouped { .. } => DesignKind::Grouped,
        DesignSpec::Crossed { .. } => DesignKind::Crossed,
        DesignSpec::Gp { .. } => DesignKind::Gp,
    };
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let ok: Vec<&ReplicationRecord> = records
            .iter()
            .filter(|r| r.method == method && r.error.is_none())
            .collect();
        if ok.is_empty() {
            continue;
        }
        let runtimes: Vec<f64> = ok.iter().map(|r| r.runtime_s).collect();
        let runtime = mean_se(&runtimes).0;
        let mut metrics: Vec<(String, Vec<f64>)> = vec![
            ("rmse".into(), ok.iter().map(|r| r.rmse).collect()),
            ("quantile_loss".into(), ok.iter().map(|r| r.quantile_loss).collect()),
        ];
        for (i, name) in theta_names(kind).iter().enumerate() {
            metrics.push(((*name).into(), ok.iter().map(|r| r.theta_abs_error[i]).collect()));
        }
        metrics.push(("lambda_hat".into(), ok.iter().map(|r| r.lambda_hat).collect()));
        for (metric, values) in metrics {
            let (mean, se) = mean_se(&values);
            rows.push(ReportRow {
                design: cfg.design.name().into(),
                noise: cfg.noise.family.name().into(),
                m,
                n_j,
                method,
                metric,
                mean,
                se,
                runtime_s: runtime,
            });
        }
    }
    Ok(ExperimentReport { rows, records })
}

/// Heteroscedastic regression for conformal calibration checks:
/// `x` has density proportional to `x^2` on `[0, 2]` and
/// `y ~ N(5 + sin(5 x), (1 + 0.6 |x|)^2)`.
pub fn gen_hetero_regression(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>().cbrt()).collect();
    let y = x
        .iter()
        .map(|&x| 5.0 + (5.0 * x).sin() + (1.0 + 0.6 * x.abs()) * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (x, y)
}
