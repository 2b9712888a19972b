//! Laplace-approximated marginal likelihood, empirical-Bayes fitting and
//! prediction.
//!
//! At the mode `b_hat` the approximation is
//!
//! `alpha * log p(y | b_hat) + log pi(b_hat) - 1/2 log det(K^{-1} + W) + m/2 log 2 pi`
//!
//! with `W = alpha * c * Z'Z` and `c` the Fisher or TKC curvature. The prior
//! normalizer and the determinant combine into `-1/2 log det(I + K W)`, which
//! is what gets computed: a sum of scalar logs for grouped designs, one dense
//! Cholesky for crossed designs and a Cholesky of `I + w K` for GP designs.
//!
//! Hyperparameters `(log theta, beta, log lambda)` are estimated by BFGS on
//! central finite-difference gradients. Every evaluation belonging to one
//! outer iterate starts the inner mode search from that iterate's mode, so
//! the differenced objective is a smooth function of the perturbation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ald::{pinball_loss, AlScale, QuantileLevel, TemperingRate};
use crate::curvature::{fisher_curvature, tkc_curvature, CurvatureEstimate, CurvatureMethod, TkcConfig};
use crate::design::{
    chol_logdet, matern15_cross, ztdz, DesignKind, FixedDesign, LatentDesign, PriorCovParams, SpdFactor, Weights,
};
use crate::error::{Error, Result};
use crate::mode::{b_matrix_cholesky, find_mode, ModeConfig, ModeProblem, ModeStart};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Model specification: quantile level, designs, curvature and tempering.
#[derive(Debug, Clone)]
pub struct QuantileModel {
    pub tau: QuantileLevel,
    pub fixed: FixedDesign,
    pub latent: LatentDesign,
    pub curvature: CurvatureMethod,
    pub tempering: TemperingRate,
    pub tkc: TkcConfig,
}

impl QuantileModel {
    pub fn new(
        tau: QuantileLevel,
        fixed: FixedDesign,
        latent: LatentDesign,
        curvature: CurvatureMethod,
    ) -> Result<Self> {
        if fixed.n_obs() != latent.n_obs() {
            return Err(Error::dims("fixed design rows", latent.n_obs(), fixed.n_obs()));
        }
        if curvature == CurvatureMethod::Population {
            return Err(Error::Unsupported(
                "population curvature needs the true noise density and is only a test oracle".into(),
            ));
        }
        let tkc = TkcConfig::for_design(latent.kind());
        Ok(Self {
            tau,
            fixed,
            latent,
            curvature,
            tempering: TemperingRate::default(),
            tkc,
        })
    }

    pub fn with_tempering(mut self, alpha: TemperingRate) -> Self {
        self.tempering = alpha;
        self
    }

    pub fn with_tkc(mut self, tkc: TkcConfig) -> Self {
        self.tkc = tkc;
        self
    }

    pub fn n_obs(&self) -> usize {
        self.latent.n_obs()
    }

    /// The same model restricted to a subset of observations.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            fixed: self.fixed.subset(rows),
            latent: self.latent.subset(rows),
            ..self.clone()
        }
    }
}

/// `(theta, beta, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub theta: PriorCovParams,
    pub beta: Vec<f64>,
    pub lambda: AlScale,
}

impl HyperParams {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta.to_log();
        v.extend_from_slice(&self.beta);
        v.push(self.lambda.get().ln());
        v
    }

    fn from_vec(kind: DesignKind, v: &[f64]) -> Result<Self> {
        let k = PriorCovParams::n_params(kind);
        let theta = PriorCovParams::from_log(kind, &v[..k]);
        theta.validate()?;
        Ok(Self {
            theta,
            beta: v[k..v.len() - 1].to_vec(),
            lambda: AlScale::new(v[v.len() - 1].exp())?,
        })
    }
}

/// Factorized posterior precision `K^{-1} + W`.
#[derive(Debug, Clone)]
pub(crate) enum PrecisionFactor {
    /// Grouped designs: diagonal entries `1 / sigma2 + w n_j`.
    Diagonal(Vec<f64>),
    /// Crossed designs: dense Cholesky factor.
    Dense(Cholesky<f64, Dyn>),
    /// GP designs: `Sigma = K (I + w K)^{-1}`.
    Gp {
        kernel: DMatrix<f64>,
        b_chol: SpdFactor,
        w: f64,
    },
}

/// Gaussian approximation `N(b_hat, (K^{-1} + W)^{-1})` and the Laplace value.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorApprox {
    pub b_hat: Vec<f64>,
    #[serde(skip)]
    pub mu_hat: Vec<f64>,
    /// `K^{-1} b_hat`.
    #[serde(skip)]
    pub precision_b: Vec<f64>,
    pub log_marginal: f64,
    /// `log det(I + K W)`.
    pub log_det_ratio: f64,
    /// Curvature used in `W`, before tempering.
    pub curvature: CurvatureEstimate,
    /// Effective per-observation weight `alpha * c`.
    pub weight: f64,
    pub mode_iterations: usize,
    /// Set when TKC could not be used and Fisher curvature was substituted.
    pub fallback: Option<String>,
    #[serde(skip)]
    pub(crate) precision: PrecisionFactor,
}

impl PosteriorApprox {
    pub fn dim(&self) -> usize {
        self.b_hat.len()
    }

    /// Column `k` of the posterior covariance, one solve.
    pub fn covariance_column(&self, k: usize) -> Result<Vec<f64>> {
        let m = self.dim();
        if k >= m {
            return Err(Error::Domain(format!("covariance column {k} out of range for dimension {m}")));
        }
        Ok(match &self.precision {
            PrecisionFactor::Diagonal(d) => {
                let mut e = vec![0.0; m];
                e[k] = 1.0 / d[k];
                e
            }
            PrecisionFactor::Dense(ch) => {
                let mut e = DVector::zeros(m);
                e[k] = 1.0;
                ch.solve(&e).as_slice().to_vec()
            }
            PrecisionFactor::Gp { kernel, b_chol, .. } => {
                let mut e = vec![0.0; m];
                e[k] = 1.0;
                (kernel * DVector::from_vec(b_chol.solve(&e))).as_slice().to_vec()
            }
        })
    }

    /// Posterior variance of coordinate `k`.
    pub fn variance(&self, k: usize) -> Result<f64> {
        Ok(self.covariance_column(k)?[k])
    }

}

/// Column `k` of the posterior covariance.
pub fn posterior_covariance_column(posterior: &PosteriorApprox, k: usize) -> Result<Vec<f64>> {
    posterior.covariance_column(k)
}

fn resolve_curvature(
    model: &QuantileModel,
    y: &[f64],
    mu_hat: &[f64],
    lambda: AlScale,
) -> (CurvatureEstimate, Option<String>) {
    match model.curvature {
        CurvatureMethod::Fisher | CurvatureMethod::Population => (fisher_curvature(model.tau, lambda), None),
        CurvatureMethod::Tkc => match tkc_curvature(y, mu_hat, lambda, model.tau, &model.tkc) {
            Ok(est) if !est.below_threshold => (est, None),
            Ok(est) => (
                fisher_curvature(model.tau, lambda),
                Some(format!(
                    "no TKC bandwidth reached the drop threshold {} (largest candidate {:.3e}); used Fisher curvature",
                    model.tkc.min_drop_threshold,
                    est.delta_mu.unwrap_or(f64::NAN)
                )),
            ),
            Err(e) => (
                fisher_curvature(model.tau, lambda),
                Some(format!("TKC failed ({e}); used Fisher curvature")),
            ),
        },
    }
}

/// Laplace approximation of the log-marginal likelihood at fixed
/// hyperparameters.
pub fn laplace_log_marginal(
    model: &QuantileModel,
    y: &[f64],
    params: &HyperParams,
    start: ModeStart<'_>,
    mode_cfg: &ModeConfig,
) -> Result<PosteriorApprox> {
    let n = model.n_obs();
    if y.len() != n {
        return Err(Error::dims("response", n, y.len()));
    }
    if params.beta.len() != model.fixed.n_coef() {
        return Err(Error::dims("beta", model.fixed.n_coef(), params.beta.len()));
    }
    if params.theta.kind() != model.latent.kind() {
        return Err(Error::Config(format!(
            "prior parameters of kind {:?} do not match a {:?} design",
            params.theta.kind(),
            model.latent.kind()
        )));
    }
    let mut offset = vec![0.0; n];
    model.fixed.apply(&params.beta, &mut offset);
    let problem = ModeProblem {
        y,
        offset: &offset,
        latent: &model.latent,
        prior: &params.theta,
        lambda: params.lambda,
        tau: model.tau,
        alpha: model.tempering,
    };
    let mode = find_mode(&problem, start, mode_cfg)?;
    let (curvature, fallback) = resolve_curvature(model, y, &mode.mu_hat, params.lambda);
    let alpha = model.tempering.get();
    let w = alpha * curvature.c;

    let quad = mode
        .b_hat
        .iter()
        .zip(&mode.precision_b)
        .map(|(b, a)| b * a)
        .sum::<f64>();
    let fit_term = alpha * mode.loglik - 0.5 * quad;

    let (log_det_ratio, precision) = match (&model.latent, &params.theta) {
        (LatentDesign::Grouped(g), PriorCovParams::Grouped { sigma2 }) => {
            let counts = g.counts();
            let ld = counts.iter().map(|&nj| (sigma2 * w * nj as f64).ln_1p()).sum::<f64>();
            let diag = counts.iter().map(|&nj| 1.0 / sigma2 + w * nj as f64).collect();
            (ld, PrecisionFactor::Diagonal(diag))
        }
        (LatentDesign::Crossed(c), PriorCovParams::Crossed { sigma2 }) => {
            let m1 = c.first().num_groups();
            let mut h = ztdz(&model.latent, Weights::Constant(w))?.to_dense();
            let mut log_det_k = 0.0;
            for i in 0..h.nrows() {
                let s = if i < m1 { sigma2[0] } else { sigma2[1] };
                h[(i, i)] += 1.0 / s;
                log_det_k += s.ln();
            }
            let ch = h
                .cholesky()
                .ok_or_else(|| Error::NonFinite("posterior precision is not positive definite".into()))?;
            (log_det_k + chol_logdet(&ch), PrecisionFactor::Dense(ch))
        }
        (LatentDesign::Gp(_), PriorCovParams::Gp { .. }) => {
            let kernel = mode.kernel.expect("GP mode carries its kernel");
            let b_chol = match mode.b_factor {
                Some((w_mode, f)) if w_mode == w => f,
                _ => b_matrix_cholesky(&kernel, w)?,
            };
            (b_chol.logdet(), PrecisionFactor::Gp { kernel, b_chol, w })
        }
        _ => unreachable!("kinds checked above"),
    };
    let log_marginal = fit_term - 0.5 * log_det_ratio;
    if !log_marginal.is_finite() {
        return Err(Error::NonFinite(format!("Laplace log-marginal at {params:?}")));
    }
    Ok(PosteriorApprox {
        b_hat: mode.b_hat,
        mu_hat: mode.mu_hat,
        precision_b: mode.precision_b,
        log_marginal,
        log_det_ratio,
        curvature,
        weight: w,
        mode_iterations: mode.iterations,
        fallback,
        precision,
    })
}

/// `-1/2 log det(K^{-1} + W) + m/2 log 2 pi` differs from the value above only
/// through the prior normalizer; exposed for tests that evaluate the textbook
/// form term by term.
pub fn gaussian_normalizer(m: usize) -> f64 {
    0.5 * m as f64 * LN_2PI
}

/// Outer optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Relative finite-difference step, `h = fd_step * (1 + |x|)`.
    pub fd_step: f64,
    /// Number of starting points; the first is the deterministic
    /// initialization, the others are jittered copies of it.
    pub restarts: usize,
    /// Standard deviation of the jitter on log-scale parameters.
    pub jitter_sd: f64,
    pub seed: u64,
    pub mode: ModeConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-8,
            fd_step: 1e-5,
            restarts: 3,
            jitter_sd: 0.5,
            seed: 0,
            mode: ModeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartSummary {
    pub initial: HyperParams,
    pub log_marginal: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Last evaluation error seen during this run, if any.
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub theta_hat: PriorCovParams,
    pub beta_hat: Vec<f64>,
    pub lambda_hat: AlScale,
    pub posterior: PosteriorApprox,
    /// Log-marginal after each accepted step of the winning run.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: Vec<RestartSummary>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn params(&self) -> HyperParams {
        HyperParams {
            theta: self.theta_hat,
            beta: self.beta_hat.clone(),
            lambda: self.lambda_hat,
        }
    }
}

fn quantile_of(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((tau * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

/// Deterministic starting values.
pub fn initial_params(model: &QuantileModel, y: &[f64]) -> Result<HyperParams> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Config("cannot fit a model to zero observations".into()));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let s2 = if var > 0.0 { 0.5 * var } else { 1.0 };
    let tau = model.tau.get();

    let p = model.fixed.n_coef();
    let mut beta = vec![0.0; p];
    if p > 0 {
        let x = model.fixed.matrix();
        let svd = x.clone().svd(true, true);
        let sol = svd
            .solve(&DVector::from_column_slice(y), 1e-12)
            .map_err(|e| Error::NonFinite(format!("least-squares initialization: {e}")))?;
        beta.copy_from_slice(sol.as_slice());
    }
    let mut resid = y.to_vec();
    let mut fitted = vec![0.0; n];
    model.fixed.apply(&beta, &mut fitted);
    resid.iter_mut().zip(&fitted).for_each(|(r, f)| *r -= f);
    let shift = quantile_of(&resid, tau);
    if let Some(k) = model.fixed.intercept_column() {
        beta[k] += shift;
    }
    let lambda = resid.iter().map(|&r| pinball_loss(r, shift, model.tau)).sum::<f64>() / n as f64;
    let lambda = AlScale::new(if lambda > 0.0 { lambda } else { s2.sqrt() })?;

    let theta = match &model.latent {
        LatentDesign::Grouped(_) => PriorCovParams::Grouped { sigma2: s2 },
        LatentDesign::Crossed(_) => PriorCovParams::Crossed { sigma2: [s2, s2] },
        LatentDesign::Gp(g) => {
            let range = g.input_range();
            PriorCovParams::Gp {
                sigma2: s2,
                length_scale: if range > 0.0 { 0.2 * range } else { 1.0 },
            }
        }
    };
    Ok(HyperParams { theta, beta, lambda })
}

struct Evaluator<'a> {
    model: &'a QuantileModel,
    y: &'a [f64],
    mode_cfg: ModeConfig,
    evaluations: usize,
    last_error: Option<String>,
}

impl Evaluator<'_> {
    fn eval(&mut self, x: &[f64], warm: &[f64]) -> Option<PosteriorApprox> {
        self.evaluations += 1;
        let params = match HyperParams::from_vec(self.model.latent.kind(), x) {
            Ok(p) => p,
            Err(e) => {
                self.last_error = Some(e.to_string());
                return None;
            }
        };
        let start = if warm.is_empty() {
            ModeStart::Zero
        } else if self.model.latent.kind() == DesignKind::Gp {
            ModeStart::Precision(warm)
        } else {
            ModeStart::Latent(warm)
        };
        match laplace_log_marginal(self.model, self.y, &params, start, &self.mode_cfg) {
            Ok(p) => Some(p),
            Err(e) => {
                self.last_error = Some(e.to_string());
                None
            }
        }
    }

    fn warm_of(&self, post: &PosteriorApprox) -> Vec<f64> {
        if self.model.latent.kind() == DesignKind::Gp {
            post.precision_b.clone()
        } else {
            post.b_hat.clone()
        }
    }

    /// Central-difference gradient of the log-marginal.
    fn gradient(&mut self, x: &[f64], warm: &[f64], rel_step: f64) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let h = rel_step * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = self.eval(&xp, warm)?.log_marginal;
            xp[i] = x[i] - h;
            let fm = self.eval(&xp, warm)?.log_marginal;
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        Some(g)
    }
}

struct RunOutcome {
    x: Vec<f64>,
    posterior: PosteriorApprox,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS ascent on the log-marginal from `x0`.
fn bfgs_run(ev: &mut Evaluator<'_>, x0: Vec<f64>, cfg: &OptimizerConfig) -> Option<RunOutcome> {
    let d = x0.len();
    let mut x = x0;
    let mut post = ev.eval(&x, &[])?;
    let mut warm = ev.warm_of(&post);
    let mut f = post.log_marginal;
    let mut trace = vec![f];
    // ascent: work with the negated objective's gradient
    let mut g: Vec<f64> = ev.gradient(&x, &warm, cfg.fd_step)?.iter().map(|v| -v).collect();
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut first = true;
    let mut converged = false;
    let mut iterations = 0;
    const MAX_STEP: f64 = 2.0;
    const MAX_HALVINGS: usize = 20;

    while iterations < cfg.max_iter {
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let quasi_newton: Vec<f64> = (-(&hinv * &gv)).as_slice().to_vec();
        let steepest: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut accepted = None;
        for (attempt, mut p) in [quasi_newton, steepest].into_iter().enumerate() {
            if attempt == 1 {
                // the quasi-Newton direction failed; retry once along the gradient
                hinv = DMatrix::identity(d, d);
                first = true;
            }
            if dot(&p, &g) >= 0.0 {
                continue;
            }
            let pmax = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if pmax > MAX_STEP {
                p.iter_mut().for_each(|v| *v *= MAX_STEP / pmax);
            }
            let slope = dot(&g, &p);
            let mut step = 1.0;
            for _ in 0..MAX_HALVINGS {
                let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
                if let Some(pn) = ev.eval(&xn, &warm) {
                    // minimizing -f: -f_new <= -f + c step slope
                    if -pn.log_marginal <= -f + 1e-4 * step * slope {
                        accepted = Some((xn, pn));
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((xn, pn)) = accepted else {
            // no ascent along either direction at the resolution of the line search
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        x = xn;
        // Re-solve the inner problem from the new iterate's own mode so that
        // the reference value, the gradient and the next line search all
        // share one warm start.
        let warm_new = ev.warm_of(&pn);
        post = match ev.eval(&x, &warm_new) {
            Some(p) => p,
            None => pn,
        };
        warm = ev.warm_of(&post);
        let fnew = post.log_marginal;
        let rel = (fnew - f).abs() / f.abs().max(1.0);
        f = fnew;
        trace.push(f);
        if rel < cfg.rel_tol {
            converged = true;
            break;
        }
        let Some(gn) = ev.gradient(&x, &warm, cfg.fd_step) else {
            break;
        };
        let gn: Vec<f64> = gn.iter().map(|v| -v).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            let sv = DVector::from_column_slice(&s);
            let yvv = DVector::from_column_slice(&yv);
            if first {
                hinv = DMatrix::identity(d, d) * (sy / dot(&yv, &yv));
                first = false;
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let a = &i - &sv * yvv.transpose() * rho;
            let b = &i - &yvv * sv.transpose() * rho;
            hinv = &a * &hinv * &b + &sv * sv.transpose() * rho;
        }
        g = gn;
    }
    Some(RunOutcome {
        x,
        posterior: post,
        trace,
        iterations,
        converged,
    })
}

/// Empirical-Bayes estimate of `(theta, beta, lambda)`.
pub fn fit(
    model: &QuantileModel,
    y: &[f64],
    init: Option<&HyperParams>,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    if y.len() != model.n_obs() {
        return Err(Error::dims("response", model.n_obs(), y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("response contains non-finite values".into()));
    }
    model.tkc.validate()?;
    let base = match init {
        Some(p) => p.clone(),
        None => initial_params(model, y)?,
    };
    let kind = model.latent.kind();
    let k = PriorCovParams::n_params(kind);
    // evaluate once so a bad start reports the underlying error
    laplace_log_marginal(model, y, &base, ModeStart::Zero, &cfg.mode)?;

    let mut ev = Evaluator {
        model,
        y,
        mode_cfg: cfg.mode,
        evaluations: 0,
        last_error: None,
    };
    let x0 = base.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.jitter_sd.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut best: Option<RunOutcome> = None;
    let mut restarts = Vec::new();
    for r in 0..cfg.restarts.max(1) {
        let mut xs = x0.clone();
        if r > 0 {
            for i in (0..k).chain([xs.len() - 1]) {
                xs[i] += jitter.sample(&mut rng);
            }
        }
        let initial = HyperParams::from_vec(kind, &xs)?;
        ev.last_error = None;
        let Some(run) = bfgs_run(&mut ev, xs, cfg) else {
            restarts.push(RestartSummary {
                initial,
                log_marginal: f64::NAN,
                iterations: 0,
                converged: false,
                last_error: ev.last_error.take(),
            });
            continue;
        };
        restarts.push(RestartSummary {
            initial,
            log_marginal: run.posterior.log_marginal,
            iterations: run.iterations,
            converged: run.converged,
            last_error: ev.last_error.take(),
        });
        if best
            .as_ref()
            .is_none_or(|b| run.posterior.log_marginal > b.posterior.log_marginal)
        {
            best = Some(run);
        }
    }
    let best = best.ok_or_else(|| Error::NonFinite("every optimizer start failed".into()))?;
    let params = HyperParams::from_vec(kind, &best.x)?;
    let mut warnings = Vec::new();
    if let Some(w) = &best.posterior.fallback {
        warnings.push(w.clone());
    }
    if !best.converged {
        warnings.push(format!("optimizer stopped after {} iterations without converging", best.iterations));
    }
    Ok(FitResult {
        theta_hat: params.theta,
        beta_hat: params.beta,
        lambda_hat: params.lambda,
        posterior: best.posterior,
        trace: best.trace,
        converged: best.converged,
        iterations: best.iterations,
        evaluations: ev.evaluations,
        restarts,
        warnings,
    })
}

/// Latent part of new prediction points.
#[derive(Debug, Clone, PartialEq)]
pub enum NewLatent {
    /// Group index per point; `None` for a group unseen in training.
    Grouped(Vec<Option<usize>>),
    /// Level of each factor per point.
    Crossed(Vec<[Option<usize>; 2]>),
    /// Input coordinates (`n_new x d`).
    Gp(DMatrix<f64>),
}

impl NewLatent {
    pub fn len(&self) -> usize {
        match self {
            NewLatent::Grouped(v) => v.len(),
            NewLatent::Crossed(v) => v.len(),
            NewLatent::Gp(x) => x.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub quantile: f64,
    pub latent_sd: f64,
}

/// Predicted conditional quantile and posterior sd of the latent part.
pub fn predict(
    model: &QuantileModel,
    fit: &FitResult,
    new_fixed: &FixedDesign,
    new_latent: &NewLatent,
) -> Result<Vec<Prediction>> {
    predict_with(model, &fit.params(), &fit.posterior, new_fixed, new_latent)
}

/// As [`predict`] for an arbitrary posterior approximation.
pub fn predict_with(
    model: &QuantileModel,
    params: &HyperParams,
    post: &PosteriorApprox,
    new_fixed: &FixedDesign,
    new_latent: &NewLatent,
) -> Result<Vec<Prediction>> {
    let n_new = new_latent.len();
    if new_fixed.n_obs() != n_new {
        return Err(Error::dims("new fixed design rows", n_new, new_fixed.n_obs()));
    }
    if new_fixed.n_coef() != params.beta.len() {
        return Err(Error::dims("new fixed design columns", params.beta.len(), new_fixed.n_coef()));
    }
    let mut fixed = vec![0.0; n_new];
    new_fixed.apply(&params.beta, &mut fixed);
    let b = &post.b_hat;

    match (&model.latent, new_latent, &params.theta) {
        (LatentDesign::Grouped(g), NewLatent::Grouped(ids), PriorCovParams::Grouped { sigma2 }) => ids
            .iter()
            .zip(&fixed)
            .map(|(id, &f)| match id {
                Some(j) if *j < g.num_groups() => Ok(Prediction {
                    quantile: f + b[*j],
                    latent_sd: post.variance(*j)?.sqrt(),
                }),
                Some(j) => Err(Error::Domain(format!("group {j} out of range"))),
                None => Ok(Prediction {
                    quantile: f,
                    latent_sd: sigma2.sqrt(),
                }),
            })
            .collect(),
        (LatentDesign::Crossed(c), NewLatent::Crossed(ids), PriorCovParams::Crossed { sigma2 }) => {
            let m1 = c.first().num_groups();
            let m2 = c.second().num_groups();
            ids.iter()
                .zip(&fixed)
                .map(|(pair, &f)| {
                    let mut q = f;
                    let mut var = 0.0;
                    let mut known = Vec::with_capacity(2);
                    for (factor, id) in pair.iter().enumerate() {
                        let (levels, off) = if factor == 0 { (m1, 0) } else { (m2, m1) };
                        match id {
                            Some(j) if *j < levels => known.push(off + j),
                            Some(j) => return Err(Error::Domain(format!("level {j} out of range"))),
                            None => var += sigma2[factor],
                        }
                    }
                    for &k in &known {
                        q += b[k];
                    }
                    if let Some(&k0) = known.first() {
                        let col = post.covariance_column(k0)?;
                        var += col[k0];
                        if let Some(&k1) = known.get(1) {
                            var += 2.0 * col[k1] + post.variance(k1)?;
                        }
                    }
                    Ok(Prediction {
                        quantile: q,
                        latent_sd: var.max(0.0).sqrt(),
                    })
                })
                .collect()
        }
        (
            LatentDesign::Gp(train),
            NewLatent::Gp(x_new),
            PriorCovParams::Gp {
                sigma2,
                length_scale,
            },
        ) => {
            if x_new.ncols() != train.dim() {
                return Err(Error::dims("new GP inputs", train.dim(), x_new.ncols()));
            }
            let PrecisionFactor::Gp { b_chol, w, .. } = &post.precision else {
                return Err(Error::Config("posterior does not belong to a GP design".into()));
            };
            let kstar = matern15_cross(train.coords(), x_new, *sigma2, *length_scale);
            let a = DVector::from_column_slice(&post.precision_b);
            let mean = kstar.transpose() * &a;
            // Var = k** - w k*' (I + w K)^{-1} k*
            let v = b_chol.solve_lower(&kstar);
            Ok((0..x_new.nrows())
                .map(|j| {
                    let vj = v.column(j).norm_squared();
                    Prediction {
                        quantile: fixed[j] + mean[j],
                        latent_sd: (sigma2 - w * vj).max(0.0).sqrt(),
                    }
                })
                .collect())
        }
        _ => Err(Error::Config("new points do not match the model's latent design".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ald::{ald_sample, total_loglik};
    use crate::design::{CrossedDesign, GpDesign, GroupedDesign};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn lam(v: f64) -> AlScale {
        AlScale::new(v).unwrap()
    }
    fn tau(v: f64) -> QuantileLevel {
        QuantileLevel::new(v).unwrap()
    }

    fn grouped_model(sizes: &[usize], t: f64, method: CurvatureMethod) -> QuantileModel {
        let idx: Vec<usize> = sizes.iter().enumerate().flat_map(|(j, &n)| vec![j; n]).collect();
        let n = idx.len();
        let latent = LatentDesign::Grouped(GroupedDesign::new(idx, sizes.len()).unwrap());
        QuantileModel::new(tau(t), FixedDesign::empty(n), latent, method).unwrap()
    }

    fn grouped_data(seed: u64, m: usize, nj: usize, t: f64, l: f64) -> (QuantileModel, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = grouped_model(&vec![nj; m], t, CurvatureMethod::Fisher);
        let b: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let LatentDesign::Grouped(g) = &model.latent else { unreachable!() };
        let y = g.group_index().iter().map(|&j| ald_sample(&mut rng, b[j], lam(l), tau(t))).collect();
        (model, y, b)
    }

    fn grouped_params(s2: f64, l: f64) -> HyperParams {
        HyperParams {
            theta: PriorCovParams::Grouped { sigma2: s2 },
            beta: vec![],
            lambda: lam(l),
        }
    }

    #[test]
    fn empty_group_gives_zero() {
        let latent = LatentDesign::Grouped(GroupedDesign::new(vec![], 1).unwrap());
        let model = QuantileModel::new(tau(0.5), FixedDesign::empty(0), latent, CurvatureMethod::Fisher).unwrap();
        let post = laplace_log_marginal(&model, &[], &grouped_params(1.0, 1.0), ModeStart::Zero, &ModeConfig::default())
            .unwrap();
        assert_eq!(post.log_marginal, 0.0);
    }

    #[test]
    fn matches_textbook_form() {
        let (model, y, _) = grouped_data(1, 4, 30, 0.8, 0.5);
        let params = grouped_params(0.7, 0.5);
        let post = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        let mut mu = vec![0.0; y.len()];
        model.latent.add_zb(&post.b_hat, &mut mu);
        let ll = total_loglik(&y, &mu, lam(0.5), tau(0.8)).unwrap();
        let prior = crate::design::GaussianPrior::new(&model.latent, &params.theta).unwrap();
        let lp = prior.logdensity(&post.b_hat).unwrap();
        let c: f64 = 0.8 * 0.2 / 0.25;
        let logdet_prec: f64 = (0..4).map(|_| (1.0 / 0.7 + 30.0 * c).ln()).sum();
        let expected = ll + lp - 0.5 * logdet_prec + gaussian_normalizer(4);
        assert_relative_eq!(post.log_marginal, expected, max_relative = 1e-12);
    }

    #[test]
    fn tempering_one_is_bit_identical() {
        let (model, y, _) = grouped_data(2, 3, 20, 0.5, 1.0);
        let params = grouped_params(1.0, 1.0);
        let a = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        let tempered = model.clone().with_tempering(TemperingRate::new(1.0).unwrap());
        let b = laplace_log_marginal(&tempered, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        assert_eq!(a.log_marginal.to_bits(), b.log_marginal.to_bits());
        let mut prev: Option<f64> = None;
        for alpha in [0.999, 0.9999, 0.99999] {
            let m = model.clone().with_tempering(TemperingRate::new(alpha).unwrap());
            let v = laplace_log_marginal(&m, &y, &params, ModeStart::Zero, &ModeConfig::default())
                .unwrap()
                .log_marginal;
            if let Some(p) = prev {
                assert!((v - a.log_marginal).abs() <= (p - a.log_marginal).abs() + 1e-9);
            }
            prev = Some(v);
        }
    }

    #[test]
    fn permutation_invariance() {
        let (model, y, _) = grouped_data(3, 5, 10, 0.3, 0.4);
        let params = grouped_params(1.3, 0.4);
        let a = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        let LatentDesign::Grouped(g) = &model.latent else { unreachable!() };
        let relabel = [3usize, 0, 4, 1, 2];
        let idx: Vec<usize> = g.group_index().iter().map(|&j| relabel[j]).collect();
        let model2 = QuantileModel::new(
            tau(0.3),
            FixedDesign::empty(y.len()),
            LatentDesign::Grouped(GroupedDesign::new(idx, 5).unwrap()),
            CurvatureMethod::Fisher,
        )
        .unwrap();
        let b = laplace_log_marginal(&model2, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        assert_relative_eq!(a.log_marginal, b.log_marginal, max_relative = 1e-12);
    }

    #[test]
    fn grouped_covariance_closed_form() {
        let (model, y, _) = grouped_data(4, 3, 25, 0.8, 0.3);
        let params = grouped_params(0.9, 0.3);
        let post = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        let c = 0.8 * 0.2 / 0.09;
        for k in 0..3 {
            let col = posterior_covariance_column(&post, k).unwrap();
            assert_relative_eq!(col[k], 1.0 / (1.0 / 0.9 + 25.0 * c), max_relative = 1e-14);
            assert!(col.iter().enumerate().all(|(i, v)| i == k || *v == 0.0));
        }
        assert!(posterior_covariance_column(&post, 3).is_err());
    }

    #[test]
    fn crossed_logdet_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let g1: Vec<usize> = (0..n).map(|_| rng.random_range(0..20)).collect();
        let g2: Vec<usize> = (0..n).map(|_| rng.random_range(0..15)).collect();
        let latent = LatentDesign::Crossed(
            CrossedDesign::new(GroupedDesign::new(g1, 20).unwrap(), GroupedDesign::new(g2, 15).unwrap()).unwrap(),
        );
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let model = QuantileModel::new(tau(0.6), FixedDesign::empty(n), latent.clone(), CurvatureMethod::Fisher).unwrap();
        let params = HyperParams {
            theta: PriorCovParams::Crossed { sigma2: [0.8, 1.7] },
            beta: vec![],
            lambda: lam(0.6),
        };
        let post = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        let c = 0.6 * 0.4 / 0.36;
        let mut h = ztdz(&latent, Weights::Constant(c)).unwrap().to_dense();
        for i in 0..35 {
            h[(i, i)] += if i < 20 { 1.0 / 0.8 } else { 1.0 / 1.7 };
        }
        let logdet_eig: f64 = h.clone().symmetric_eigen().eigenvalues.iter().map(|e| e.ln()).sum();
        let mut mu = vec![0.0; n];
        latent.add_zb(&post.b_hat, &mut mu);
        let ll = total_loglik(&y, &mu, lam(0.6), tau(0.6)).unwrap();
        let prior = crate::design::GaussianPrior::new(&latent, &params.theta).unwrap();
        let expected = ll + prior.logdensity(&post.b_hat).unwrap() - 0.5 * logdet_eig + gaussian_normalizer(35);
        assert!((post.log_marginal - expected).abs() < 1e-8);
        // covariance columns invert the precision
        let col = post.covariance_column(7).unwrap();
        let e = &h * DVector::from_column_slice(&col);
        for i in 0..35 {
            assert!((e[i] - if i == 7 { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }

    #[test]
    fn gp_single_point_scalar_formula() {
        let x = DMatrix::from_row_slice(1, 1, &[0.2]);
        let latent = LatentDesign::Gp(GpDesign::new(x).unwrap());
        let model = QuantileModel::new(tau(0.5), FixedDesign::empty(1), latent, CurvatureMethod::Fisher).unwrap();
        let params = HyperParams {
            theta: PriorCovParams::Gp {
                sigma2: 2.0,
                length_scale: 0.3,
            },
            beta: vec![],
            lambda: lam(1.0),
        };
        let post = laplace_log_marginal(&model, &[10.0], &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
        let c = 0.25;
        assert_relative_eq!(post.variance(0).unwrap(), 1.0 / (0.5 + c), max_relative = 1e-12);
        // mode: tau/lambda = b/sigma2 -> b = 1
        assert_relative_eq!(post.b_hat[0], 1.0, epsilon = 1e-6);
        let expected = 0.25f64.ln() - 0.5 * 9.0 - 0.5 * 1.0 / 2.0 - 0.5 * (1.0 + 2.0 * c).ln();
        assert_relative_eq!(post.log_marginal, expected, epsilon = 1e-6);
    }

    #[test]
    fn gp_prediction_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 30;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let latent = LatentDesign::Gp(GpDesign::new(x.clone()).unwrap());
        let y: Vec<f64> = (0..n).map(|i| (4.0 * x[(i, 0)]).sin()).collect();
        let model = QuantileModel::new(tau(0.5), FixedDesign::empty(n), latent, CurvatureMethod::Fisher).unwrap();
        let theta = PriorCovParams::Gp {
            sigma2: 1.0,
            length_scale: 0.3,
        };
        let mut sds = Vec::new();
        for l in [1.0, 1e-2] {
            let params = HyperParams {
                theta,
                beta: vec![],
                lambda: lam(l),
            };
            let cfg = ModeConfig {
                max_iter: 2000,
                ..Default::default()
            };
            let post = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &cfg).unwrap();
            let pred = predict_with(
                &model,
                &params,
                &post,
                &FixedDesign::empty(1),
                &NewLatent::Gp(x.rows(0, 1).into_owned()),
            )
            .unwrap();
            // latent sd matches the covariance column
            assert_relative_eq!(pred[0].latent_sd.powi(2), post.variance(0).unwrap(), max_relative = 1e-8, epsilon = 1e-12);
            sds.push(pred[0].latent_sd);
        }
        // curvature scaled by 1e4 drives the variance at a training input towards 0
        assert!(sds[1] < 0.1 * sds[0], "{sds:?}");
    }

    #[test]
    fn grouped_prediction_concentrates() {
        let mut prev = f64::INFINITY;
        for nj in [10usize, 100, 1000] {
            let (model, y, b) = grouped_data(7, 2, nj, 0.7, 0.5);
            let params = grouped_params(1.0, 0.5);
            let post = laplace_log_marginal(&model, &y, &params, ModeStart::Zero, &ModeConfig::default()).unwrap();
            let pred = predict_with(
                &model,
                &params,
                &post,
                &FixedDesign::empty(2),
                &NewLatent::Grouped(vec![Some(0), None]),
            )
            .unwrap();
            assert!(pred[0].latent_sd < prev);
            prev = pred[0].latent_sd;
            assert_eq!(pred[1].quantile, 0.0);
            assert_eq!(pred[1].latent_sd, 1.0);
            if nj == 1000 {
                assert!((pred[0].quantile - b[0]).abs() < 0.1);
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let (model, y, _) = grouped_data(8, 20, 30, 0.8, 0.3);
        let cfg = OptimizerConfig {
            restarts: 2,
            ..Default::default()
        };
        let a = fit(&model, &y, None, &cfg).unwrap();
        let b = fit(&model, &y, None, &cfg).unwrap();
        assert_eq!(a.posterior.log_marginal.to_bits(), b.posterior.log_marginal.to_bits());
        assert_eq!(a.theta_hat, b.theta_hat);
        for w in a.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let init = initial_params(&model, &y).unwrap();
        let v0 = laplace_log_marginal(&model, &y, &init, ModeStart::Zero, &ModeConfig::default())
            .unwrap()
            .log_marginal;
        assert!(a.posterior.log_marginal >= v0);
    }

    #[test]
    fn initialization_matches_moment_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let y: Vec<f64> = (0..n).map(|_| ald_sample(&mut rng, 3.0, lam(0.7), tau(0.25))).collect();
        let latent = LatentDesign::Grouped(GroupedDesign::new(vec![0; n], 1).unwrap());
        let model = QuantileModel::new(tau(0.25), FixedDesign::intercept(n), latent, CurvatureMethod::Fisher).unwrap();
        let init = initial_params(&model, &y).unwrap();
        assert!((init.lambda.get() / 0.7 - 1.0).abs() < 0.01, "{}", init.lambda.get());
        assert!((init.beta[0] - 3.0).abs() < 0.02);
    }

    #[test]
    fn dimension_and_kind_errors() {
        let (model, y, _) = grouped_data(10, 2, 5, 0.5, 1.0);
        let gp = HyperParams {
            theta: PriorCovParams::Gp {
                sigma2: 1.0,
                length_scale: 1.0,
            },
            beta: vec![],
            lambda: lam(1.0),
        };
        assert!(laplace_log_marginal(&model, &y, &gp, ModeStart::Zero, &ModeConfig::default()).is_err());
        assert!(laplace_log_marginal(&model, &y[..3], &grouped_params(1.0, 1.0), ModeStart::Zero, &ModeConfig::default()).is_err());
        assert!(QuantileModel::new(tau(0.5), FixedDesign::empty(3), model.latent.clone(), CurvatureMethod::Fisher).is_err());
    }
}
