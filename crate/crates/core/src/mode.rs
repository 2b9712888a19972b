//! Posterior mode of the latent vector.
//!
//! The objective is `alpha * log p(y | offset + Z b) - b' K^{-1} b / 2`.
//!
//! Grouped designs are separable across groups, and each group's objective is
//! a concave piecewise quadratic in one variable, so its maximizer is computed
//! exactly from the sorted residuals and the start point is not used.
//!
//! Crossed and GP designs use damped Fisher scoring. The Newton system always
//! uses the Fisher curvature `tau (1 - tau) / lambda^2`, whatever curvature the
//! outer approximation uses, and every step is backtracked on the exact
//! non-smooth objective. For GP designs the iterate carries both `b` and
//! `a = K^{-1} b`; the Newton step is `da = B^{-1} g`, `db = K da` with
//! `B = I + w K`, so `K` is never inverted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ald::{ald_fisher_diag, ald_score_mu, total_loglik_shifted, AlScale, QuantileLevel, TemperingRate};
use crate::design::{matern15, ztdz, LatentDesign, PriorCovParams, SpdFactor, Weights};
use crate::error::{Error, Result};

/// Inner-loop tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub step_tol: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-8,
            step_tol: 1e-6,
            armijo_c: 1e-4,
            max_halvings: 50,
        }
    }
}

/// Everything the inner problem depends on.
#[derive(Debug, Clone, Copy)]
pub struct ModeProblem<'a> {
    pub y: &'a [f64],
    /// Fixed part of the linear predictor, `X beta`.
    pub offset: &'a [f64],
    pub latent: &'a LatentDesign,
    pub prior: &'a PriorCovParams,
    pub lambda: AlScale,
    pub tau: QuantileLevel,
    pub alpha: TemperingRate,
}

/// Starting point of the search.
#[derive(Debug, Clone, Copy, Default)]
pub enum ModeStart<'a> {
    #[default]
    Zero,
    /// Initial latent vector `b`.
    Latent(&'a [f64]),
    /// Initial `a = K^{-1} b`; the start is `b = K a`. Convenient for warm
    /// starts of GP designs across changing kernel parameters.
    Precision(&'a [f64]),
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub b_hat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    /// `K^{-1} b_hat`.
    pub precision_b: Vec<f64>,
    /// Tempered log-likelihood plus `-b' K^{-1} b / 2`; the Gaussian
    /// normalizing constant of the prior is not included.
    pub log_posterior_at_mode: f64,
    /// Untempered log-likelihood at the mode.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub(crate) kernel: Option<DMatrix<f64>>,
    /// Factor of `I + w K` used by the GP iteration, with its `w`.
    pub(crate) b_factor: Option<(f64, SpdFactor)>,
}

impl ModeResult {
    /// Dense prior covariance for GP designs.
    pub fn kernel(&self) -> Option<&DMatrix<f64>> {
        self.kernel.as_ref()
    }
}

fn prior_variances(latent: &LatentDesign, prior: &PriorCovParams) -> Result<Option<Vec<f64>>> {
    prior.validate()?;
    match (latent, prior) {
        (LatentDesign::Grouped(g), PriorCovParams::Grouped { sigma2 }) => Ok(Some(vec![*sigma2; g.num_groups()])),
        (LatentDesign::Crossed(c), PriorCovParams::Crossed { sigma2 }) => {
            let mut v = vec![sigma2[0]; c.first().num_groups()];
            v.extend(std::iter::repeat_n(sigma2[1], c.second().num_groups()));
            Ok(Some(v))
        }
        (LatentDesign::Gp(_), PriorCovParams::Gp { .. }) => Ok(None),
        _ => Err(Error::Config(format!(
            "prior parameters of kind {:?} do not match a {:?} design",
            prior.kind(),
            latent.kind()
        ))),
    }
}

/// Cholesky of `I + w K`.
pub(crate) fn b_matrix_cholesky(k: &DMatrix<f64>, w: f64) -> Result<SpdFactor> {
    let mut b = k * w;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    SpdFactor::new(&b).ok_or_else(|| Error::NonFinite("I + W K is not positive definite".into()))
}

pub fn find_mode(problem: &ModeProblem<'_>, start: ModeStart<'_>, config: &ModeConfig) -> Result<ModeResult> {
    let n = problem.latent.n_obs();
    let m = problem.latent.latent_dim();
    if problem.y.len() != n {
        return Err(Error::dims("response", n, problem.y.len()));
    }
    if problem.offset.len() != n {
        return Err(Error::dims("offset", n, problem.offset.len()));
    }
    match start {
        ModeStart::Latent(v) | ModeStart::Precision(v) if v.len() != m => {
            return Err(Error::dims("mode start", m, v.len()));
        }
        _ => {}
    }
    match prior_variances(problem.latent, problem.prior)? {
        Some(var) => match problem.latent {
            LatentDesign::Grouped(_) => grouped_mode(problem, &var, config),
            _ => joint_mode_diagonal(problem, &var, start, config),
        },
        None => joint_mode_gp(problem, start, config),
    }
}

fn objective(problem: &ModeProblem<'_>, mu: &[f64], ba: f64) -> f64 {
    problem.alpha.get() * total_loglik_shifted(problem.y, mu, 0.0, problem.lambda, problem.tau) - 0.5 * ba
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn grouped_mode(problem: &ModeProblem<'_>, var: &[f64], config: &ModeConfig) -> Result<ModeResult> {
    let LatentDesign::Grouped(g) = problem.latent else {
        unreachable!()
    };
    let scale = problem.alpha.get() / problem.lambda.get();
    let tau = problem.tau.get();
    let mut b = vec![0.0; g.num_groups()];
    let mut r = Vec::new();
    for (j, bj) in b.iter_mut().enumerate() {
        r.clear();
        r.extend(g.members(j).iter().map(|&i| problem.y[i] - problem.offset[i]));
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("residuals of group {j}")));
        }
        r.sort_by(f64::total_cmp);
        *bj = group_mode_exact(&r, var[j], scale, tau);
    }
    finish(problem, b, var, None, 1, true, Vec::new(), config)
}

/// Maximizer of `-scale * sum_i rho_tau(r_i - b) - b^2 / (2 s2)` for sorted
/// residuals `r`.
///
/// With `k` residuals below `b` the derivative is `scale (tau n - k) - b / s2`,
/// which is linear on each segment between consecutive residuals and
/// decreasing overall. The maximizer is either the root on the first segment
/// whose root does not exceed its upper end, or the kink at that segment's
/// lower end.
pub(crate) fn group_mode_exact(r: &[f64], s2: f64, scale: f64, tau: f64) -> f64 {
    let n = r.len();
    for k in 0..=n {
        let root = s2 * scale * (tau * n as f64 - k as f64);
        let upper = if k < n { r[k] } else { f64::INFINITY };
        if root <= upper {
            return if k == 0 || root >= r[k - 1] { root } else { r[k - 1] };
        }
    }
    unreachable!("the last segment is unbounded above")
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &ModeProblem<'_>,
    b: Vec<f64>,
    var: &[f64],
    kernel_and_a: Option<(DMatrix<f64>, Vec<f64>)>,
    iterations: usize,
    converged: bool,
    mut trace: Vec<f64>,
    config: &ModeConfig,
) -> Result<ModeResult> {
    let mut mu = problem.offset.to_vec();
    problem.latent.add_zb(&b, &mut mu);
    let (kernel, a) = match kernel_and_a {
        Some((k, a)) => (Some(k), a),
        None => (None, b.iter().zip(var).map(|(x, s)| x / s).collect()),
    };
    let loglik = total_loglik_shifted(problem.y, &mu, 0.0, problem.lambda, problem.tau);
    let obj = problem.alpha.get() * loglik - 0.5 * dot(&b, &a);
    if !obj.is_finite() {
        return Err(Error::NonFinite("mode objective".into()));
    }
    if trace.is_empty() {
        trace.push(obj);
    }
    if !converged {
        return Err(Error::ModeNotConverged {
            iterations: config.max_iter,
            last_iterate: b,
            objective_trace: trace,
        });
    }
    Ok(ModeResult {
        b_hat: b,
        mu_hat: mu,
        precision_b: a,
        log_posterior_at_mode: obj,
        loglik,
        iterations,
        converged,
        objective_trace: trace,
        kernel,
        b_factor: None,
    })
}

/// Shared joint iteration. `solve` maps the gradient `g` to `(db, da)`.
fn joint_iterate(
    problem: &ModeProblem<'_>,
    mut b: Vec<f64>,
    mut a: Vec<f64>,
    config: &ModeConfig,
    solve: impl Fn(&[f64]) -> (Vec<f64>, Vec<f64>),
) -> Result<(Vec<f64>, Vec<f64>, usize, bool, Vec<f64>)> {
    let (lambda, tau) = (problem.lambda, problem.tau);
    let alpha = problem.alpha.get();
    let n = problem.y.len();
    let mut mu = problem.offset.to_vec();
    problem.latent.add_zb(&b, &mut mu);
    let mut ba = dot(&b, &a);
    let mut f = objective(problem, &mu, ba);
    if !f.is_finite() {
        return Err(Error::NonFinite("mode objective at start".into()));
    }
    let mut trace = vec![f];
    let mut zdb_mu = vec![0.0; n];
    let mut cand_mu = vec![0.0; n];
    let mut score = vec![0.0; n];
    let mut converged = false;
    let mut it = 0;
    while it < config.max_iter {
        it += 1;
        for i in 0..n {
            score[i] = alpha * ald_score_mu(problem.y[i], mu[i], lambda, tau);
        }
        let mut g = problem.latent.zt_apply(&score);
        for (gi, ai) in g.iter_mut().zip(&a) {
            *gi -= ai;
        }
        let (db, da) = solve(&g);
        let slope = dot(&g, &db);
        if slope <= 0.0 || db.iter().all(|&d| d == 0.0) {
            converged = true;
            break;
        }
        zdb_mu.iter_mut().for_each(|v| *v = 0.0);
        problem.latent.add_zb(&db, &mut zdb_mu);
        let (q1, q2) = (dot(&b, &da) + dot(&db, &a), dot(&db, &da));
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            for i in 0..n {
                cand_mu[i] = mu[i] + t * zdb_mu[i];
            }
            let cba = ba + t * q1 + t * t * q2;
            let fc = objective(problem, &cand_mu, cba);
            if fc >= f + config.armijo_c * t * slope {
                accepted = Some((fc, cba));
                break;
            }
            t *= 0.5;
        }
        let Some((fc, cba)) = accepted else {
            converged = true;
            break;
        };
        let step = db.iter().fold(0.0f64, |acc, d| acc.max((t * d).abs()));
        for (bi, di) in b.iter_mut().zip(&db) {
            *bi += t * di;
        }
        for (ai, di) in a.iter_mut().zip(&da) {
            *ai += t * di;
        }
        std::mem::swap(&mut mu, &mut cand_mu);
        let rel = (fc - f).abs() / f.abs().max(1.0);
        f = fc;
        ba = cba;
        trace.push(f);
        if rel < config.rel_tol && step < config.step_tol {
            converged = true;
            break;
        }
    }
    Ok((b, a, it, converged, trace))
}

fn joint_mode_diagonal(
    problem: &ModeProblem<'_>,
    var: &[f64],
    start: ModeStart<'_>,
    config: &ModeConfig,
) -> Result<ModeResult> {
    let c = problem.alpha.get() * ald_fisher_diag(problem.tau, problem.lambda);
    let mut h = ztdz(problem.latent, Weights::Constant(c))?.to_dense();
    for (i, s) in var.iter().enumerate() {
        h[(i, i)] += 1.0 / s;
    }
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::NonFinite("Newton system is not positive definite".into()))?;
    let b0: Vec<f64> = match start {
        ModeStart::Zero => vec![0.0; var.len()],
        ModeStart::Latent(v) => v.to_vec(),
        ModeStart::Precision(a) => a.iter().zip(var).map(|(a, s)| a * s).collect(),
    };
    let a0 = b0.iter().zip(var).map(|(x, s)| x / s).collect();
    let (b, _, it, conv, trace) = joint_iterate(problem, b0, a0, config, |g| {
        let db = chol.solve(&DVector::from_column_slice(g));
        let da = db.iter().zip(var).map(|(d, s)| d / s).collect();
        (db.as_slice().to_vec(), da)
    })?;
    finish(problem, b, var, None, it, conv, trace, config)
}

fn joint_mode_gp(problem: &ModeProblem<'_>, start: ModeStart<'_>, config: &ModeConfig) -> Result<ModeResult> {
    let (LatentDesign::Gp(design), PriorCovParams::Gp { sigma2, length_scale }) = (problem.latent, problem.prior) else {
        unreachable!()
    };
    let k = matern15(design, *sigma2, *length_scale);
    let w = problem.alpha.get() * ald_fisher_diag(problem.tau, problem.lambda);
    let bchol = b_matrix_cholesky(&k, w)?;
    let n = k.nrows();
    let (b0, a0) = match start {
        ModeStart::Zero => (vec![0.0; n], vec![0.0; n]),
        ModeStart::Precision(a) => {
            let b = &k * DVector::from_column_slice(a);
            (b.as_slice().to_vec(), a.to_vec())
        }
        ModeStart::Latent(b) => {
            let (kc, _) = crate::design::cholesky_with_jitter(&k, *sigma2)?;
            let a = kc.solve(&DVector::from_column_slice(b));
            (b.to_vec(), a.as_slice().to_vec())
        }
    };
    let (b, a, it, conv, trace) = joint_iterate(problem, b0, a0, config, |g| {
        let da = DVector::from_vec(bchol.solve(g));
        let db = &k * &da;
        (db.as_slice().to_vec(), da.as_slice().to_vec())
    })?;
    let mut result = finish(problem, b, &[], Some((k, a)), it, conv, trace, config)?;
    result.b_factor = Some((w, bchol));
    Ok(result)
}
