//! Reference log-marginal likelihoods for single-level grouped models by
//! one-dimensional numerical integration over each group effect.
//!
//! Adaptive Gauss-Hermite places its nodes around the exact mode of the
//! group's integrand, scaled by the TKC curvature of that group; the
//! trapezoid rule on a wide fixed grid serves as an independent check.
//!
//! Between consecutive residuals the integrand is the exponential of a
//! quadratic, so the integral also has a closed form as a sum of normal
//! probabilities over those segments. The kinks limit Gauss-Hermite accuracy
//! to roughly 1e-5 relative on the log scale, while the closed form is exact
//! up to rounding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ald::{ald_log_normalizer, pinball_loss, AlScale, QuantileLevel};
use crate::curvature::{tkc_curvature, TkcConfig};
use crate::design::{LatentDesign, PriorCovParams};
use crate::error::{Error, Result};
use crate::laplace::{HyperParams, QuantileModel};
use crate::mode::group_mode_exact;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Which per-group value `exact_log_marginal` sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    #[default]
    Agh,
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub method: OracleMethod,
    pub nodes: usize,
    /// Trapezoid grid half-width in prior standard deviations.
    pub trapezoid_half_width: f64,
    pub trapezoid_points: usize,
    pub tkc: TkcConfig,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            method: OracleMethod::Agh,
            nodes: 50,
            trapezoid_half_width: 12.0,
            trapezoid_points: 20001,
            tkc: TkcConfig::default(),
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 5 {
            return Err(Error::Config(format!("quadrature needs at least 5 nodes, got {}", self.nodes)));
        }
        if self.trapezoid_points < 3 || self.trapezoid_points % 2 == 0 {
            return Err(Error::Config(format!(
                "trapezoid point count must be odd and at least 3, got {}",
                self.trapezoid_points
            )));
        }
        if !(self.trapezoid_half_width > 0.0 && self.trapezoid_half_width.is_finite()) {
            return Err(Error::Config("trapezoid half-width must be positive".into()));
        }
        self.tkc.validate()
    }
}

/// Gauss-Hermite rule for the weight `exp(-x^2)` by the Golub-Welsch
/// eigenvalue method. Nodes are returned in increasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = off;
        j[(k - 1, k)] = off;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver round-off
    for i in 0..n / 2 {
        let (a, b) = (pairs[i], pairs[n - 1 - i]);
        let x = 0.5 * (b.0 - a.0);
        let w = 0.5 * (a.1 + b.1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// One group's data and parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupProblem<'a> {
    pub y: &'a [f64],
    /// Fixed-effect part of the linear predictor for each observation.
    pub offset: &'a [f64],
    pub sigma2: f64,
    pub lambda: AlScale,
    pub tau: QuantileLevel,
}

impl GroupProblem<'_> {
    fn check(&self) -> Result<()> {
        if self.offset.len() != self.y.len() {
            return Err(Error::dims("group offset", self.y.len(), self.offset.len()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "sigma2",
                value: self.sigma2,
                reason: "must be positive and finite",
            });
        }
        Ok(())
    }

    /// Log of likelihood times prior density at `b`.
    fn log_integrand(&self, b: f64) -> f64 {
        let l = self.lambda.get();
        let mut loss = Neumaier::default();
        for (&yi, &oi) in self.y.iter().zip(self.offset) {
            loss.add(pinball_loss(yi, oi + b, self.tau));
        }
        self.y.len() as f64 * ald_log_normalizer(self.lambda, self.tau) - loss.sum() / l
            - 0.5 * b * b / self.sigma2
            - 0.5 * (LN_2PI + self.sigma2.ln())
    }
}

/// Adaptive Gauss-Hermite value with its centering and scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AghValue {
    pub log_marginal: f64,
    pub mode: f64,
    pub scale: f64,
    /// Set when the TKC scale could not be used and the prior sd was.
    pub warning: Option<String>,
}

/// Adaptive Gauss-Hermite approximation of
/// `log int prod_i p(y_i | offset_i + b) N(b; 0, sigma2) db`.
pub fn agh_group_log_marginal(group: &GroupProblem<'_>, cfg: &QuadratureConfig) -> Result<AghValue> {
    group.check()?;
    cfg.validate()?;
    let n = group.y.len();
    if n == 0 {
        return Ok(AghValue {
            log_marginal: 0.0,
            mode: 0.0,
            scale: group.sigma2.sqrt(),
            warning: None,
        });
    }
    let mut r: Vec<f64> = group.y.iter().zip(group.offset).map(|(y, o)| y - o).collect();
    r.sort_by(f64::total_cmp);
    let mode = group_mode_exact(&r, group.sigma2, 1.0 / group.lambda.get(), group.tau.get());
    let mu = vec![mode; n];
    let resid_y: Vec<f64> = group.y.iter().zip(group.offset).map(|(y, o)| y - o).collect();
    let (scale, warning) = match tkc_curvature(&resid_y, &mu, group.lambda, group.tau, &cfg.tkc) {
        Ok(est) if !est.below_threshold => ((1.0 / (n as f64 * est.c + 1.0 / group.sigma2)).sqrt(), None),
        Ok(_) => (
            group.sigma2.sqrt(),
            Some("group TKC curvature below the drop threshold; nodes scaled by the prior sd".to_string()),
        ),
        Err(e) => (
            group.sigma2.sqrt(),
            Some(format!("group TKC curvature failed ({e}); nodes scaled by the prior sd")),
        ),
    };
    let (x, w) = gauss_hermite(cfg.nodes);
    let s = std::f64::consts::SQRT_2 * scale;
    let terms: Vec<f64> = x
        .iter()
        .zip(&w)
        .map(|(&xk, &wk)| wk.ln() + xk * xk + group.log_integrand(mode + s * xk))
        .collect();
    let log_marginal = s.ln() + log_sum_exp(&terms);
    if !log_marginal.is_finite() {
        return Err(Error::NonFinite("adaptive Gauss-Hermite sum".into()));
    }
    Ok(AghValue {
        log_marginal,
        mode,
        scale,
        warning,
    })
}

/// Trapezoid rule on `[-h sigma, h sigma]` with the configured point count.
pub fn trapezoid_group_log_marginal(group: &GroupProblem<'_>, cfg: &QuadratureConfig) -> Result<f64> {
    group.check()?;
    cfg.validate()?;
    let sd = group.sigma2.sqrt();
    let half = cfg.trapezoid_half_width * sd;
    let m = cfg.trapezoid_points;
    let h = 2.0 * half / (m - 1) as f64;
    let terms: Vec<f64> = (0..m)
        .map(|k| {
            let b = -half + k as f64 * h;
            let end = if k == 0 || k == m - 1 { 0.5f64.ln() } else { 0.0 };
            end + group.log_integrand(b)
        })
        .collect();
    Ok(h.ln() + log_sum_exp(&terms))
}

/// Exact value of the group integral.
///
/// With residuals `r` sorted and `k` of them below `b`, the log integrand is
/// `C - K_k / lambda + a_k b - b^2 / (2 sigma2)` with slope
/// `a_k = (tau n - k) / lambda`; completing the square turns each segment
/// into a normal probability.
pub fn closed_form_group_log_marginal(group: &GroupProblem<'_>) -> Result<f64> {
    group.check()?;
    let n = group.y.len();
    if n == 0 {
        return Ok(0.0);
    }
    let (t, l, s2) = (group.tau.get(), group.lambda.get(), group.sigma2);
    let sd = s2.sqrt();
    let mut r: Vec<f64> = group.y.iter().zip(group.offset).map(|(y, o)| y - o).collect();
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("group residuals".into()));
    }
    r.sort_by(f64::total_cmp);
    let base = n as f64 * ald_log_normalizer(group.lambda, group.tau);
    let mut above = r.iter().fold(Neumaier::default(), |mut acc, v| {
        acc.add(*v);
        acc
    });
    let mut below = Neumaier::default();
    let mut terms = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            above.add(-r[k - 1]);
            below.add(r[k - 1]);
        }
        let lo = if k == 0 { f64::NEG_INFINITY } else { r[k - 1] };
        let hi = if k == n { f64::INFINITY } else { r[k] };
        if lo >= hi {
            continue;
        }
        let a = (t * n as f64 - k as f64) / l;
        let centre = s2 * a;
        let kk = t * above.sum() - (1.0 - t) * below.sum();
        let mass = log_normal_prob((lo - centre) / sd, (hi - centre) / sd);
        terms.push(base - kk / l + 0.5 * s2 * a * a + mass);
    }
    let v = log_sum_exp(&terms);
    if !v.is_finite() {
        return Err(Error::NonFinite("closed-form group integral".into()));
    }
    Ok(v)
}

/// `log Phi(x)`, accurate far into the lower tail.
fn log_ndtr(x: f64) -> f64 {
    use libm::erfc;
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x > 3.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x > -5.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        -0.5 * x * x - 0.5 * LN_2PI + mills_ratio(-x).ln()
    }
}

/// Mills ratio `(1 - Phi(t)) / phi(t)` for `t >= 5` by its continued
/// fraction, evaluated with the modified Lentz method.
fn mills_ratio(t: f64) -> f64 {
    // R(t) = 1 / (t + 1 / (t + 2 / (t + 3 / (t + ...))))
    let tiny = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in 1..500 {
        let ak = k as f64;
        d = t + ak * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = t + ak / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// `log(Phi(b) - Phi(a))` for `a < b`.
fn log_normal_prob(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        let (la, lb) = (log_ndtr(a), log_ndtr(b));
        lb + log1m_exp(la - lb)
    } else if a >= 0.0 {
        let (la, lb) = (log_ndtr(-a), log_ndtr(-b));
        la + log1m_exp(lb - la)
    } else {
        (-(log_ndtr(a).exp() + log_ndtr(-b).exp())).ln_1p()
    }
}

/// `log(1 - exp(d))` for `d <= 0`.
fn log1m_exp(d: f64) -> f64 {
    if d > -std::f64::consts::LN_2 {
        (-d.exp_m1()).ln()
    } else {
        (-d.exp()).ln_1p()
    }
}

/// Sum of per-group reference values for a single-level grouped model at
/// fixed hyperparameters, by the configured method.
pub fn exact_log_marginal(
    model: &QuantileModel,
    y: &[f64],
    params: &HyperParams,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    Ok(exact_log_marginal_groups(model, y, params, cfg)?
        .iter()
        .fold(Neumaier::default(), |mut acc, v| {
            acc.add(*v);
            acc
        })
        .sum())
}

/// Per-group reference values.
pub fn exact_log_marginal_groups(
    model: &QuantileModel,
    y: &[f64],
    params: &HyperParams,
    cfg: &QuadratureConfig,
) -> Result<Vec<f64>> {
    let LatentDesign::Grouped(g) = &model.latent else {
        return Err(Error::Unsupported(
            "exact marginal likelihoods are available for single-level grouped designs only".into(),
        ));
    };
    let PriorCovParams::Grouped { sigma2 } = params.theta else {
        return Err(Error::Config("grouped design needs grouped prior parameters".into()));
    };
    if y.len() != model.n_obs() {
        return Err(Error::dims("response", model.n_obs(), y.len()));
    }
    if model.tempering.get() != 1.0 {
        return Err(Error::Unsupported("the quadrature oracle integrates the untempered likelihood".into()));
    }
    let mut offset = vec![0.0; y.len()];
    model.fixed.apply(&params.beta, &mut offset);
    (0..g.num_groups())
        .map(|j| {
            let members = g.members(j);
            let yj: Vec<f64> = members.iter().map(|&i| y[i]).collect();
            let oj: Vec<f64> = members.iter().map(|&i| offset[i]).collect();
            let group = GroupProblem {
                y: &yj,
                offset: &oj,
                sigma2,
                lambda: params.lambda,
                tau: model.tau,
            };
            match cfg.method {
                OracleMethod::Agh => agh_group_log_marginal(&group, cfg).map(|v| v.log_marginal),
                OracleMethod::ClosedForm => closed_form_group_log_marginal(&group),
            }
        })
        .collect()
}

/// `|z_approx / z - 1|` from log values, via `expm1`.
pub fn relative_error(log_approx: f64, log_exact: f64) -> f64 {
    (log_approx - log_exact).exp_m1().abs()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut acc = Neumaier::default();
    for t in terms {
        acc.add((t - max).exp());
    }
    max + acc.sum().ln()
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}
