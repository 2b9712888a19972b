//! Curvature of the AL log-likelihood around the mode.
//!
//! The observed Hessian of the AL likelihood is zero almost everywhere, so the
//! Laplace approximation needs a substitute. [`fisher_curvature`] uses the
//! expected information `tau (1 - tau) / lambda^2`. The triangular kernel
//! curvature (TKC) instead measures how much the log-likelihood drops when
//! every fitted value is shifted by `+delta` and by `-delta`:
//!
//! `c = (dll_upper + dll_lower) / (n delta^2)`.
//!
//! Since `rho(z + h) - 2 rho(z) + rho(z - h) = (h - |z|)_+`, this equals a
//! triangular kernel density estimate of the residuals at zero divided by
//! `lambda`. Drops are accumulated per observation from closed forms, which
//! keeps the two expressions equal to rounding.

use serde::{Deserialize, Serialize};

use crate::ald::{ald_fisher_diag, AlScale, QuantileLevel};
use crate::design::DesignKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMethod {
    Fisher,
    Tkc,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub method: CurvatureMethod,
    /// Per-observation curvature.
    pub c: f64,
    /// Bandwidth (TKC only).
    pub delta_mu: Option<f64>,
    /// Quadratic-fit diagnostic clamped to `[0, 1]` (TKC only).
    pub r_squared: Option<f64>,
    /// Set when no bandwidth candidate cleared the drop threshold.
    #[serde(default)]
    pub below_threshold: bool,
}

/// Bandwidth search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TkcConfig {
    /// Both log-likelihood drops must reach this value for a bandwidth to be
    /// admissible.
    pub min_drop_threshold: f64,
    /// Geometric grid `s * ratio^k`, `k = grid_min_exp..=grid_max_exp`, with
    /// `s` the median absolute residual.
    pub grid_min_exp: i32,
    pub grid_max_exp: i32,
    pub grid_ratio: f64,
    /// Explicit candidates; overrides the geometric grid when set.
    pub candidates: Option<Vec<f64>>,
}

impl Default for TkcConfig {
    fn default() -> Self {
        Self {
            min_drop_threshold: 0.1,
            grid_min_exp: -8,
            grid_max_exp: 8,
            grid_ratio: 2.0,
            candidates: None,
        }
    }
}

impl TkcConfig {
    /// Default threshold per design family: 0.1 for mixed models, 10 for GPs.
    pub fn for_design(kind: DesignKind) -> Self {
        match kind {
            DesignKind::Gp => Self {
                min_drop_threshold: 10.0,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_drop_threshold > 0.0 && self.min_drop_threshold.is_finite()) {
            return Err(Error::Config("tkc.min_drop_threshold must be positive".into()));
        }
        match &self.candidates {
            Some(c) if c.is_empty() => Err(Error::Config("tkc.candidates must be nonempty".into())),
            Some(c) if c.iter().any(|&d| !(d > 0.0 && d.is_finite())) => {
                Err(Error::Config("tkc.candidates must be positive".into()))
            }
            None if self.grid_min_exp > self.grid_max_exp => {
                Err(Error::Config("tkc grid exponents are empty".into()))
            }
            None if !(self.grid_ratio > 1.0) => Err(Error::Config("tkc.grid_ratio must exceed 1".into())),
            _ => Ok(()),
        }
    }
}

pub fn fisher_curvature(tau: QuantileLevel, lambda: AlScale) -> CurvatureEstimate {
    CurvatureEstimate {
        method: CurvatureMethod::Fisher,
        c: ald_fisher_diag(tau, lambda),
        delta_mu: None,
        r_squared: None,
        below_threshold: false,
    }
}

/// `rho(z - d) - rho(z)` for residual `z`, i.e. the loss increase when the
/// fitted value moves up by `d`.
#[inline]
fn loss_increase(z: f64, d: f64, tau: f64) -> f64 {
    if d >= 0.0 {
        if z >= d {
            -tau * d
        } else if z <= 0.0 {
            (1.0 - tau) * d
        } else {
            (1.0 - tau) * d - z
        }
    } else {
        let h = -d;
        if z >= 0.0 {
            tau * h
        } else if z <= -h {
            -(1.0 - tau) * h
        } else {
            tau * h + z
        }
    }
}

fn check_lengths(y: &[f64], mu: &[f64]) -> Result<()> {
    if y.len() != mu.len() {
        return Err(Error::dims("curvature residuals", y.len(), mu.len()));
    }
    Ok(())
}

fn check_bandwidth(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value: v,
            reason: "bandwidth must be positive and finite",
        })
    }
}

/// Decrease in log-likelihood when the whole fitted vector moves by `+delta`
/// (upper) and by `-delta` (lower).
pub fn dll(y: &[f64], mu_hat: &[f64], delta: f64, lambda: AlScale, tau: QuantileLevel) -> Result<(f64, f64)> {
    check_lengths(y, mu_hat)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "delta",
            value: delta,
            reason: "must be nonnegative and finite",
        });
    }
    let t = tau.get();
    let (mut up, mut lo) = (0.0, 0.0);
    for (&yi, &mi) in y.iter().zip(mu_hat) {
        let z = yi - mi;
        up += loss_increase(z, delta, t);
        lo += loss_increase(z, -delta, t);
    }
    Ok((up / lambda.get(), lo / lambda.get()))
}

/// Sum over observations of `rho(z - d) + rho(z + d) - 2 rho(z)`.
fn second_difference_sum(y: &[f64], mu_hat: &[f64], d: f64, tau: f64) -> f64 {
    y.iter()
        .zip(mu_hat)
        .map(|(&yi, &mi)| {
            let z = yi - mi;
            loss_increase(z, d, tau) + loss_increase(z, -d, tau)
        })
        .sum()
}

pub fn tkc_estimate(
    y: &[f64],
    mu_hat: &[f64],
    delta: f64,
    lambda: AlScale,
    tau: QuantileLevel,
) -> Result<CurvatureEstimate> {
    check_lengths(y, mu_hat)?;
    check_bandwidth("delta", delta)?;
    let n = y.len();
    let c = second_difference_sum(y, mu_hat, delta, tau.get()) / lambda.get() / (n as f64 * delta * delta);
    if !(c > 0.0) {
        return Err(Error::DegenerateCurvature(c));
    }
    Ok(CurvatureEstimate {
        method: CurvatureMethod::Tkc,
        c,
        delta_mu: Some(delta),
        r_squared: None,
        below_threshold: false,
    })
}

/// Triangular kernel density estimate of the residuals at zero, over `lambda`.
pub fn tkc_kde_form(y: &[f64], mu_hat: &[f64], h: f64, lambda: AlScale) -> Result<CurvatureEstimate> {
    check_lengths(y, mu_hat)?;
    check_bandwidth("h", h)?;
    let n = y.len();
    let s: f64 = y
        .iter()
        .zip(mu_hat)
        .map(|(&yi, &mi)| {
            let a = (yi - mi).abs();
            if a < h {
                h - a
            } else {
                0.0
            }
        })
        .sum();
    let c = s / (h * h) / (n as f64 * lambda.get());
    if !(c > 0.0) {
        return Err(Error::DegenerateCurvature(c));
    }
    Ok(CurvatureEstimate {
        method: CurvatureMethod::Tkc,
        c,
        delta_mu: Some(h),
        r_squared: None,
        below_threshold: false,
    })
}

/// Result of the bandwidth search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthChoice {
    pub delta_mu: f64,
    /// Unclamped R² of the selected candidate.
    pub r_squared: f64,
    pub c: f64,
    pub below_threshold: bool,
}

fn candidate_grid(y: &[f64], mu_hat: &[f64], lambda: AlScale, cfg: &TkcConfig) -> Vec<f64> {
    if let Some(c) = &cfg.candidates {
        let mut c = c.clone();
        c.sort_by(f64::total_cmp);
        return c;
    }
    let mut abs: Vec<f64> = y.iter().zip(mu_hat).map(|(a, b)| (a - b).abs()).collect();
    let mut s = if abs.is_empty() {
        0.0
    } else {
        let mid = abs.len() / 2;
        let (_, m, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    };
    if !(s > 0.0 && s.is_finite()) {
        s = lambda.get();
    }
    (cfg.grid_min_exp..=cfg.grid_max_exp)
        .map(|k| s * cfg.grid_ratio.powi(k))
        .collect()
}

/// R² of the quadratic model `n c delta^2 / 2` against the true drops at the
/// probes `{-d, -d/2, d/2, d}`.
fn quadratic_fit_r2(y: &[f64], mu_hat: &[f64], d: f64, c: f64, lambda: AlScale, tau: QuantileLevel) -> f64 {
    let n = y.len() as f64;
    let t = tau.get();
    let probes = [-d, -0.5 * d, 0.5 * d, d];
    let mut truth = [0.0; 4];
    for (k, &p) in probes.iter().enumerate() {
        truth[k] = y
            .iter()
            .zip(mu_hat)
            .map(|(&yi, &mi)| loss_increase(yi - mi, p, t))
            .sum::<f64>()
            / lambda.get();
    }
    let mean = truth.iter().sum::<f64>() / 4.0;
    let ss_tot: f64 = truth.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = truth
        .iter()
        .zip(&probes)
        .map(|(v, p)| (v - 0.5 * n * c * p * p).powi(2))
        .sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Pick the bandwidth whose quadratic model best fits the log-likelihood
/// profile among candidates with both drops above the threshold. Ties go to
/// the smallest bandwidth. Without an admissible candidate the largest one is
/// returned with `below_threshold` set.
pub fn select_bandwidth(
    y: &[f64],
    mu_hat: &[f64],
    lambda: AlScale,
    tau: QuantileLevel,
    cfg: &TkcConfig,
) -> Result<BandwidthChoice> {
    check_lengths(y, mu_hat)?;
    cfg.validate()?;
    if y.is_empty() {
        return Err(Error::DegenerateCurvature(0.0));
    }
    let n = y.len() as f64;
    let grid = candidate_grid(y, mu_hat, lambda, cfg);
    let mut best: Option<BandwidthChoice> = None;
    for &d in &grid {
        let (up, lo) = dll(y, mu_hat, d, lambda, tau)?;
        if up.min(lo) < cfg.min_drop_threshold {
            continue;
        }
        let c = second_difference_sum(y, mu_hat, d, tau.get()) / lambda.get() / (n * d * d);
        if !(c > 0.0) {
            continue;
        }
        let r2 = quadratic_fit_r2(y, mu_hat, d, c, lambda, tau);
        if best.is_none_or(|b| r2 > b.r_squared) {
            best = Some(BandwidthChoice {
                delta_mu: d,
                r_squared: r2,
                c,
                below_threshold: false,
            });
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    let d = *grid.last().expect("grid validated nonempty");
    let c = second_difference_sum(y, mu_hat, d, tau.get()) / lambda.get() / (n * d * d);
    let r2 = if c > 0.0 {
        quadratic_fit_r2(y, mu_hat, d, c, lambda, tau)
    } else {
        f64::NEG_INFINITY
    };
    Ok(BandwidthChoice {
        delta_mu: d,
        r_squared: r2,
        c,
        below_threshold: true,
    })
}

/// Bandwidth search followed by the TKC estimate at the chosen bandwidth.
pub fn tkc_curvature(
    y: &[f64],
    mu_hat: &[f64],
    lambda: AlScale,
    tau: QuantileLevel,
    cfg: &TkcConfig,
) -> Result<CurvatureEstimate> {
    let choice = select_bandwidth(y, mu_hat, lambda, tau, cfg)?;
    if !(choice.c > 0.0) {
        return Err(Error::DegenerateCurvature(choice.c));
    }
    Ok(CurvatureEstimate {
        method: CurvatureMethod::Tkc,
        c: choice.c,
        delta_mu: Some(choice.delta_mu),
        r_squared: Some(choice.r_squared.clamp(0.0, 1.0)),
        below_threshold: choice.below_threshold,
    })
}

/// Per-observation curvature `f_i / lambda` from known noise densities at the
/// conditional quantile.
pub fn population_curvature(density_at_quantile: &[f64], lambda: AlScale) -> Result<Vec<f64>> {
    density_at_quantile
        .iter()
        .map(|&f| {
            if f > 0.0 && f.is_finite() {
                Ok(f / lambda.get())
            } else {
                Err(Error::NonPositiveDensity(f))
            }
        })
        .collect()
}
