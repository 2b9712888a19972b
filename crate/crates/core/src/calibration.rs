//! Frequentist calibration: sandwich standard errors for grouped random
//! effects, Wald intervals, empirical coverage and conformalized quantile
//! regression.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ald::{AlScale, QuantileLevel};
use crate::curvature::{tkc_curvature, TkcConfig};
use crate::design::LatentDesign;
use crate::error::{Error, Result};
use crate::laplace::{FitResult, QuantileModel};

/// Closed interval with its nominal level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// How the curvature enters the sandwich denominator.
///
/// The TKC estimate targets `f / lambda`, so `AsPaper` (dividing by `c^2`)
/// and `DensityScale` (dividing by `(lambda c)^2`, approximately `f^2`)
/// differ by `lambda^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichScale {
    #[default]
    AsPaper,
    DensityScale,
}

/// `tau (1 - tau) / (n_j c^2)`.
pub fn sandwich_variance(tau: QuantileLevel, n_j: usize, c_hat: f64) -> Result<f64> {
    if n_j == 0 {
        return Err(Error::InvalidParameter {
            name: "n_j",
            value: 0.0,
            reason: "sandwich variance needs at least one observation",
        });
    }
    if !(c_hat > 0.0 && c_hat.is_finite()) {
        return Err(Error::DegenerateCurvature(c_hat));
    }
    let t = tau.get();
    Ok(t * (1.0 - t) / (n_j as f64 * c_hat * c_hat))
}

/// Sandwich variance with the curvature rescaled according to `scale`.
pub fn sandwich_variance_scaled(
    tau: QuantileLevel,
    n_j: usize,
    c_hat: f64,
    lambda: AlScale,
    scale: SandwichScale,
) -> Result<f64> {
    let c = match scale {
        SandwichScale::AsPaper => c_hat,
        SandwichScale::DensityScale => lambda.get() * c_hat,
    };
    sandwich_variance(tau, n_j, c)
}

/// Sandwich standard errors of every group effect of a fitted single-level
/// grouped model without fixed effects.
///
/// The curvature is the TKC estimate at the fitted mode, recomputed with
/// `tkc` so it is available whichever curvature the fit itself used.
pub fn sandwich_standard_errors(
    model: &QuantileModel,
    y: &[f64],
    fit: &FitResult,
    tkc: &TkcConfig,
    scale: SandwichScale,
) -> Result<Vec<f64>> {
    let LatentDesign::Grouped(g) = &model.latent else {
        return Err(Error::Unsupported(
            "sandwich standard errors are implemented for single-level grouped designs only".into(),
        ));
    };
    if model.fixed.n_coef() > 0 {
        return Err(Error::Unsupported(
            "sandwich standard errors are implemented for models without fixed effects only".into(),
        ));
    }
    let est = tkc_curvature(y, &fit.posterior.mu_hat, fit.lambda_hat, model.tau, tkc)?;
    g.counts()
        .iter()
        .map(|&nj| sandwich_variance_scaled(model.tau, nj, est.c, fit.lambda_hat, scale).map(f64::sqrt))
        .collect()
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "level",
            value: level,
            reason: "must lie strictly between 0 and 1",
        })
    }
}

/// `center -/+ z_{(1 + level) / 2} se`.
pub fn wald_interval(center: f64, se: f64, level: f64) -> Result<Interval> {
    check_level(level)?;
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::InvalidParameter {
            name: "se",
            value: se,
            reason: "must be positive and finite",
        });
    }
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    Ok(Interval {
        lower: center - z * se,
        upper: center + z * se,
        level,
    })
}

/// Fraction of intervals that contain their truth.
pub fn empirical_coverage(intervals: &[Interval], truths: &[f64]) -> Result<f64> {
    if intervals.len() != truths.len() {
        return Err(Error::dims("coverage truths", intervals.len(), truths.len()));
    }
    if intervals.is_empty() {
        return Err(Error::Domain("coverage of an empty list".into()));
    }
    let hits = intervals.iter().zip(truths).filter(|(iv, t)| iv.contains(**t)).count();
    Ok(hits as f64 / intervals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformalMode {
    Standard,
    UncertaintyAware,
}

/// Scalar conformal correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    /// Correction added outside the raw interval, in units of `sigma(x)` in
    /// uncertainty-aware mode. `+inf` when the calibration set is too small
    /// for the requested level.
    pub t: f64,
    pub mode: ConformalMode,
    pub target_level: f64,
    pub warning: Option<String>,
}

impl ConformalCalibration {
    /// Corrected interval for one point.
    pub fn apply(&self, lower: f64, upper: f64, sigma: Option<f64>) -> Interval {
        let s = match self.mode {
            ConformalMode::Standard => 1.0,
            ConformalMode::UncertaintyAware => sigma.unwrap_or(1.0),
        };
        Interval {
            lower: lower - self.t * s,
            upper: upper + self.t * s,
            level: self.target_level,
        }
    }
}

/// Conformalized quantile regression: the smallest `t` such that
/// `[lower - t s, upper + t s]` covers at least `ceil((n + 1)(1 - alpha))`
/// calibration points, with `s = sigma(x)` in uncertainty-aware mode and 1
/// otherwise.
pub fn cqr_calibrate(
    y_cal: &[f64],
    lower: &[f64],
    upper: &[f64],
    alpha: f64,
    sigma: Option<&[f64]>,
) -> Result<ConformalCalibration> {
    let n = y_cal.len();
    if n == 0 {
        return Err(Error::Domain("empty calibration set".into()));
    }
    if lower.len() != n {
        return Err(Error::dims("lower predictions", n, lower.len()));
    }
    if upper.len() != n {
        return Err(Error::dims("upper predictions", n, upper.len()));
    }
    check_level(alpha)?;
    if let Some(s) = sigma {
        if s.len() != n {
            return Err(Error::dims("sigma", n, s.len()));
        }
        if let Some(bad) = s.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                value: *bad,
                reason: "uncertainty scales must be positive and finite",
            });
        }
    }
    let mode = if sigma.is_some() {
        ConformalMode::UncertaintyAware
    } else {
        ConformalMode::Standard
    };
    let mut scores: Vec<f64> = (0..n)
        .map(|i| {
            let s = (lower[i] - y_cal[i]).max(y_cal[i] - upper[i]);
            match sigma {
                Some(sg) => s / sg[i],
                None => s,
            }
        })
        .collect();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("conformity scores".into()));
    }
    scores.sort_by(f64::total_cmp);
    let k = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    let (t, warning) = if k > n {
        (
            f64::INFINITY,
            Some(format!(
                "calibration set of {n} points is too small for level {}; intervals have infinite width",
                1.0 - alpha
            )),
        )
    } else {
        (scores[k.max(1) - 1], None)
    };
    Ok(ConformalCalibration {
        t,
        mode,
        target_level: 1.0 - alpha,
        warning,
    })
}
