//! Asymmetric Laplace (AL) likelihood primitives.
//!
//! The AL density with location `mu`, scale `lambda` and quantile level `tau` is
//!
//! ```text
//! p(y | mu, lambda) = tau (1 - tau) / lambda * exp(-rho_tau(y - mu) / lambda)
//! ```
//!
//! where `rho_tau` is the pinball (check) loss. Its `tau`-quantile is `mu`, so
//! maximizing the AL likelihood in `mu` is quantile regression.
//!
//! Score convention: [`ald_score_mu`] is the derivative of the log-density with
//! respect to `mu`, i.e. `+tau/lambda` for `y > mu` and `(tau - 1)/lambda` for
//! `y < mu`. At the kink `y == mu` the subgradient element `0` is returned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantile level, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidParameter {
                name: "tau",
                value: tau,
                reason: "must lie in the open interval (0, 1)",
            })
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(t: QuantileLevel) -> f64 {
        t.0
    }
}

/// Scale of the AL likelihood; same units as the response.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AlScale(f64);

impl AlScale {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Self(lambda))
        } else {
            Err(Error::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "must be positive and finite",
            })
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for AlScale {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AlScale> for f64 {
    fn from(s: AlScale) -> f64 {
        s.0
    }
}

/// Exponent `alpha` of a tempered (alpha-) posterior; `1` means untempered.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TemperingRate(f64);

impl TemperingRate {
    pub const UNTEMPERED: TemperingRate = TemperingRate(1.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                reason: "must lie in (0, 1]",
            })
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for TemperingRate {
    fn default() -> Self {
        Self::UNTEMPERED
    }
}

impl TryFrom<f64> for TemperingRate {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TemperingRate> for f64 {
    fn from(a: TemperingRate) -> f64 {
        a.0
    }
}

/// Pinball (check) loss `rho_tau(y - q)`.
#[inline]
pub fn pinball_loss(y: f64, q: f64, tau: QuantileLevel) -> f64 {
    let u = y - q;
    let t = tau.get();
    if u >= 0.0 {
        t * u
    } else {
        (t - 1.0) * u
    }
}

/// `log(tau (1 - tau) / lambda)`, the normalizing constant of the AL density.
#[inline]
pub fn ald_log_normalizer(lambda: AlScale, tau: QuantileLevel) -> f64 {
    let t = tau.get();
    (t * (1.0 - t) / lambda.get()).ln()
}

#[inline]
pub fn ald_logpdf(y: f64, mu: f64, lambda: AlScale, tau: QuantileLevel) -> f64 {
    ald_log_normalizer(lambda, tau) - pinball_loss(y, mu, tau) / lambda.get()
}

/// Derivative of [`ald_logpdf`] with respect to `mu` (0 at the kink).
#[inline]
pub fn ald_score_mu(y: f64, mu: f64, lambda: AlScale, tau: QuantileLevel) -> f64 {
    let t = tau.get();
    if y > mu {
        t / lambda.get()
    } else if y < mu {
        (t - 1.0) / lambda.get()
    } else {
        0.0
    }
}

/// Per-observation Fisher information for `mu`: `tau (1 - tau) / lambda^2`.
#[inline]
pub fn ald_fisher_diag(tau: QuantileLevel, lambda: AlScale) -> f64 {
    let t = tau.get();
    t * (1.0 - t) / (lambda.get() * lambda.get())
}

pub fn ald_cdf(y: f64, mu: f64, lambda: AlScale, tau: QuantileLevel) -> f64 {
    let t = tau.get();
    let z = (y - mu) / lambda.get();
    if z < 0.0 {
        t * ((1.0 - t) * z).exp()
    } else {
        t - (1.0 - t) * (-t * z).exp_m1()
    }
}

/// Inverse CDF of the AL distribution.
pub fn ald_quantile(u: f64, mu: f64, lambda: AlScale, tau: QuantileLevel) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "probability {u} is outside the open interval (0, 1)"
        )));
    }
    let t = tau.get();
    let l = lambda.get();
    Ok(if u < t {
        mu + l / (1.0 - t) * (u / t).ln()
    } else {
        mu - l / t * ((1.0 - u) / (1.0 - t)).ln()
    })
}

/// One AL draw by inverse-CDF sampling (one uniform per draw).
pub fn ald_sample<R: Rng + ?Sized>(
    rng: &mut R,
    mu: f64,
    lambda: AlScale,
    tau: QuantileLevel,
) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            // u in (0, 1) so the quantile is always defined
            return ald_quantile(u, mu, lambda, tau).expect("u in (0,1)");
        }
    }
}

/// Variance of the AL distribution: `lambda^2 (1 - 2 tau + 2 tau^2) / (tau^2 (1 - tau)^2)`.
pub fn ald_variance(lambda: AlScale, tau: QuantileLevel) -> f64 {
    let t = tau.get();
    let l = lambda.get();
    l * l * (1.0 - 2.0 * t + 2.0 * t * t) / (t * t * (1.0 - t) * (1.0 - t))
}

/// Sum of AL log-densities over paired observations and locations.
pub fn total_loglik(y: &[f64], mu: &[f64], lambda: AlScale, tau: QuantileLevel) -> Result<f64> {
    if y.len() != mu.len() {
        return Err(Error::dims("total_loglik", y.len(), mu.len()));
    }
    Ok(total_loglik_shifted(y, mu, 0.0, lambda, tau))
}

/// `total_loglik(y, mu + shift)` without allocating the shifted vector.
pub(crate) fn total_loglik_shifted(
    y: &[f64],
    mu: &[f64],
    shift: f64,
    lambda: AlScale,
    tau: QuantileLevel,
) -> f64 {
    let c = ald_log_normalizer(lambda, tau);
    let l = lambda.get();
    y.iter()
        .zip(mu)
        .map(|(&yi, &mi)| c - pinball_loss(yi, mi + shift, tau) / l)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }
    fn lam(l: f64) -> AlScale {
        AlScale::new(l).unwrap()
    }

    #[test]
    fn pinball_cases() {
        assert_relative_eq!(pinball_loss(1.0, 0.0, tau(0.8)), 0.8, epsilon = 1e-15);
        assert_relative_eq!(pinball_loss(0.0, 1.0, tau(0.8)), 0.2, epsilon = 1e-15);
        assert_eq!(pinball_loss(3.7, 3.7, tau(0.31)), 0.0);
    }

    #[test]
    fn rejects_invalid_levels() {
        assert!(QuantileLevel::new(0.0).is_err());
        assert!(QuantileLevel::new(1.0).is_err());
        assert!(QuantileLevel::new(f64::NAN).is_err());
        assert!(AlScale::new(0.0).is_err());
        assert!(TemperingRate::new(0.0).is_err());
        assert!(TemperingRate::new(1.0).is_ok());
        assert!(TemperingRate::new(1.5).is_err());
    }

    #[test]
    fn logpdf_values() {
        assert_relative_eq!(
            ald_logpdf(0.0, 0.0, lam(1.0), tau(0.5)),
            0.25f64.ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            ald_logpdf(1.0, 0.0, lam(1.0), tau(0.8)),
            0.16f64.ln() - 0.8,
            epsilon = 1e-14
        );
    }

    #[test]
    fn density_integrates_to_one() {
        for &(mu, l, t) in &[(0.0, 1.0, 0.5), (1.3, 0.2, 0.9), (-2.0, 3.0, 0.05)] {
            // each side of the kink separately, out to 40 decay lengths
            let f = |x: f64| ald_logpdf(x, mu, lam(l), tau(t)).exp();
            let side = |a: f64, b: f64| {
                let n = 400_001;
                let h = (b - a) / (n - 1) as f64;
                let mut s = 0.5 * (f(a) + f(b));
                for i in 1..n - 1 {
                    s += f(a + i as f64 * h);
                }
                s * h
            };
            let total = side(mu - 40.0 * l / (1.0 - t), mu) + side(mu, mu + 40.0 * l / t);
            assert_relative_eq!(total, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn score_values_and_sign_convention() {
        assert_relative_eq!(ald_score_mu(2.0, 0.0, lam(1.0), tau(0.8)), 0.8);
        assert_relative_eq!(ald_score_mu(-1.0, 0.0, lam(0.5), tau(0.8)), -0.4, epsilon = 1e-15);
        assert_eq!(ald_score_mu(1.0, 1.0, lam(0.5), tau(0.8)), 0.0);
        // central finite differences away from the kink
        let step = 1e-6;
        for &(y, mu) in &[(2.0, 0.0), (-1.0, 0.5), (0.3, 0.1), (-4.0, -3.0)] {
            let (l, t) = (lam(0.7), tau(0.3));
            let fd = (ald_logpdf(y, mu + step, l, t) - ald_logpdf(y, mu - step, l, t)) / (2.0 * step);
            assert_relative_eq!(ald_score_mu(y, mu, l, t), fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn fisher_values() {
        assert_relative_eq!(ald_fisher_diag(tau(0.5), lam(1.0)), 0.25);
        assert_relative_eq!(ald_fisher_diag(tau(0.8), lam(0.1)), 16.0, epsilon = 1e-12);
    }

    #[test]
    fn score_moments_match_fisher() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mu, l, t) = (0.4, lam(0.5), tau(0.8));
        let n = 1_000_000;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let y = ald_sample(&mut rng, mu, l, t);
            let s = ald_score_mu(y, mu, l, t);
            s1 += s;
            s2 += s * s;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let fisher = ald_fisher_diag(t, l);
        assert!(mean.abs() < 3.0 * (fisher / n as f64).sqrt(), "mean score {mean}");
        assert_relative_eq!(var, fisher, max_relative = 0.01);
    }

    #[test]
    fn quantile_examples_and_cdf_roundtrip() {
        let (l, t) = (lam(1.7), tau(0.3));
        assert_relative_eq!(ald_quantile(0.3, 2.0, l, t).unwrap(), 2.0, epsilon = 1e-14);
        assert_eq!(ald_quantile(0.5, 0.0, lam(1.0), tau(0.5)).unwrap(), 0.0);
        assert_eq!(ald_cdf(2.0, 2.0, l, t), 0.3);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..1000 {
            let u = k as f64 / 1000.0;
            let q = ald_quantile(u, 2.0, l, t).unwrap();
            assert!(q > prev);
            prev = q;
            assert!((ald_cdf(q, 2.0, l, t) - u).abs() < 1e-10);
        }
        assert!(ald_quantile(0.0, 0.0, l, t).is_err());
        assert!(ald_quantile(1.0, 0.0, l, t).is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_centered() {
        let (l, t) = (lam(2.0), tau(0.8));
        let a: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..100).map(|_| ald_sample(&mut rng, 1.0, l, t)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..100).map(|_| ald_sample(&mut rng, 1.0, l, t)).collect()
        };
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        let mut below = 0usize;
        let mut loss = 0.0;
        for _ in 0..n {
            let y = ald_sample(&mut rng, 1.0, l, t);
            if y <= 1.0 {
                below += 1;
            }
            loss += pinball_loss(y, 1.0, t) / l.get();
        }
        assert!((below as f64 / n as f64 - 0.8).abs() < 0.002);

        // trapezoid value of E[rho(eps)/lambda] under the AL density
        let (a, b, m) = (1.0 - 300.0, 1.0 + 100.0, 800_001);
        let h = (b - a) / (m - 1) as f64;
        let f = |x: f64| pinball_loss(x, 1.0, t) / l.get() * ald_logpdf(x, 1.0, l, t).exp();
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..m - 1 {
            s += f(a + i as f64 * h);
        }
        let expected = s * h;
        assert_relative_eq!(expected, 1.0, max_relative = 1e-6);
        assert_relative_eq!(loss / n as f64, expected, max_relative = 0.01);
    }

    #[test]
    fn variance_formula_matches_integration() {
        for &(l, t) in &[(1.0, 0.5), (0.3, 0.8), (2.0, 0.1)] {
            let (l, t) = (lam(l), tau(t));
            // E[eps] and E[eps^2] by trapezoid over a wide grid
            let w = 200.0 * l.get() / (t.get() * (1.0 - t.get()));
            let m = 2_000_001;
            let h = 2.0 * w / (m - 1) as f64;
            let mut e1 = 0.0;
            let mut e2 = 0.0;
            for i in 0..m {
                let x = -w + i as f64 * h;
                let wt = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
                let p = ald_logpdf(x, 0.0, l, t).exp() * wt;
                e1 += x * p;
                e2 += x * x * p;
            }
            let var = e2 * h - (e1 * h).powi(2);
            assert_relative_eq!(ald_variance(l, t), var, max_relative = 1e-5);
        }
    }

    #[test]
    fn total_loglik_cases() {
        let (l, t) = (lam(0.9), tau(0.35));
        assert_eq!(total_loglik(&[], &[], l, t).unwrap(), 0.0);
        let n = 7;
        let v = total_loglik(&vec![1.5; n], &vec![0.2; n], l, t).unwrap();
        assert_relative_eq!(v, n as f64 * ald_logpdf(1.5, 0.2, l, t), epsilon = 1e-12);
        assert!(total_loglik(&[1.0], &[], l, t).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mu: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut naive = 0.0;
        for i in 0..50 {
            naive += ald_logpdf(y[i], mu[i], l, t);
        }
        assert_eq!(total_loglik(&y, &mu, l, t).unwrap(), naive);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pinball_equals_max_form(y in -1e3f64..1e3, q in -1e3f64..1e3, t in 0.001f64..0.999) {
                let tq = tau(t);
                let alt = t * (y - q).max(0.0) + (1.0 - t) * (q - y).max(0.0);
                prop_assert!((pinball_loss(y, q, tq) - alt).abs() <= 1e-12 * (1.0 + alt.abs()));
                prop_assert!(pinball_loss(y, q, tq) >= 0.0);
            }

            #[test]
            fn logpdf_maximized_at_observation(y in -10f64..10.0, l in 0.05f64..5.0, t in 0.01f64..0.99) {
                let at = ald_logpdf(y, y, lam(l), tau(t));
                for k in -50..=50 {
                    let mu = y + k as f64 * 0.01;
                    prop_assert!(ald_logpdf(y, mu, lam(l), tau(t)) <= at);
                }
            }

            #[test]
            fn cdf_at_location_is_tau(mu in -10f64..10.0, l in 0.05f64..5.0, t in 0.01f64..0.99) {
                prop_assert_eq!(ald_cdf(mu, mu, lam(l), tau(t)), t);
            }
        }
    }
}
