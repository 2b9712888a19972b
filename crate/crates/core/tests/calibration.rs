use nalgebra::DMatrix;
use qrlaplace::ald::QuantileLevel;
use qrlaplace::calibration::{cqr_calibrate, empirical_coverage, sandwich_standard_errors, ConformalMode, Interval, SandwichScale};
use qrlaplace::curvature::CurvatureMethod;
use qrlaplace::design::{FixedDesign, GpDesign, LatentDesign};
use qrlaplace::laplace::{fit, predict, NewLatent, OptimizerConfig, Prediction, QuantileModel};
use qrlaplace::sim::{gen_grouped, gen_hetero_regression, NoiseFamily, NoiseSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALPHA: f64 = 0.1;

fn tau(v: f64) -> QuantileLevel {
    QuantileLevel::new(v).unwrap()
}

fn column(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.len(), 1, x)
}

/// GP quantile regression with an intercept fitted at level `t`, predicted
/// at `x_new`.
fn gp_quantile(x: &[f64], y: &[f64], t: f64, x_new: &[f64]) -> Vec<Prediction> {
    let latent = LatentDesign::Gp(GpDesign::new(column(x)).unwrap());
    let model = QuantileModel::new(tau(t), FixedDesign::intercept(x.len()), latent, CurvatureMethod::Tkc).unwrap();
    let opt = OptimizerConfig {
        restarts: 1,
        ..OptimizerConfig::default()
    };
    let fitted = fit(&model, y, None, &opt).unwrap();
    predict(&model, &fitted, &FixedDesign::intercept(x_new.len()), &NewLatent::Gp(column(x_new))).unwrap()
}

struct Base {
    x: Vec<f64>,
    y: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    sigma: Vec<f64>,
}

/// Lower and upper quantile models fitted on 500 training points and
/// evaluated on `n_eval` fresh points.
fn base_predictions(n_eval: usize, seed: u64) -> Base {
    let (xt, yt) = gen_hetero_regression(500, seed);
    let (x, y) = gen_hetero_regression(n_eval, seed + 1);
    let lo = gp_quantile(&xt, &yt, ALPHA / 2.0, &x);
    let hi = gp_quantile(&xt, &yt, 1.0 - ALPHA / 2.0, &x);
    let sigma = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a.latent_sd + b.latent_sd)).collect();
    Base {
        x,
        y,
        lower: lo.iter().map(|p| p.quantile).collect(),
        upper: hi.iter().map(|p| p.quantile).collect(),
        sigma,
    }
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn intervals(base: &Base, idx: &[usize], cal: &qrlaplace::calibration::ConformalCalibration) -> Vec<Interval> {
    idx.iter()
        .map(|&i| cal.apply(base.lower[i], base.upper[i], Some(base.sigma[i])))
        .collect()
}

fn calibrate(base: &Base, idx: &[usize], aware: bool) -> qrlaplace::calibration::ConformalCalibration {
    let sigma = pick(&base.sigma, idx);
    cqr_calibrate(
        &pick(&base.y, idx),
        &pick(&base.lower, idx),
        &pick(&base.upper, idx),
        ALPHA,
        aware.then_some(sigma.as_slice()),
    )
    .unwrap()
}

/// Coverage per bin over 10 equal-width bins of `[0, 2]`.
fn binned_coverage(base: &Base, idx: &[usize], iv: &[Interval]) -> Vec<f64> {
    let mut hits = [0usize; 10];
    let mut counts = [0usize; 10];
    for (&i, v) in idx.iter().zip(iv) {
        let b = ((base.x[i] / 0.2) as usize).min(9);
        counts[b] += 1;
        hits[b] += usize::from(v.contains(base.y[i]));
    }
    hits.iter()
        .zip(&counts)
        .filter(|(_, c)| **c > 0)
        .map(|(h, c)| *h as f64 / *c as f64)
        .collect()
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn cqr_marginal_guarantee_and_conditional_uniformity() {
    let n_cal = 500;
    let n_test = 10_000;
    let base = base_predictions(n_cal + n_test, 11);
    assert!(base.sigma.iter().all(|s| *s > 0.0 && s.is_finite()));
    // latent uncertainty is largest where data are sparse (small x)
    let (mut lo_x, mut hi_x) = (Vec::new(), Vec::new());
    for (x, s) in base.x.iter().zip(&base.sigma) {
        if *x < 0.5 {
            lo_x.push(*s)
        } else if *x > 1.5 {
            hi_x.push(*s)
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&lo_x) > mean(&hi_x));

    let cal_idx: Vec<usize> = (0..n_cal).collect();
    let test_idx: Vec<usize> = (n_cal..n_cal + n_test).collect();
    let test_y = pick(&base.y, &test_idx);
    let mut sds = Vec::new();
    for aware in [false, true] {
        let cal = calibrate(&base, &cal_idx, aware);
        assert!(cal.t.is_finite());
        assert_eq!(
            cal.mode,
            if aware {
                ConformalMode::UncertaintyAware
            } else {
                ConformalMode::Standard
            }
        );
        let cal_cov = empirical_coverage(&intervals(&base, &cal_idx, &cal), &pick(&base.y, &cal_idx)).unwrap();
        assert!(cal_cov >= 1.0 - ALPHA);
        let iv = intervals(&base, &test_idx, &cal);
        let cov = empirical_coverage(&iv, &test_y).unwrap();
        assert!(cov >= 1.0 - ALPHA - 2.0 / (n_test as f64).sqrt(), "aware={aware}: {cov}");
        let bins = binned_coverage(&base, &test_idx, &iv);
        assert_eq!(bins.len(), 10);
        println!("aware={aware} t={:.4} coverage={cov:.4} bins={bins:.3?}", cal.t);
        sds.push(sd(&bins));
    }
    println!("across-bin coverage sd: standard {:.4}, uncertainty-aware {:.4}", sds[0], sds[1]);
    assert!(sds[1] < sds[0]);
}

#[test]
fn cqr_coverage_over_random_splits() {
    let n_cal = 500;
    let n_test = 1500;
    let base = base_predictions(n_cal + n_test, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut idx: Vec<usize> = (0..n_cal + n_test).collect();
    for aware in [false, true] {
        let mut total = 0.0;
        for _ in 0..100 {
            idx.shuffle(&mut rng);
            let (c, t) = idx.split_at(n_cal);
            let cal = calibrate(&base, c, aware);
            total += empirical_coverage(&intervals(&base, t, &cal), &pick(&base.y, t)).unwrap();
        }
        let mean = total / 100.0;
        assert!(mean >= 1.0 - ALPHA - 2.0 / (n_test as f64).sqrt(), "aware={aware}: {mean}");
    }
}

#[test]
fn sandwich_width_scales_with_response() {
    let t = tau(0.8);
    let data = gen_grouped(30, 40, 1.0, &NoiseSpec::new(NoiseFamily::Gaussian, t), 7).unwrap();
    let model = QuantileModel::new(t, FixedDesign::empty(data.n_obs()), data.latent.clone(), CurvatureMethod::Tkc).unwrap();
    let opt = OptimizerConfig::default();
    let se_at = |s: f64| {
        let y: Vec<f64> = data.y.iter().map(|v| v * s).collect();
        let fitted = fit(&model, &y, None, &opt).unwrap();
        let paper = sandwich_standard_errors(&model, &y, &fitted, &model.tkc, SandwichScale::AsPaper).unwrap();
        let density = sandwich_standard_errors(&model, &y, &fitted, &model.tkc, SandwichScale::DensityScale).unwrap();
        (paper, density, fitted.lambda_hat.get())
    };
    let (paper1, density1, l1) = se_at(1.0);
    for s in [0.5, 2.0] {
        let (paper, density, l) = se_at(s);
        assert!((l / l1 / s - 1.0).abs() < 1e-3, "lambda ratio {}", l / l1);
        // c targets f / lambda, so c scales by 1 / s^2 and lambda c by 1 / s
        for (a, b) in density.iter().zip(&density1) {
            assert!((a / b / s - 1.0).abs() < 1e-3, "s={s}: density-scale width ratio {}", a / b);
        }
        for (a, b) in paper.iter().zip(&paper1) {
            assert!((a / b / (s * s) - 1.0).abs() < 1e-3, "s={s}: as-paper width ratio {}", a / b);
        }
    }
}
