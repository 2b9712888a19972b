use std::ffi::{c_char, CStr};
use std::ptr;

use qrlaplace_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; qrl_last_error_length().max(1)];
    let n = unsafe { qrl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n >= 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

/// `m` groups of `n_j` observations with group effects `j / m - 0.5`.
fn grouped_data(m: usize, n_j: usize) -> (Vec<u32>, Vec<f64>) {
    let mut g = Vec::new();
    let mut y = Vec::new();
    for i in 0..m * n_j {
        let j = i % m;
        g.push(j as u32);
        let u = ((i * 7919) % 1000) as f64 / 1000.0 + 0.0005;
        y.push(j as f64 / m as f64 - 0.5 + 2.0 + 0.3 * (u / (1.0 - u)).ln());
    }
    (g, y)
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(qrl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn grouped_fit_and_predict() {
    let (m, n_j) = (10, 30);
    let (g, y) = grouped_data(m, n_j);
    let x = vec![1.0; y.len()];
    let mut model = ptr::null_mut();
    let st = unsafe {
        qrl_model_new_grouped(0.5, g.as_ptr(), g.len(), m, x.as_ptr(), 1, QrlCurvature::Tkc as u32, &mut model)
    };
    assert_eq!(st, QrlStatus::Ok, "{}", last_error());
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { qrl_fit(model, y.as_ptr(), y.len(), 1, &mut fit) }, QrlStatus::Ok, "{}", last_error());

    let mut lambda = 0.0;
    let mut lml = 0.0;
    assert_eq!(unsafe { qrl_fit_lambda(fit, &mut lambda) }, QrlStatus::Ok);
    assert_eq!(unsafe { qrl_fit_log_marginal(fit, &mut lml) }, QrlStatus::Ok);
    assert!(lambda > 0.0 && lml.is_finite());

    let mut len = 0usize;
    let mut small = [0.0; 0];
    let st = unsafe { qrl_fit_latent_mode(fit, small.as_mut_ptr(), 0, &mut len) };
    assert_eq!(st, QrlStatus::BufferTooSmall);
    assert_eq!(len, m);
    let mut b = vec![0.0; len];
    assert_eq!(unsafe { qrl_fit_latent_mode(fit, b.as_mut_ptr(), b.len(), &mut len) }, QrlStatus::Ok);
    assert!(b[m - 1] > b[0]);
    let mut theta = [0.0; 4];
    assert_eq!(unsafe { qrl_fit_theta(fit, theta.as_mut_ptr(), 4, &mut len) }, QrlStatus::Ok);
    assert_eq!(len, 1);
    assert!(theta[0] > 0.0);
    let mut beta = [0.0; 1];
    assert_eq!(unsafe { qrl_fit_beta(fit, beta.as_mut_ptr(), 1, &mut len) }, QrlStatus::Ok);

    let new_g = [0i64, 9, -1];
    let new_x = [1.0; 3];
    let mut q = [0.0; 3];
    let mut sd = [0.0; 3];
    let st = unsafe { qrl_predict_grouped(model, fit, new_g.as_ptr(), new_x.as_ptr(), 3, q.as_mut_ptr(), sd.as_mut_ptr()) };
    assert_eq!(st, QrlStatus::Ok, "{}", last_error());
    assert!((q[0] - beta[0] - b[0]).abs() < 1e-12);
    assert!((q[2] - beta[0]).abs() < 1e-12);
    assert!((sd[2] - theta[0].sqrt()).abs() < 1e-12);

    // a group id past the training groups is a data error
    let bad = [10i64];
    let st = unsafe { qrl_predict_grouped(model, fit, bad.as_ptr(), new_x.as_ptr(), 1, q.as_mut_ptr(), sd.as_mut_ptr()) };
    assert_eq!(st, QrlStatus::Data);
    assert!(last_error().contains("out of range"));

    unsafe {
        qrl_fit_free(fit);
        qrl_model_free(model);
        qrl_fit_free(ptr::null_mut());
        qrl_model_free(ptr::null_mut());
    }
}

#[test]
fn gp_fit_and_predict() {
    let n = 40;
    let coords: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let y: Vec<f64> = coords
        .iter()
        .enumerate()
        .map(|(i, x)| (6.0 * x).sin() + 0.1 * (((i * 37) % 11) as f64 - 5.0) / 5.0)
        .collect();
    let mut model = ptr::null_mut();
    let st = unsafe { qrl_model_new_gp(0.5, coords.as_ptr(), n, 1, ptr::null(), 0, QrlCurvature::Fisher as u32, &mut model) };
    assert_eq!(st, QrlStatus::Ok, "{}", last_error());
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { qrl_fit(model, y.as_ptr(), n, 0, &mut fit) }, QrlStatus::Ok, "{}", last_error());
    let mut theta = [0.0; 2];
    let mut len = 0;
    assert_eq!(unsafe { qrl_fit_theta(fit, theta.as_mut_ptr(), 2, &mut len) }, QrlStatus::Ok);
    assert_eq!(len, 2);
    let at = [0.25, 5.0];
    let mut q = [0.0; 2];
    let mut sd = [0.0; 2];
    let st = unsafe { qrl_predict_gp(model, fit, at.as_ptr(), 1, ptr::null(), 2, q.as_mut_ptr(), sd.as_mut_ptr()) };
    assert_eq!(st, QrlStatus::Ok, "{}", last_error());
    assert!((q[0] - (1.5f64).sin()).abs() < 0.3);
    // far from the data the latent sd returns to the prior sd
    assert!(sd[0] < sd[1]);
    assert!((sd[1] - theta[0].sqrt()).abs() < 1e-6);
    unsafe {
        qrl_fit_free(fit);
        qrl_model_free(model);
    }
}

#[test]
fn argument_errors() {
    let mut model = ptr::null_mut();
    let g = [0u32, 1];
    let st = unsafe { qrl_model_new_grouped(0.5, g.as_ptr(), 2, 2, ptr::null(), 0, 9, &mut model) };
    assert_eq!(st, QrlStatus::InvalidArgument);
    assert!(last_error().contains("curvature"));
    let st = unsafe { qrl_model_new_grouped(0.5, g.as_ptr(), 2, 2, ptr::null(), 1, 1, &mut model) };
    assert_eq!(st, QrlStatus::NullPointer);
    assert!(last_error().contains("`x`"));
    let mut fit = ptr::null_mut();
    let y = [1.0];
    assert_eq!(unsafe { qrl_fit(ptr::null(), y.as_ptr(), 1, 0, &mut fit) }, QrlStatus::NullPointer);

    let st = unsafe { qrl_model_new_grouped(0.5, g.as_ptr(), 2, 2, ptr::null(), 0, 1, &mut model) };
    assert_eq!(st, QrlStatus::Ok);
    assert_eq!(unsafe { qrl_fit(model, y.as_ptr(), 1, 0, &mut fit) }, QrlStatus::Data);
    assert!(fit.is_null());
    unsafe { qrl_model_free(model) };
}

#[test]
fn conformal_and_pinball() {
    let y = [0.0, 1.0, 2.0, 3.0];
    let lo = [0.5; 4];
    let hi = [2.5; 4];
    let mut t = 0.0;
    assert_eq!(unsafe { qrl_cqr_calibrate(y.as_ptr(), lo.as_ptr(), hi.as_ptr(), ptr::null(), 4, 0.5, &mut t) }, QrlStatus::Ok);
    // scores are 0.5, -0.5, -0.5, 0.5; the ceil(5 * 0.5) = 3rd smallest is 0.5
    assert_eq!(t, 0.5);
    let sigma = [2.0; 4];
    assert_eq!(unsafe { qrl_cqr_calibrate(y.as_ptr(), lo.as_ptr(), hi.as_ptr(), sigma.as_ptr(), 4, 0.5, &mut t) }, QrlStatus::Ok);
    assert_eq!(t, 0.25);
    assert_eq!(unsafe { qrl_cqr_calibrate(y.as_ptr(), lo.as_ptr(), hi.as_ptr(), ptr::null(), 4, 0.1, &mut t) }, QrlStatus::Ok);
    assert!(t.is_infinite());
    assert_eq!(unsafe { qrl_cqr_calibrate(y.as_ptr(), lo.as_ptr(), hi.as_ptr(), ptr::null(), 0, 0.1, &mut t) }, QrlStatus::Data);

    let mut v = 0.0;
    assert_eq!(unsafe { qrl_pinball_loss(0.0, 1.0, 0.8, &mut v) }, QrlStatus::Ok);
    assert!((v - 0.2).abs() < 1e-15);
}
