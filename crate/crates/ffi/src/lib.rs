//! C ABI for `qrlaplace`.
//!
//! Models and fit results are opaque handles created by `qrl_*_new`/`qrl_fit`
//! and released with the matching `*_free` function. Every fallible function
//! returns a [`QrlStatus`]; on failure a message describing the error is kept
//! per thread and can be read with [`qrl_last_error_message`].
//!
//! Matrices are passed row-major. A null pointer with a zero length is an
//! empty array. Panics never cross the boundary; they are reported as
//! [`QrlStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::DMatrix;
use qrlaplace::ald::{pinball_loss, QuantileLevel};
use qrlaplace::calibration::cqr_calibrate;
use qrlaplace::curvature::CurvatureMethod;
use qrlaplace::design::{CrossedDesign, FixedDesign, GpDesign, GroupedDesign, LatentDesign, PriorCovParams};
use qrlaplace::laplace::{fit, predict, FitResult, NewLatent, OptimizerConfig, QuantileModel};
use qrlaplace::Error;

/// Result code of every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Numerical = 4,
    Unsupported = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Curvature used in the Laplace approximation, passed to the model
/// constructors as its integer code.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrlCurvature {
    Fisher = 0,
    Tkc = 1,
}

/// A quantile regression model: quantile level, fixed effects and latent
/// structure.
pub struct QrlModel {
    model: QuantileModel,
}

/// Result of an empirical-Bayes fit.
pub struct QrlFit {
    result: FitResult,
}

struct Failure {
    status: QrlStatus,
    message: String,
}

impl Failure {
    fn new(status: QrlStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidParameter { .. } | Error::Config(_) => QrlStatus::InvalidArgument,
            Error::DimensionMismatch { .. } | Error::Domain(_) => QrlStatus::Data,
            Error::Unsupported(_) => QrlStatus::Unsupported,
            Error::SingularCovariance { .. }
            | Error::ModeNotConverged { .. }
            | Error::DegenerateCurvature(_)
            | Error::NonPositiveDensity(_)
            | Error::NonFinite(_) => QrlStatus::Numerical,
        };
        Self::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QrlStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            QrlStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(Failure::new(QrlStatus::NullPointer, format!("`{name}` is null")))
    } else {
        // SAFETY: the caller guarantees `p` points to `len` readable elements
        Ok(unsafe { slice::from_raw_parts(p, len) })
    }
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        Ok(&mut [])
    } else if p.is_null() {
        Err(Failure::new(QrlStatus::NullPointer, format!("`{name}` is null")))
    } else {
        // SAFETY: the caller guarantees `p` points to `len` writable elements
        Ok(unsafe { slice::from_raw_parts_mut(p, len) })
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from this library and are still live
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(QrlStatus::NullPointer, format!("`{name}` is null")))
}

fn write_out<T>(p: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::new(QrlStatus::NullPointer, format!("`{name}` is null")));
    }
    // SAFETY: checked non-null; the caller provides a writable location
    unsafe { p.write(value) };
    Ok(())
}

fn size_product(a: usize, b: usize, name: &str) -> Result<usize, Failure> {
    a.checked_mul(b)
        .ok_or_else(|| Failure::new(QrlStatus::InvalidArgument, format!("`{name}` size overflows")))
}

unsafe fn fixed_design(x: *const f64, n: usize, n_coef: usize) -> Result<FixedDesign, Failure> {
    let x = unsafe { input(x, size_product(n, n_coef, "x")?, "x")? };
    Ok(FixedDesign::new(DMatrix::from_row_slice(n, n_coef, x))?)
}

unsafe fn group_index(g: *const u32, n: usize, m: usize, name: &str) -> Result<GroupedDesign, Failure> {
    let g = unsafe { input(g, n, name)? };
    Ok(GroupedDesign::new(g.iter().map(|&v| v as usize).collect(), m)?)
}

fn make_model(
    tau: f64,
    fixed: FixedDesign,
    latent: LatentDesign,
    curvature: u32,
    out: *mut *mut QrlModel,
) -> Result<(), Failure> {
    let curvature = match curvature {
        c if c == QrlCurvature::Fisher as u32 => CurvatureMethod::Fisher,
        c if c == QrlCurvature::Tkc as u32 => CurvatureMethod::Tkc,
        c => return Err(Failure::new(QrlStatus::InvalidArgument, format!("unknown curvature code {c}"))),
    };
    let model = QuantileModel::new(QuantileLevel::new(tau)?, fixed, latent, curvature)?;
    write_out(out, Box::into_raw(Box::new(QrlModel { model })), "out")
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, including the
/// terminating NUL; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn qrl_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes_with_nul().len()))
}

/// Copies the last error message on this thread into `buf` (NUL-terminated).
/// Returns the number of bytes written excluding the NUL, 0 when there is no
/// error, or -1 when `buf` is null or shorter than
/// [`qrl_last_error_length`].
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qrl_last_error_message(buf: *mut c_char, len: usize) -> i64 {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if buf.is_null() || len < bytes.len() {
            return -1;
        }
        // SAFETY: `buf` holds at least `bytes.len()` bytes
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len()) };
        (bytes.len() - 1) as i64
    })
}

/// Model with one grouping factor. `group` holds `n` ids in `0..num_groups`;
/// `x` is the `n x n_coef` fixed-effect design (row-major, may be null when
/// `n_coef` is 0).
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_model_new_grouped(
    tau: f64,
    group: *const u32,
    n: usize,
    num_groups: usize,
    x: *const f64,
    n_coef: usize,
    curvature: u32,
    out: *mut *mut QrlModel,
) -> QrlStatus {
    guard(|| {
        let g = unsafe { group_index(group, n, num_groups, "group")? };
        let fixed = unsafe { fixed_design(x, n, n_coef)? };
        make_model(tau, fixed, LatentDesign::Grouped(g), curvature, out)
    })
}

/// Model with two crossed grouping factors.
///
/// # Safety
/// As [`qrl_model_new_grouped`].
#[no_mangle]
pub unsafe extern "C" fn qrl_model_new_crossed(
    tau: f64,
    group1: *const u32,
    num_groups1: usize,
    group2: *const u32,
    num_groups2: usize,
    n: usize,
    x: *const f64,
    n_coef: usize,
    curvature: u32,
    out: *mut *mut QrlModel,
) -> QrlStatus {
    guard(|| {
        let a = unsafe { group_index(group1, n, num_groups1, "group1")? };
        let b = unsafe { group_index(group2, n, num_groups2, "group2")? };
        let fixed = unsafe { fixed_design(x, n, n_coef)? };
        make_model(tau, fixed, LatentDesign::Crossed(CrossedDesign::new(a, b)?), curvature, out)
    })
}

/// Gaussian-process model with a Matérn-3/2 kernel over `n x d` row-major
/// input coordinates.
///
/// # Safety
/// As [`qrl_model_new_grouped`].
#[no_mangle]
pub unsafe extern "C" fn qrl_model_new_gp(
    tau: f64,
    coords: *const f64,
    n: usize,
    d: usize,
    x: *const f64,
    n_coef: usize,
    curvature: u32,
    out: *mut *mut QrlModel,
) -> QrlStatus {
    guard(|| {
        let c = unsafe { input(coords, size_product(n, d, "coords")?, "coords")? };
        let gp = GpDesign::new(DMatrix::from_row_slice(n, d, c))?;
        let fixed = unsafe { fixed_design(x, n, n_coef)? };
        make_model(tau, fixed, LatentDesign::Gp(gp), curvature, out)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a `qrl_model_new_*` function and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn qrl_model_free(model: *mut QrlModel) {
    if !model.is_null() {
        // SAFETY: allocated by `Box::into_raw` in `make_model`
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Empirical-Bayes fit of `model` to the `n` responses `y`. `seed` drives
/// the jittered optimizer restarts.
///
/// # Safety
/// `model` must be a live handle, `y` must hold `n` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_fit(model: *const QrlModel, y: *const f64, n: usize, seed: u64, out: *mut *mut QrlFit) -> QrlStatus {
    guard(|| {
        let model = unsafe { handle(model, "model")? };
        let y = unsafe { input(y, n, "y")? };
        let cfg = OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        };
        let result = fit(&model.model, y, None, &cfg)?;
        write_out(out, Box::into_raw(Box::new(QrlFit { result })), "out")
    })
}

/// Releases a fit result. Null is ignored.
///
/// # Safety
/// `fit` must come from [`qrl_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qrl_fit_free(fit: *mut QrlFit) {
    if !fit.is_null() {
        // SAFETY: allocated by `Box::into_raw` in `qrl_fit`
        drop(unsafe { Box::from_raw(fit) });
    }
}

/// Fitted AL scale.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_fit_lambda(fit: *const QrlFit, out: *mut f64) -> QrlStatus {
    guard(|| write_out(out, unsafe { handle(fit, "fit")? }.result.lambda_hat.get(), "out"))
}

/// Laplace log-marginal likelihood at the fitted hyperparameters.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_fit_log_marginal(fit: *const QrlFit, out: *mut f64) -> QrlStatus {
    guard(|| write_out(out, unsafe { handle(fit, "fit")? }.result.posterior.log_marginal, "out"))
}

fn copy_vector(values: &[f64], out: *mut f64, cap: usize, len: *mut usize) -> Result<(), Failure> {
    write_out(len, values.len(), "len")?;
    if cap < values.len() {
        return Err(Failure::new(
            QrlStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", values.len()),
        ));
    }
    unsafe { output(out, values.len(), "out")? }.copy_from_slice(values);
    Ok(())
}

/// Prior covariance parameters: `sigma2` (grouped), `sigma2_1, sigma2_2`
/// (crossed) or `sigma2, length_scale` (GP). The count is stored in `len`
/// even when `cap` is too small.
///
/// # Safety
/// `fit` must be a live handle, `out` must hold `cap` values, `len` writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_fit_theta(fit: *const QrlFit, out: *mut f64, cap: usize, len: *mut usize) -> QrlStatus {
    guard(|| {
        let theta = match unsafe { handle(fit, "fit")? }.result.theta_hat {
            PriorCovParams::Grouped { sigma2 } => vec![sigma2],
            PriorCovParams::Crossed { sigma2 } => sigma2.to_vec(),
            PriorCovParams::Gp { sigma2, length_scale } => vec![sigma2, length_scale],
        };
        copy_vector(&theta, out, cap, len)
    })
}

/// Fixed-effect coefficients.
///
/// # Safety
/// As [`qrl_fit_theta`].
#[no_mangle]
pub unsafe extern "C" fn qrl_fit_beta(fit: *const QrlFit, out: *mut f64, cap: usize, len: *mut usize) -> QrlStatus {
    guard(|| copy_vector(&unsafe { handle(fit, "fit")? }.result.beta_hat, out, cap, len))
}

/// Posterior mode of the latent effects.
///
/// # Safety
/// As [`qrl_fit_theta`].
#[no_mangle]
pub unsafe extern "C" fn qrl_fit_latent_mode(fit: *const QrlFit, out: *mut f64, cap: usize, len: *mut usize) -> QrlStatus {
    guard(|| copy_vector(&unsafe { handle(fit, "fit")? }.result.posterior.b_hat, out, cap, len))
}

unsafe fn run_predict(
    model: *const QrlModel,
    fit: *const QrlFit,
    x_new: *const f64,
    n_new: usize,
    latent: NewLatent,
    quantile: *mut f64,
    latent_sd: *mut f64,
) -> Result<(), Failure> {
    let model = unsafe { handle(model, "model")? };
    let fit = unsafe { handle(fit, "fit")? };
    let fixed = unsafe { fixed_design(x_new, n_new, model.model.fixed.n_coef())? };
    let preds = predict(&model.model, &fit.result, &fixed, &latent)?;
    let q = unsafe { output(quantile, n_new, "quantile")? };
    let s = unsafe { output(latent_sd, n_new, "latent_sd")? };
    for ((p, q), s) in preds.iter().zip(q).zip(s) {
        *q = p.quantile;
        *s = p.latent_sd;
    }
    Ok(())
}

/// Predicted quantile and latent posterior sd for `n_new` points of a grouped
/// model. A negative group id marks a group not seen in training. `x_new`
/// has the same number of columns as the training design.
///
/// # Safety
/// `model` and `fit` must be live handles from the same model; arrays must
/// hold `n_new` entries (`n_new x n_coef` for `x_new`).
#[no_mangle]
pub unsafe extern "C" fn qrl_predict_grouped(
    model: *const QrlModel,
    fit: *const QrlFit,
    group: *const i64,
    x_new: *const f64,
    n_new: usize,
    quantile: *mut f64,
    latent_sd: *mut f64,
) -> QrlStatus {
    guard(|| {
        let g = unsafe { input(group, n_new, "group")? };
        let ids = g.iter().map(|&v| usize::try_from(v).ok()).collect();
        unsafe { run_predict(model, fit, x_new, n_new, NewLatent::Grouped(ids), quantile, latent_sd) }
    })
}

/// Predicted quantile and latent posterior sd at `n_new x d` row-major
/// coordinates of a GP model.
///
/// # Safety
/// As [`qrl_predict_grouped`], with `coords` holding `n_new x d` values.
#[no_mangle]
pub unsafe extern "C" fn qrl_predict_gp(
    model: *const QrlModel,
    fit: *const QrlFit,
    coords: *const f64,
    d: usize,
    x_new: *const f64,
    n_new: usize,
    quantile: *mut f64,
    latent_sd: *mut f64,
) -> QrlStatus {
    guard(|| {
        let c = unsafe { input(coords, size_product(n_new, d, "coords")?, "coords")? };
        let latent = NewLatent::Gp(DMatrix::from_row_slice(n_new, d, c));
        unsafe { run_predict(model, fit, x_new, n_new, latent, quantile, latent_sd) }
    })
}

/// Pinball loss of `y` against quantile prediction `q` at level `tau`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_pinball_loss(y: f64, q: f64, tau: f64, out: *mut f64) -> QrlStatus {
    guard(|| write_out(out, pinball_loss(y, q, QuantileLevel::new(tau)?), "out"))
}

/// Conformal correction `t` for intervals `[lower - t s, upper + t s]` at
/// miscoverage `alpha`, with `s = sigma` when `sigma` is non-null and 1
/// otherwise. `t` is `+inf` when the calibration set is too small.
///
/// # Safety
/// Arrays must hold `n` values; `out_t` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qrl_cqr_calibrate(
    y: *const f64,
    lower: *const f64,
    upper: *const f64,
    sigma: *const f64,
    n: usize,
    alpha: f64,
    out_t: *mut f64,
) -> QrlStatus {
    guard(|| {
        let y = unsafe { input(y, n, "y")? };
        let lo = unsafe { input(lower, n, "lower")? };
        let hi = unsafe { input(upper, n, "upper")? };
        let s = if sigma.is_null() {
            None
        } else {
            Some(unsafe { input(sigma, n, "sigma")? })
        };
        write_out(out_t, cqr_calibrate(y, lo, hi, alpha, s)?.t, "out_t")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let n = qrl_last_error_length();
        let mut buf = vec![0 as c_char; n.max(1)];
        let w = unsafe { qrl_last_error_message(buf.as_mut_ptr(), buf.len()) };
        assert!(w >= 0);
        let bytes: Vec<u8> = buf[..w as usize].iter().map(|&c| c as u8).collect();
        String::from_utf8(bytes).unwrap()
    }

    #[test]
    fn status_and_last_error() {
        let mut v = 0.0;
        assert_eq!(unsafe { qrl_pinball_loss(1.0, 0.0, 1.5, &mut v) }, QrlStatus::InvalidArgument);
        assert!(last_error().contains("tau"));
        assert_eq!(unsafe { qrl_last_error_message(ptr::null_mut(), 0) }, -1);
        assert_eq!(unsafe { qrl_pinball_loss(1.0, 0.0, 0.25, &mut v) }, QrlStatus::Ok);
        assert_eq!(v, 0.25);
        assert_eq!(qrl_last_error_length(), 0);
        assert_eq!(unsafe { qrl_pinball_loss(1.0, 0.0, 0.25, ptr::null_mut()) }, QrlStatus::NullPointer);
    }

    #[test]
    fn errors_are_per_thread() {
        let mut v = 0.0;
        assert_eq!(unsafe { qrl_pinball_loss(1.0, 0.0, 2.0, &mut v) }, QrlStatus::InvalidArgument);
        std::thread::spawn(|| assert_eq!(qrl_last_error_length(), 0)).join().unwrap();
        assert!(qrl_last_error_length() > 0);
    }

    #[test]
    fn invalid_group_id_is_reported() {
        let g = [0u32, 3];
        let mut m = ptr::null_mut();
        let st = unsafe { qrl_model_new_grouped(0.5, g.as_ptr(), 2, 2, ptr::null(), 0, QrlCurvature::Tkc as u32, &mut m) };
        assert_eq!(st, QrlStatus::InvalidArgument);
        assert!(m.is_null());
        assert!(last_error().contains("out of range"));
        let st = unsafe { qrl_model_new_grouped(0.5, ptr::null(), 2, 2, ptr::null(), 0, QrlCurvature::Tkc as u32, &mut m) };
        assert_eq!(st, QrlStatus::NullPointer);
    }
}
