//! C interface to `dpnets`.
//!
//! Objects live behind opaque handles (`DpnMlp`, `DpnModel`) that the caller
//! releases with the matching `*_free` function. Every fallible call returns a
//! [`DpnStatus`]; the message of the most recent failure on the calling thread is
//! available through [`dpn_last_error`].
//!
//! Matrices are column-major `f64` buffers with one sample per column: a batch of
//! `m` states in `d` dimensions is `d*m` doubles, sample `j` at offset `j*d`.
//!
//! # Safety
//!
//! Every function except [`dpn_version`] is `unsafe`. Non-null pointers must be
//! valid for the lengths stated in each function's documentation, strings must be
//! NUL-terminated UTF-8, and handles must come from this library and not have
//! been freed. Null pointers are detected and reported as `NullPointer`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dpnets::cli::{run_experiment, ExperimentConfig};
use dpnets::features::{FeatureMap, Mlp, MlpSpec};
use dpnets::ndcore::Matrix;
use dpnets::regression::Model;
use dpnets::scores::{score_generator, score_p, score_ridge, score_s, CovGrad, Covariances, GeneratorCovariances, ScoreValue};
use dpnets::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    /// Non-finite values, indefinite covariances, degenerate batches or aborted training.
    Numerical = 4,
    Io = 5,
    Format = 6,
    /// The feature map lacks the smoothness the operation needs.
    Unsupported = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpnScoreKind {
    /// Whitened projection score.
    P = 0,
    /// Relaxed score.
    S = 1,
    /// Ridge-regularized whitened score.
    Ridge = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpnModelKind {
    Transfer = 0,
    Generator = 1,
}

/// `total = correlation − gamma·(distortion_x + distortion_y)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DpnScoreValue {
    pub total: f64,
    pub correlation: f64,
    pub distortion_x: f64,
    pub distortion_y: f64,
    pub cond_x: f64,
    pub cond_y: f64,
}

impl From<ScoreValue> for DpnScoreValue {
    fn from(v: ScoreValue) -> Self {
        DpnScoreValue {
            total: v.total,
            correlation: v.correlation,
            distortion_x: v.distortion_x,
            distortion_y: v.distortion_y,
            cond_x: v.cond_x,
            cond_y: v.cond_y,
        }
    }
}

/// Opaque MLP feature map.
pub struct DpnMlp {
    inner: Mlp,
}

/// Opaque fitted operator model.
pub struct DpnModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> DpnStatus {
    match err {
        Error::Dimension(_) => DpnStatus::Dimension,
        Error::NotSymmetric { .. }
        | Error::NotPsd { .. }
        | Error::NonFinite(_)
        | Error::DegenerateBatch(_)
        | Error::UnstableStep(_)
        | Error::Aborted(_) => DpnStatus::Numerical,
        Error::UnsupportedActivation(_) => DpnStatus::Unsupported,
        Error::StaleHooks | Error::Config(_) => DpnStatus::InvalidArgument,
        Error::Format(_) | Error::Json(_) => DpnStatus::Format,
        Error::Io(_) => DpnStatus::Io,
    }
}

struct Fail(DpnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: DpnStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, recording any error or panic for [`dpn_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DpnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DpnStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(DpnStatus::NullPointer, format!("{what} is null")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(DpnStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: non-null and documented as NUL-terminated.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .or_else(|_| fail(DpnStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return fail(DpnStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller guarantees `len` readable doubles.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return fail(DpnStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller guarantees `len` writable doubles.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn optional_output<'a>(p: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    // SAFETY: as in `output`, for non-null pointers.
    (!p.is_null()).then(|| unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return fail(DpnStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: non-null and writable per the caller's contract.
    unsafe { out.write(value) };
    Ok(())
}

fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Fail> {
    if rows == 0 || cols == 0 {
        return fail(DpnStatus::Dimension, format!("{what} must be non-empty"));
    }
    Ok(Matrix::from_column_slice(rows, cols, input(p, rows * cols, what)?))
}

// ---------------------------------------------------------------------------

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated, always
/// NUL-terminated when `cap > 0`) and returns the full message length plus one.
#[no_mangle]
pub unsafe extern "C" fn dpn_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            // SAFETY: `buf` holds `cap` writable bytes.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len() + 1
    })
}

// ---------------------------------------------------------------------------
// Feature maps

/// Builds an MLP from a JSON spec such as
/// `{"input_dim": 1, "widths": [32, 4], "activations": ["celu", "identity"], "seed": 0}`.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_new(spec_json: *const c_char, out: *mut *mut DpnMlp) -> DpnStatus {
    guard(|| {
        let text = c_str(spec_json, "spec_json")?;
        let spec: MlpSpec = serde_json::from_str(text).map_err(|e| Fail(DpnStatus::InvalidArgument, e.to_string()))?;
        let mlp = Mlp::init(&spec)?;
        write_out(out, Box::into_raw(Box::new(DpnMlp { inner: mlp })), "out")
    })
}

/// Releases an MLP handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_free(mlp: *mut DpnMlp) {
    if !mlp.is_null() {
        // SAFETY: the handle came from `dpn_mlp_new` and is released once.
        drop(unsafe { Box::from_raw(mlp) });
    }
}

/// Input dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_input_dim(mlp: *const DpnMlp) -> usize {
    // SAFETY: null or a live handle.
    unsafe { mlp.as_ref() }.map_or(0, |m| m.inner.input_dim())
}

/// Feature dimension `r`, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_output_dim(mlp: *const DpnMlp) -> usize {
    // SAFETY: null or a live handle.
    unsafe { mlp.as_ref() }.map_or(0, |m| m.inner.output_dim())
}

/// Number of trainable parameters, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_param_count(mlp: *const DpnMlp) -> usize {
    // SAFETY: null or a live handle.
    unsafe { mlp.as_ref() }.map_or(0, |m| m.inner.param_count())
}

/// Copies the flattened parameters into `out`, which holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_get_params(mlp: *const DpnMlp, out: *mut f64, len: usize) -> DpnStatus {
    guard(|| {
        let mlp = non_null(mlp, "mlp")?;
        let p = mlp.inner.params();
        if len < p.len() {
            return fail(DpnStatus::BufferTooSmall, format!("need {} doubles, got {len}", p.len()));
        }
        output(out, p.len(), "out")?.copy_from_slice(p);
        Ok(())
    })
}

/// Replaces the parameters; `len` must equal the parameter count.
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_set_params(mlp: *mut DpnMlp, params: *const f64, len: usize) -> DpnStatus {
    guard(|| {
        if mlp.is_null() {
            return fail(DpnStatus::NullPointer, "mlp is null");
        }
        // SAFETY: non-null live handle, not aliased during the call.
        let mlp = unsafe { &mut *mlp };
        mlp.inner.set_params(input(params, len, "params")?)?;
        Ok(())
    })
}

/// Evaluates the map on `m` states `x` (`d×m`) into `out` (`r×m`).
#[no_mangle]
pub unsafe extern "C" fn dpn_mlp_eval(mlp: *const DpnMlp, x: *const f64, m: usize, out: *mut f64) -> DpnStatus {
    guard(|| {
        let mlp = non_null(mlp, "mlp")?;
        let x = matrix(x, mlp.inner.input_dim(), m, "x")?;
        let psi = mlp.inner.eval(&x)?;
        output(out, psi.len(), "out")?.copy_from_slice(psi.as_slice());
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Scores

fn copy_grad(dst: Option<&mut [f64]>, src: &Matrix) {
    if let Some(d) = dst {
        d.copy_from_slice(src.as_slice());
    }
}

/// Evaluates a transfer score on feature batches `psi`, `psi_next` (both `r×m`).
///
/// `reg` is used by the ridge score only. The gradients with respect to `psi` and
/// `psi_next` are written when the corresponding pointer is non-null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dpn_score(
    kind: DpnScoreKind,
    gamma: f64,
    reg: f64,
    rtol: f64,
    psi: *const f64,
    psi_next: *const f64,
    r: usize,
    m: usize,
    value: *mut DpnScoreValue,
    grad_psi: *mut f64,
    grad_psi_next: *mut f64,
) -> DpnStatus {
    guard(|| {
        let a = matrix(psi, r, m, "psi")?;
        let b = matrix(psi_next, r, m, "psi_next")?;
        let cov = Covariances::estimate(&a, &b)?;
        let gp = optional_output(grad_psi, r * m);
        let gn = optional_output(grad_psi_next, r * m);
        let with_grad = gp.is_some() || gn.is_some();
        let (v, grad): (ScoreValue, Option<CovGrad>) = match kind {
            DpnScoreKind::P => score_p(&cov, gamma, rtol, with_grad)?,
            DpnScoreKind::S => score_s(&cov, gamma, with_grad)?,
            DpnScoreKind::Ridge => score_ridge(&cov, reg, gamma, with_grad)?,
        };
        if let Some(grad) = grad {
            let (da, db) = cov.pullback(&grad, &a, &b);
            copy_grad(gp, &da);
            copy_grad(gn, &db);
        }
        write_out(value, v.into(), "value")
    })
}

/// Evaluates the generator score on `psi` and its Itô image `dpsi` (both `r×m`).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dpn_generator_score(
    gamma: f64,
    rtol: f64,
    psi: *const f64,
    dpsi: *const f64,
    r: usize,
    m: usize,
    value: *mut DpnScoreValue,
    grad_psi: *mut f64,
    grad_dpsi: *mut f64,
) -> DpnStatus {
    guard(|| {
        let a = matrix(psi, r, m, "psi")?;
        let d = matrix(dpsi, r, m, "dpsi")?;
        let cov = GeneratorCovariances::estimate(&a, &d)?;
        let gp = optional_output(grad_psi, r * m);
        let gd = optional_output(grad_dpsi, r * m);
        let (v, grad) = score_generator(&cov, gamma, rtol, gp.is_some() || gd.is_some())?;
        if let Some(grad) = grad {
            let (da, dd) = cov.pullback(&grad, &a, &d);
            copy_grad(gp, &da);
            copy_grad(gd, &dd);
        }
        write_out(value, v.into(), "value")
    })
}

// ---------------------------------------------------------------------------
// Experiments and models

/// Samples data, trains and fits one seed of an experiment config (JSON text).
/// The fitted model has the training states registered as observable `"state"`.
#[no_mangle]
pub unsafe extern "C" fn dpn_experiment_run(config_json: *const c_char, seed: u64, out: *mut *mut DpnModel) -> DpnStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(c_str(config_json, "config_json")?)?;
        if out.is_null() {
            return fail(DpnStatus::NullPointer, "out is null");
        }
        let outcome = run_experiment(&cfg, seed, None)?;
        write_out(out, Box::into_raw(Box::new(DpnModel { inner: outcome.model })), "out")
    })
}

/// Loads a model file written by the `dpnets` command line tool.
#[no_mangle]
pub unsafe extern "C" fn dpn_model_load(path: *const c_char, out: *mut *mut DpnModel) -> DpnStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        if out.is_null() {
            return fail(DpnStatus::NullPointer, "out is null");
        }
        let model = Model::load(&path)?;
        write_out(out, Box::into_raw(Box::new(DpnModel { inner: model })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn dpn_model_save(model: *const DpnModel, path: *const c_char) -> DpnStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        model.inner.save(&PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dpn_model_free(model: *mut DpnModel) {
    if !model.is_null() {
        // SAFETY: the handle came from this library and is released once.
        drop(unsafe { Box::from_raw(model) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn dpn_model_kind(model: *const DpnModel, out: *mut DpnModelKind) -> DpnStatus {
    guard(|| {
        let kind = match non_null(model, "model")?.inner {
            Model::Transfer(_) => DpnModelKind::Transfer,
            Model::Generator(_) => DpnModelKind::Generator,
        };
        write_out(out, kind, "out")
    })
}

/// Number of features of the model, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dpn_model_rank(model: *const DpnModel) -> usize {
    // SAFETY: null or a live handle.
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.features().output_dim())
}

/// Writes the operator eigenvalues (sorted as in the model file) into `re` and
/// `im`, each of capacity `cap`, and their count into `count`. Fails with
/// `BufferTooSmall` (after setting `count`) when `cap` is insufficient.
#[no_mangle]
pub unsafe extern "C" fn dpn_model_eigenvalues(
    model: *const DpnModel,
    re: *mut f64,
    im: *mut f64,
    cap: usize,
    count: *mut usize,
) -> DpnStatus {
    guard(|| {
        let spectral = non_null(model, "model")?.inner.spectral()?;
        let ev = &spectral.eigenvalues;
        write_out(count, ev.len(), "count")?;
        if cap < ev.len() {
            return fail(DpnStatus::BufferTooSmall, format!("need {} slots, got {cap}", ev.len()));
        }
        let (re, im) = (output(re, ev.len(), "re")?, output(im, ev.len(), "im")?);
        for (i, l) in ev.iter().enumerate() {
            re[i] = l.re;
            im[i] = l.im;
        }
        Ok(())
    })
}

fn observable<'a>(model: &'a Model, name: &str) -> Result<&'a Matrix, Fail> {
    let list = match model {
        Model::Transfer(m) => &m.observables,
        Model::Generator(m) => &m.observables,
    };
    match list.iter().find(|o| o.name == name) {
        Some(o) => Ok(&o.values),
        None => fail(DpnStatus::InvalidArgument, format!("no observable named {name:?}")),
    }
}

/// Dimension `ℓ` of a registered observable.
#[no_mangle]
pub unsafe extern "C" fn dpn_model_observable_dim(model: *const DpnModel, name: *const c_char, out: *mut usize) -> DpnStatus {
    guard(|| {
        let values = observable(&non_null(model, "model")?.inner, c_str(name, "name")?)?;
        write_out(out, values.ncols(), "out")
    })
}

/// Forecasts observable `name` at `m` query states `x` (`d×m`) after time `t`,
/// writing `ℓ×m` values to `out`. Transfer models need a whole number of steps.
#[no_mangle]
pub unsafe extern "C" fn dpn_model_forecast(
    model: *const DpnModel,
    name: *const c_char,
    x: *const f64,
    m: usize,
    t: f64,
    out: *mut f64,
) -> DpnStatus {
    guard(|| {
        let model = &non_null(model, "model")?.inner;
        let values = observable(model, c_str(name, "name")?)?;
        let x = matrix(x, model.features().input_dim(), m, "x")?;
        let forecast = match model {
            Model::Transfer(tm) => {
                if !(t >= 0.0 && t.fract() == 0.0 && t <= u32::MAX as f64) {
                    return fail(DpnStatus::InvalidArgument, format!("transfer models forecast whole steps, got t = {t}"));
                }
                tm.forecast(values, t as usize, &x)?
            }
            Model::Generator(gm) => gm.forecast(values, t, &x)?,
        };
        output(out, forecast.len(), "out")?.copy_from_slice(forecast.as_slice());
        Ok(())
    })
}
