//! C ABI over the exseq predictive models.
//!
//! Every fallible function returns an [`ExseqStatus`]; on failure the
//! message is available from [`exseq_last_error_message`] on the same
//! thread. Models are opaque `ExseqModel` handles owned by the caller and
//! released with [`exseq_model_free`]. Panics never cross the boundary.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the stated length; string
//! arguments must be NUL-terminated. A handle must not be used after it is
//! freed or from two threads at once.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use exseq::diagnostics::gap_closed_form_gaussian;
use exseq::inference::multistep_logloss;
use exseq::models::{ConjGaussianState, GpState, RbfPrior, SequenceModel};
use exseq::tinyformer::{checkpoint, MaskKind, TransformerModel};
use exseq::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExseqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Io = 5,
    Checkpoint = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> ExseqStatus {
    match err {
        Error::DimensionMismatch { .. } | Error::Shape(_) => ExseqStatus::DimensionMismatch,
        Error::NonFinite(_)
        | Error::DegenerateDensity
        | Error::NotPositiveDefinite { .. }
        | Error::NotSymmetric { .. }
        | Error::Diverged { .. } => ExseqStatus::Numerical,
        Error::Io(_) => ExseqStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => ExseqStatus::Checkpoint,
        _ => ExseqStatus::InvalidArgument,
    }
}

fn fail(status: ExseqStatus, msg: &str) -> ExseqStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), ExseqStatus>) -> ExseqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            ExseqStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(ExseqStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: exseq::Result<T>) -> Result<T, ExseqStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

fn null() -> ExseqStatus {
    fail(ExseqStatus::NullPointer, "null pointer argument")
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Result<&'a [f64], ExseqStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T) -> Result<&'a mut T, ExseqStatus> {
    ptr.as_mut().ok_or_else(null)
}

#[derive(Clone)]
enum Inner {
    Conjugate(ConjGaussianState),
    Gp(GpState),
    Transformer(TransformerModel),
}

macro_rules! dispatch {
    ($inner:expr, $m:ident => $body:expr) => {
        match $inner {
            Inner::Conjugate($m) => $body,
            Inner::Gp($m) => $body,
            Inner::Transformer($m) => $body,
        }
    };
}

/// Opaque sequence model holding its conditioning history.
pub struct ExseqModel {
    inner: Inner,
    prior: Inner,
}

impl ExseqModel {
    fn boxed(inner: Inner) -> *mut ExseqModel {
        Box::into_raw(Box::new(ExseqModel {
            prior: inner.clone(),
            inner,
        }))
    }
}

unsafe fn model<'a>(h: *mut ExseqModel) -> Result<&'a mut ExseqModel, ExseqStatus> {
    h.as_mut().ok_or_else(null)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn exseq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next exseq call on the same thread.
#[no_mangle]
pub extern "C" fn exseq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Closed-form one-step vs multi-step gap of the conjugate Gaussian model.
#[no_mangle]
pub unsafe extern "C" fn exseq_gap_closed_form(
    sigma: f64,
    tau: f64,
    t: usize,
    big_t: usize,
    result: *mut f64,
) -> ExseqStatus {
    guard(|| {
        let r = out(result)?;
        *r = lib(gap_closed_form_gaussian(sigma, tau, t, big_t))?;
        Ok(())
    })
}

/// Conjugate Gaussian model: mean ~ N(mu0, sigma0²), y | mean ~ N(mean, tau²).
#[no_mangle]
pub unsafe extern "C" fn exseq_model_conjugate_new(
    mu0: f64,
    sigma0: f64,
    tau: f64,
    handle: *mut *mut ExseqModel,
) -> ExseqStatus {
    guard(|| {
        let h = out(handle)?;
        *h = ExseqModel::boxed(Inner::Conjugate(lib(ConjGaussianState::new(
            mu0, sigma0, tau,
        ))?));
        Ok(())
    })
}

/// Gaussian process with an RBF kernel on `dim`-dimensional inputs.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_gp_new(
    signal_std: f64,
    lengthscale: f64,
    noise_std: f64,
    dim: usize,
    handle: *mut *mut ExseqModel,
) -> ExseqStatus {
    guard(|| {
        let h = out(handle)?;
        let prior = lib(RbfPrior::new(signal_std, lengthscale, noise_std, dim))?;
        *h = ExseqModel::boxed(Inner::Gp(GpState::new(prior)));
        Ok(())
    })
}

/// Transformer from a checkpoint file. `mask` is "causal" or "cperm".
#[no_mangle]
pub unsafe extern "C" fn exseq_model_transformer_load(
    path: *const c_char,
    mask: *const c_char,
    handle: *mut *mut ExseqModel,
) -> ExseqStatus {
    guard(|| {
        let h = out(handle)?;
        if path.is_null() || mask.is_null() {
            return Err(null());
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(ExseqStatus::InvalidArgument, "path is not UTF-8"))?;
        let kind = CStr::from_ptr(mask)
            .to_str()
            .ok()
            .and_then(MaskKind::parse)
            .ok_or_else(|| {
                fail(
                    ExseqStatus::InvalidArgument,
                    "mask must be \"causal\" or \"cperm\"",
                )
            })?;
        let w = lib(checkpoint::load(Path::new(path)))?;
        *h = ExseqModel::boxed(Inner::Transformer(TransformerModel::new(Arc::new(w), kind)));
        Ok(())
    })
}

/// Releases a model; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_free(handle: *mut ExseqModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Covariate length expected by `condition` and `predict`.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_input_dim(
    handle: *const ExseqModel,
    dim: *mut usize,
) -> ExseqStatus {
    guard(|| {
        let m = handle.as_ref().ok_or_else(null)?;
        *out(dim)? = dispatch!(&m.inner, s => s.input_dim());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn exseq_model_num_observations(
    handle: *const ExseqModel,
    n: *mut usize,
) -> ExseqStatus {
    guard(|| {
        let m = handle.as_ref().ok_or_else(null)?;
        *out(n)? = dispatch!(&m.inner, s => s.num_observations());
        Ok(())
    })
}

/// Appends one observation. The model is unchanged on failure.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_condition(
    handle: *mut ExseqModel,
    x: *const f64,
    x_len: usize,
    y: f64,
) -> ExseqStatus {
    guard(|| {
        let m = model(handle)?;
        let x = slice(x, x_len)?;
        m.inner = dispatch!(&m.inner, s => lib(s.condition(x, y)).map(Into::into))?;
        Ok(())
    })
}

/// Drops all observations.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_reset(handle: *mut ExseqModel) -> ExseqStatus {
    guard(|| {
        let m = model(handle)?;
        m.inner = m.prior.clone();
        Ok(())
    })
}

/// One-step predictive N(mean, std²) of the next outcome at `x`.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_predict(
    handle: *const ExseqModel,
    x: *const f64,
    x_len: usize,
    mean: *mut f64,
    std: *mut f64,
) -> ExseqStatus {
    guard(|| {
        let m = handle.as_ref().ok_or_else(null)?;
        let x = slice(x, x_len)?;
        let g = dispatch!(&m.inner, s => lib(s.predictive(x)))?;
        *out(mean)? = g.mean;
        *out(std)? = g.std;
        Ok(())
    })
}

/// Multi-step negative log-likelihood (summed, teacher forced) of `n`
/// targets. `xs` holds `n` rows of `input_dim` covariates.
#[no_mangle]
pub unsafe extern "C" fn exseq_model_multistep_nll(
    handle: *const ExseqModel,
    xs: *const f64,
    ys: *const f64,
    n: usize,
    result: *mut f64,
) -> ExseqStatus {
    guard(|| {
        let m = handle.as_ref().ok_or_else(null)?;
        let dim = dispatch!(&m.inner, s => s.input_dim());
        let xs = slice(xs, n * dim)?;
        let ys = slice(ys, n)?;
        let targets: Vec<(Vec<f64>, f64)> = (0..n)
            .map(|i| (xs[i * dim..(i + 1) * dim].to_vec(), ys[i]))
            .collect();
        *out(result)? = dispatch!(&m.inner, s => lib(multistep_logloss(s, &targets)))?;
        Ok(())
    })
}

impl From<ConjGaussianState> for Inner {
    fn from(s: ConjGaussianState) -> Self {
        Inner::Conjugate(s)
    }
}

impl From<GpState> for Inner {
    fn from(s: GpState) -> Self {
        Inner::Gp(s)
    }
}

impl From<TransformerModel> for Inner {
    fn from(s: TransformerModel) -> Self {
        Inner::Transformer(s)
    }
}
