//! C ABI over the fusionnet crate.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`FusionnetStatus`]; on failure [`fusionnet_last_error`] gives a message
//! for the calling thread. Panics are caught and reported as
//! `FUSIONNET_ERR_PANIC`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fusionnet::error::Error;
use fusionnet::fusion::{FusionModel, FusionModelConfig, ModelKind, Prediction, Scale};
use fusionnet::metrics::{compute_metrics, invert_metrics, ConfusionMatrix, MetricsReport};
use fusionnet::rng::RngState;
use fusionnet::tensor::Tensor;
use fusionnet::train::{load_checkpoint, save_checkpoint};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionnetStatus {
    FUSIONNET_OK = 0,
    FUSIONNET_ERR_NULL = 1,
    FUSIONNET_ERR_INVALID_ARGUMENT = 2,
    FUSIONNET_ERR_DIMENSION = 3,
    FUSIONNET_ERR_CONFIG = 4,
    FUSIONNET_ERR_VALIDATION = 5,
    FUSIONNET_ERR_PATH = 6,
    FUSIONNET_ERR_CHECKPOINT = 7,
    FUSIONNET_ERR_NON_FINITE = 8,
    FUSIONNET_ERR_INVERSION = 9,
    FUSIONNET_ERR_IO = 10,
    FUSIONNET_ERR_PANIC = 11,
}
use FusionnetStatus::*;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionnetModelKind {
    FUSIONNET_RESNET = 0,
    FUSIONNET_MAXVIT = 1,
    FUSIONNET_FUSION = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionnetMetric {
    FUSIONNET_ACCURACY = 0,
    FUSIONNET_KAPPA = 1,
    FUSIONNET_SENSITIVITY = 2,
    FUSIONNET_SPECIFICITY = 3,
    FUSIONNET_PPV = 4,
}

/// Binary confusion matrix; pneumonia is the positive class.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FusionnetConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Opaque model handle.
pub struct FusionnetModel(FusionModel<f32>);

/// Opaque result of one prediction call.
pub struct FusionnetPrediction(Prediction<f32>);

/// Opaque metric report.
pub struct FusionnetMetrics(MetricsReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> FusionnetStatus {
    match err {
        Error::Dimension(_) => FUSIONNET_ERR_DIMENSION,
        Error::Config(_) => FUSIONNET_ERR_CONFIG,
        Error::Validation(_) => FUSIONNET_ERR_VALIDATION,
        Error::Contract(_) | Error::Usage(_) => FUSIONNET_ERR_INVALID_ARGUMENT,
        Error::Path { .. } => FUSIONNET_ERR_PATH,
        Error::Checkpoint(_) => FUSIONNET_ERR_CHECKPOINT,
        Error::NonFinite(_) => FUSIONNET_ERR_NON_FINITE,
        Error::Inversion(_) => FUSIONNET_ERR_INVERSION,
        _ => FUSIONNET_ERR_IO,
    }
}

struct Fail(FusionnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FusionnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FUSIONNET_OK
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FUSIONNET_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FUSIONNET_ERR_NULL, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FUSIONNET_ERR_INVALID_ARGUMENT, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn fusionnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fusionnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised desk-scale model for square inputs of side
/// `resolution`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_new(
    kind: FusionnetModelKind,
    resolution: usize,
    seed: u64,
    out: *mut *mut FusionnetModel,
) -> FusionnetStatus {
    guard(|| {
        let kind = match kind {
            FusionnetModelKind::FUSIONNET_RESNET => ModelKind::Resnet,
            FusionnetModelKind::FUSIONNET_MAXVIT => ModelKind::Maxvit,
            FusionnetModelKind::FUSIONNET_FUSION => ModelKind::Fusion,
        };
        let cfg = FusionModelConfig::preset(kind, Scale::Desk, resolution);
        let model = FusionModel::build(&cfg, &mut RngState::new(seed))?;
        emit(out, FusionnetModel(model))
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_load(path: *const c_char, out: *mut *mut FusionnetModel) -> FusionnetStatus {
    guard(|| {
        let ck = load_checkpoint(path_arg(path)?)?;
        emit(out, FusionnetModel(ck.to_model()?))
    })
}

/// Writes the model's parameters to a checkpoint file (epoch 0, no history).
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_save(model: *const FusionnetModel, path: *const c_char) -> FusionnetStatus {
    guard(|| {
        let model = deref(model, "model")?;
        save_checkpoint(path_arg(path)?, &model.0, 0, RngState::new(0), &[])?;
        Ok(())
    })
}

/// Input side length the model expects (0 for a null handle).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_resolution(model: *const FusionnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.resolution())
}

/// Total number of stored values (parameters and running statistics).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_num_values(model: *const FusionnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.store.iter().map(|(_, p)| p.tensor.numel()).sum())
}

/// Eval-mode prediction on `batch` normalized images laid out as
/// `[batch, 3, resolution, resolution]`.
///
/// # Safety
/// `pixels` must point to `batch * 3 * resolution²` floats; `model` must be a
/// live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_predict(
    model: *const FusionnetModel,
    pixels: *const f32,
    batch: usize,
    out: *mut *mut FusionnetPrediction,
) -> FusionnetStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if batch == 0 {
            return Err(Fail(FUSIONNET_ERR_INVALID_ARGUMENT, "batch must be positive".into()));
        }
        let res = model.0.resolution();
        let shape = [batch, 3, res, res];
        let data = std::slice::from_raw_parts(pixels, shape.iter().product()).to_vec();
        let x = Tensor::new(&shape, data)?;
        emit(out, FusionnetPrediction(model.0.predict(&x)?))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_model_free(model: *mut FusionnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of images in the prediction (0 for a null handle).
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_prediction_len(pred: *const FusionnetPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.0.predicted.len())
}

/// Predicted class (0 normal, 1 pneumonia) and the two class probabilities
/// of image `index`. `probs` may be null.
///
/// # Safety
/// `pred` must be a live handle, `class_out` writable, and `probs` null or
/// writable for two floats.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_prediction_get(
    pred: *const FusionnetPrediction,
    index: usize,
    class_out: *mut u32,
    probs: *mut f32,
) -> FusionnetStatus {
    guard(|| {
        let p = &deref(pred, "prediction")?.0;
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        let class = p.predicted.get(index).ok_or_else(|| {
            Fail(FUSIONNET_ERR_INVALID_ARGUMENT, format!("index {index} out of range for {} images", p.predicted.len()))
        })?;
        *class_out = class.index() as u32;
        if !probs.is_null() {
            let k = p.probabilities.shape()[1];
            let row = &p.probabilities.data()[index * k..(index + 1) * k];
            ptr::copy_nonoverlapping(row.as_ptr(), probs, k.min(2));
        }
        Ok(())
    })
}

/// # Safety
/// `pred` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_prediction_free(pred: *mut FusionnetPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Computes all five metrics from a confusion matrix.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_metrics_compute(cm: FusionnetConfusion, out: *mut *mut FusionnetMetrics) -> FusionnetStatus {
    guard(|| {
        let cm = ConfusionMatrix::new(cm.tp, cm.fp, cm.tn, cm.fn_);
        emit(out, FusionnetMetrics(compute_metrics(&cm)?))
    })
}

/// Reads one metric. `*defined` is set to false (and `*value` to NaN) when
/// the metric's denominator is zero.
///
/// # Safety
/// `metrics` must be a live handle; `value` and `defined` writable.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_metrics_get(
    metrics: *const FusionnetMetrics,
    which: FusionnetMetric,
    value: *mut f64,
    defined: *mut bool,
) -> FusionnetStatus {
    guard(|| {
        let m = &deref(metrics, "metrics")?.0;
        if value.is_null() || defined.is_null() {
            return Err(null("output pointer"));
        }
        let v = m.values()[which as usize];
        *value = v.unwrap_or(f64::NAN);
        *defined = v.is_some();
        Ok(())
    })
}

/// True when kappa's chance agreement is 1 and kappa was reported as 0.
///
/// # Safety
/// `metrics` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_metrics_kappa_degenerate(metrics: *const FusionnetMetrics) -> bool {
    metrics.as_ref().is_some_and(|m| m.0.kappa_degenerate)
}

/// # Safety
/// `metrics` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_metrics_free(metrics: *mut FusionnetMetrics) {
    if !metrics.is_null() {
        drop(Box::from_raw(metrics));
    }
}

/// Reconstructs the confusion matrix implied by a sensitivity/specificity
/// pair on `positives` positive and `negatives` negative samples.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fusionnet_invert_metrics(
    sensitivity: f64,
    specificity: f64,
    positives: u64,
    negatives: u64,
    out: *mut FusionnetConfusion,
) -> FusionnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let cm = invert_metrics(sensitivity, specificity, positives, negatives)?;
        *out = FusionnetConfusion { tp: cm.tp, fp: cm.fp, tn: cm.tn, fn_: cm.fn_ };
        Ok(())
    })
}
