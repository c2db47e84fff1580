//! C interface to the orthoprune core.
//!
//! Models are opaque `OpModel` handles created by `op_model_new`,
//! `op_model_load`, `op_model_clone` or `op_model_prune` and released with
//! `op_model_free`. Every fallible call returns an `OpStatus`; on failure
//! `op_last_error` describes the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use orthoprune::data::Dataset;
use orthoprune::importance::{self, Metric};
use orthoprune::model::{
    build_model, flops_count, load_model, param_count, save_model, Family, ModelGraph, ModelSpec,
};
use orthoprune::pruning::{apply_plan, compression_report, schedule_ratios, select_victims};
use orthoprune::{Error, Tensor};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Model = 4,
    Plan = 5,
    Config = 6,
    Io = 7,
    Format = 8,
    Numeric = 9,
    Internal = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpFamily {
    Plain = 0,
    Residual = 1,
    Depthsep = 2,
}

/// Opaque network handle.
pub struct OpModel {
    inner: ModelGraph,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OpCompression {
    pub params_original: u64,
    pub params_pruned: u64,
    pub flops_original: u64,
    pub flops_pruned: u64,
    pub cr: f64,
    pub flops_reduction: f64,
    pub eff: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(OpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape { .. } | Error::EmptyBatch => OpStatus::Shape,
            Error::Model(_) => OpStatus::Model,
            Error::Plan(_) => OpStatus::Plan,
            Error::InvalidArgument(_) => OpStatus::InvalidArgument,
            Error::Config(_) => OpStatus::Config,
            Error::Io(_) => OpStatus::Io,
            Error::Format(_) => OpStatus::Format,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::Linalg(_) => {
                OpStatus::Numeric
            }
            Error::Tape(_) => OpStatus::Internal,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(OpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(OpStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OpStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            OpStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const OpModel) -> Result<&'a ModelGraph, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn put_model(out: *mut *mut OpModel, model: ModelGraph) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(OpModel { inner: model }));
    Ok(())
}

unsafe fn images_arg(
    model: &ModelGraph,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Tensor, Failure> {
    if images.is_null() {
        return Err(null("images"));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(invalid("image batch has a zero extent"));
    }
    let c = model.spec.in_channels;
    let data = slice::from_raw_parts(images, n * c * h * w).to_vec();
    Ok(Tensor::new(vec![n, c, h, w], data)?)
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn op_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated crate version. Static storage.
#[no_mangle]
pub extern "C" fn op_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a freshly initialized network.
///
/// # Safety
/// `widths` must point to `n_widths` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn op_model_new(
    family: OpFamily,
    widths: *const usize,
    n_widths: usize,
    in_channels: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut OpModel,
) -> OpStatus {
    guard(|| {
        if widths.is_null() {
            return Err(null("widths"));
        }
        let family = match family {
            OpFamily::Plain => Family::Plain,
            OpFamily::Residual => Family::Residual,
            OpFamily::Depthsep => Family::DepthSep,
        };
        let mut spec = ModelSpec::new(
            family,
            slice::from_raw_parts(widths, n_widths),
            classes,
            seed,
        );
        spec.in_channels = in_channels;
        put_model(out, build_model(&spec)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn op_model_load(path: *const c_char, out: *mut *mut OpModel) -> OpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put_model(out, load_model(Path::new(path))?)
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn op_model_save(model: *const OpModel, path: *const c_char) -> OpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = str_arg(path, "path")?;
        Ok(save_model(Path::new(path), m)?)
    })
}

/// # Safety
/// `model` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn op_model_clone(model: *const OpModel, out: *mut *mut OpModel) -> OpStatus {
    guard(|| {
        let m = model_ref(model)?.clone();
        put_model(out, m)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn op_model_free(model: *mut OpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn op_model_classes(model: *const OpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.classes)
}

/// Input channels expected by `op_model_predict`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn op_model_in_channels(model: *const OpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.in_channels)
}

/// Weights plus batchnorm affine parameters.
///
/// # Safety
/// `model` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn op_model_param_count(model: *const OpModel, out: *mut u64) -> OpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = param_count(m).total;
        Ok(())
    })
}

/// Convolution multiply-accumulates for one `h` x `w` input.
///
/// # Safety
/// `model` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn op_model_flops(
    model: *const OpModel,
    h: usize,
    w: usize,
    out: *mut u64,
) -> OpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = flops_count(m, [m.spec.in_channels, h, w])?.total;
        Ok(())
    })
}

/// Eval-mode logits for `n` images stored as `[n, in_channels, h, w]`
/// row-major. `logits` receives `n * classes` values.
///
/// # Safety
/// `images` must hold `n * in_channels * h * w` values and `logits` must
/// have room for `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn op_model_predict(
    model: *const OpModel,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    logits: *mut f64,
    logits_len: usize,
) -> OpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let need = n * m.spec.classes;
        if logits_len < need {
            return Err(invalid(format!(
                "logits buffer holds {logits_len} values, {need} needed"
            )));
        }
        let x = images_arg(m, images, n, h, w)?;
        let y = m.predict(&x, None)?;
        slice::from_raw_parts_mut(logits, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Scores every prunable filter with `metric` ("taylor", "tfo", "fisher",
/// "l1", "bn_scale"), removes `fraction` of them and writes the smaller
/// network to `out`. Data-free metrics accept a null `images`/`labels`
/// with `n == 0`.
///
/// # Safety
/// `model` must be a live handle, `metric` a NUL-terminated string,
/// `images` must hold `n * in_channels * h * w` values, `labels` `n`
/// values, and `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn op_model_prune(
    model: *const OpModel,
    metric: *const c_char,
    fraction: f64,
    images: *const f64,
    labels: *const u32,
    n: usize,
    h: usize,
    w: usize,
    out: *mut *mut OpModel,
) -> OpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let metric: Metric = str_arg(metric, "metric")?.parse()?;
        let data = if metric.needs_data() {
            if labels.is_null() {
                return Err(null("labels"));
            }
            let x = images_arg(m, images, n, h, w)?;
            let labels: Vec<usize> = slice::from_raw_parts(labels, n)
                .iter()
                .map(|&l| l as usize)
                .collect();
            if labels.iter().any(|&l| l >= m.spec.classes) {
                return Err(invalid("label out of range"));
            }
            let c = m.spec.in_channels;
            Dataset {
                images: x,
                labels,
                classes: m.spec.classes,
                mean: vec![0.0; c],
                std: vec![1.0; c],
            }
        } else {
            let c = m.spec.in_channels;
            Dataset {
                images: Tensor::zeros(&[1, c, 1, 1]),
                labels: vec![0],
                classes: m.spec.classes,
                mean: vec![0.0; c],
                std: vec![1.0; c],
            }
        };
        let table = importance::compute(metric, m, &data, n.clamp(1, 128), 1.0)?;
        let plan = select_victims(&table, fraction, m)?;
        put_model(out, apply_plan(m, &plan)?)
    })
}

/// Parameter and FLOP reduction of `pruned` relative to `original` for
/// one `h` x `w` input.
///
/// # Safety
/// Both handles must be live and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn op_compression_report(
    original: *const OpModel,
    pruned: *const OpModel,
    h: usize,
    w: usize,
    out: *mut OpCompression,
) -> OpStatus {
    guard(|| {
        let o = model_ref(original)?;
        let p = model_ref(pruned)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = compression_report(o, p, [o.spec.in_channels, h, w])?;
        *out = OpCompression {
            params_original: r.params_original,
            params_pruned: r.params_pruned,
            flops_original: r.flops_original,
            flops_pruned: r.flops_pruned,
            cr: r.cr,
            flops_reduction: r.flops_reduction,
            eff: r.eff,
        };
        Ok(())
    })
}

/// Efficiency scalar for a compression rate and a FLOP reduction given as
/// a fraction.
#[no_mangle]
pub extern "C" fn op_efficiency(cr: f64, flops_reduction: f64) -> f64 {
    orthoprune::pruning::eff(cr, flops_reduction)
}

/// Per-round fractions that remove `total` of the filters over `rounds`
/// rounds. `out` receives `rounds` values.
///
/// # Safety
/// `out` must have room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn op_schedule(
    total: f64,
    rounds: usize,
    out: *mut f64,
    out_len: usize,
) -> OpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < rounds {
            return Err(invalid(format!(
                "out holds {out_len} values, {rounds} needed"
            )));
        }
        let s = schedule_ratios(total, rounds)?;
        slice::from_raw_parts_mut(out, rounds).copy_from_slice(&s.fractions);
        Ok(())
    })
}
