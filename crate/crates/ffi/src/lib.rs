//! C ABI over the parapath encoder.
//!
//! Models are opaque heap handles created by `parapath_model_load` or
//! `parapath_model_init` and released with `parapath_model_free`. Every
//! fallible call returns a [`ParapathStatus`]; the message of the most
//! recent failure on the calling thread is available from
//! `parapath_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use parapath::backbone::tokenize;
use parapath::eval::{inference_encode, op_count, precision_at_1, InferenceMode};
use parapath::parallel::ModelParams;
use parapath::tensor::DenseArray;
use parapath::trainer::{load_checkpoint, TrainConfig};
use parapath::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParapathStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Checkpoint = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParapathMode {
    SinglePrefix = 0,
    Aggregate = 1,
    NoPrefix = 2,
}

impl From<ParapathMode> for InferenceMode {
    fn from(m: ParapathMode) -> Self {
        match m {
            ParapathMode::SinglePrefix => InferenceMode::SINGLE,
            ParapathMode::Aggregate => InferenceMode::Aggregate,
            ParapathMode::NoPrefix => InferenceMode::NoPrefix,
        }
    }
}

/// Opaque model handle.
pub struct ParapathModel {
    model: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ParapathStatus {
    match e {
        Error::Io { .. } => ParapathStatus::Io,
        Error::Parse { .. } | Error::Schema { .. } => ParapathStatus::Parse,
        Error::Config(_) => ParapathStatus::Config,
        Error::Checkpoint(_) => ParapathStatus::Checkpoint,
        Error::AtStep { source, .. } => status_of(source),
        _ => ParapathStatus::InvalidArgument,
    }
}

fn fail(status: ParapathStatus, msg: impl Into<String>) -> ParapathStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), ParapathStatus>) -> ParapathStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ParapathStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(ParapathStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: parapath::Result<T>) -> Result<T, ParapathStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, ParapathStatus> {
    if p.is_null() {
        return Err(fail(ParapathStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(ParapathStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const ParapathModel) -> Result<&'a ParapathModel, ParapathStatus> {
    m.as_ref().ok_or_else(|| fail(ParapathStatus::NullPointer, "model handle is null"))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, ParapathStatus> {
    p.as_mut().ok_or_else(|| fail(ParapathStatus::NullPointer, format!("{what} is null")))
}

fn publish(model: ModelParams, out: &mut *mut ParapathModel) {
    *out = Box::into_raw(Box::new(ParapathModel { model }));
}

/// Loads the model stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn parapath_model_load(path: *const c_char, out: *mut *mut ParapathModel) -> ParapathStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let state = lift(load_checkpoint(Path::new(path)))?;
        publish(state.model, out);
        Ok(())
    })
}

/// Freshly initialized model from config text (`field = value` lines).
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn parapath_model_init(
    config_text: *const c_char,
    out: *mut *mut ParapathModel,
) -> ParapathStatus {
    guard(|| {
        let text = c_str(config_text, "config_text")?;
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let config = lift(TrainConfig::parse(text))?;
        let model = lift(ModelParams::init(&config.model(), config.seed))?;
        publish(model, out);
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn parapath_model_free(model: *mut ParapathModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn parapath_model_dim(model: *const ParapathModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.d_model)
}

/// Number of parallel paths, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn parapath_model_num_paths(model: *const ParapathModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.num_paths)
}

/// Encodes `text` into `out`, which holds `out_len` doubles (at least the model width).
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn parapath_encode(
    model: *const ParapathModel,
    text: *const c_char,
    mode: ParapathMode,
    out: *mut f64,
    out_len: usize,
) -> ParapathStatus {
    guard(|| {
        let m = model_ref(model)?;
        let text = c_str(text, "text")?;
        if out.is_null() {
            return Err(fail(ParapathStatus::NullPointer, "out is null"));
        }
        let d = m.model.config.d_model;
        if out_len < d {
            return Err(fail(ParapathStatus::BufferTooSmall, format!("need {d} values, got {out_len}")));
        }
        let tokens = lift(tokenize(text, &m.model.config.vocab()))?;
        let emb = lift(inference_encode(&tokens, &m.model, mode.into()))?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(emb.values());
        Ok(())
    })
}

/// Multiply-adds of one encode of `seq_len` tokens.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn parapath_op_count(
    model: *const ParapathModel,
    mode: ParapathMode,
    seq_len: usize,
    out: *mut u64,
) -> ParapathStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_ptr(out, "out")?;
        *out = op_count(&m.model.config, mode.into(), seq_len);
        Ok(())
    })
}

/// Precision@1 of row-major `queries` (`num_queries × dim`) against
/// `targets` (`num_targets × dim`) with gold target indices.
///
/// # Safety
/// Each pointer must be valid for the number of elements its sizes imply.
#[no_mangle]
pub unsafe extern "C" fn parapath_precision_at_1(
    queries: *const f64,
    num_queries: usize,
    targets: *const f64,
    num_targets: usize,
    dim: usize,
    gold: *const usize,
    out: *mut f64,
) -> ParapathStatus {
    guard(|| {
        if queries.is_null() || targets.is_null() || gold.is_null() {
            return Err(fail(ParapathStatus::NullPointer, "input pointer is null"));
        }
        let out = out_ptr(out, "out")?;
        if num_queries == 0 || num_targets == 0 || dim == 0 {
            return Err(fail(ParapathStatus::InvalidArgument, "sizes must be positive"));
        }
        let array = |p: *const f64, rows: usize| {
            let v = std::slice::from_raw_parts(p, rows * dim).to_vec();
            lift(DenseArray::new(vec![rows, dim], v).map_err(Error::from))
        };
        let (q, t) = (array(queries, num_queries)?, array(targets, num_targets)?);
        let gold = std::slice::from_raw_parts(gold, num_queries);
        *out = lift(precision_at_1(&q, &t, gold))?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length; 0 if none.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn parapath_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn parapath_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
