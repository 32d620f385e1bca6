//! C interface to the djtd two-pass decoder.
//!
//! Models are opaque handles created by [`djtd_model_load`] and released with
//! [`djtd_model_free`]. Every fallible call returns a [`DjtdStatus`]; the
//! message for the most recent failure on the calling thread is available
//! through [`djtd_last_error`].
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use djtd::autodiff::Tensor;
use djtd::eval::{count_errors, two_pass_decode, DecodeConfig};
use djtd::model::Model;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DjtdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct DjtdModel {
    model: Model,
    decode: DecodeConfig,
}

/// Edit counts of one hypothesis against its reference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DjtdErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn fail(status: DjtdStatus, msg: impl AsRef<str>) -> DjtdStatus {
    set_error(msg.as_ref());
    status
}

fn status_of(e: &djtd::Error) -> DjtdStatus {
    match e {
        djtd::Error::Io { .. } => DjtdStatus::Io,
        djtd::Error::InvalidArgument { .. } | djtd::Error::Shape { .. } | djtd::Error::Config(_) => {
            DjtdStatus::InvalidArgument
        }
        _ => DjtdStatus::Model,
    }
}

fn guard(f: impl FnOnce() -> DjtdStatus) -> DjtdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == DjtdStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(DjtdStatus::Panic, "internal panic"),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn djtd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (always
/// NUL-terminated when `cap > 0`) and returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn djtd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Loads a checkpoint directory written by `djtd train`.
#[no_mangle]
pub unsafe extern "C" fn djtd_model_load(dir: *const c_char, out: *mut *mut DjtdModel) -> DjtdStatus {
    guard(|| {
        if dir.is_null() || out.is_null() {
            return fail(DjtdStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let dir = match CStr::from_ptr(dir).to_str() {
            Ok(s) => s,
            Err(_) => return fail(DjtdStatus::InvalidArgument, "path is not UTF-8"),
        };
        match Model::load(Path::new(dir)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(DjtdModel {
                    model,
                    decode: DecodeConfig::default(),
                }));
                DjtdStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn djtd_model_free(model: *mut DjtdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn djtd_model_vocab_size(model: *const DjtdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.second_pass.vocab_size)
}

#[no_mangle]
pub unsafe extern "C" fn djtd_model_feature_dim(model: *const DjtdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.first_pass.feature_dim)
}

/// Sets the first- and second-pass beam widths used by later decodes.
#[no_mangle]
pub unsafe extern "C" fn djtd_model_set_beams(model: *mut DjtdModel, beam1: usize, beam2: usize) -> DjtdStatus {
    guard(|| {
        let Some(m) = model.as_mut() else {
            return fail(DjtdStatus::NullPointer, "null model");
        };
        let mut cfg = m.decode.clone();
        cfg.beam1 = beam1;
        cfg.beam2 = beam2;
        if let Err(e) = cfg.validate() {
            return fail(DjtdStatus::InvalidArgument, e.to_string());
        }
        m.decode = cfg;
        DjtdStatus::Ok
    })
}

/// Two-pass decode of `frames` row-major feature vectors of width `dim` at
/// interpolation weight `lambda`. Writes up to `cap` token ids to `tokens`
/// and the hypothesis length to `len`; if `cap` is too small `len` still
/// receives the required size.
#[no_mangle]
pub unsafe extern "C" fn djtd_model_decode(
    model: *const DjtdModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    lambda: f64,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
) -> DjtdStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(DjtdStatus::NullPointer, "null model");
        };
        if len.is_null() || (features.is_null() && frames * dim > 0) || (tokens.is_null() && cap > 0) {
            return fail(DjtdStatus::NullPointer, "null buffer");
        }
        *len = 0;
        let want = m.model.config.first_pass.feature_dim;
        if dim != want {
            return fail(DjtdStatus::InvalidArgument, format!("feature dim {dim}, model expects {want}"));
        }
        if frames == 0 {
            return fail(DjtdStatus::InvalidArgument, "no frames");
        }
        let data = std::slice::from_raw_parts(features, frames * dim).to_vec();
        let x = match Tensor::new(vec![frames, dim], data) {
            Ok(x) => x,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        let out = match two_pass_decode(&m.model, &x, &m.decode, lambda) {
            Ok(o) => o,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        let best = out.best();
        *len = best.len();
        if best.len() > cap {
            return fail(DjtdStatus::BufferTooSmall, format!("need {} tokens, have {cap}", best.len()));
        }
        for (i, &t) in best.iter().enumerate() {
            *tokens.add(i) = t as u32;
        }
        DjtdStatus::Ok
    })
}

/// Minimum-edit alignment counts of `hyp` against `reference`.
#[no_mangle]
pub unsafe extern "C" fn djtd_count_errors(
    reference: *const u32,
    ref_len: usize,
    hyp: *const u32,
    hyp_len: usize,
    out: *mut DjtdErrorCounts,
) -> DjtdStatus {
    guard(|| {
        if out.is_null() || (reference.is_null() && ref_len > 0) || (hyp.is_null() && hyp_len > 0) {
            return fail(DjtdStatus::NullPointer, "null argument");
        }
        let widen = |p: *const u32, n: usize| -> Vec<usize> {
            if n == 0 {
                Vec::new()
            } else {
                std::slice::from_raw_parts(p, n).iter().map(|&t| t as usize).collect()
            }
        };
        let c = count_errors(&widen(reference, ref_len), &widen(hyp, hyp_len));
        *out = DjtdErrorCounts {
            substitutions: c.substitutions,
            insertions: c.insertions,
            deletions: c.deletions,
            ref_len: c.ref_len,
        };
        DjtdStatus::Ok
    })
}
