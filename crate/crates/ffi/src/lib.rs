//! C ABI over `mdc-core`.
//!
//! Every fallible function returns an [`MdcStatus`] and writes its result
//! through an out-pointer, which is left untouched on failure. The message of
//! the most recent failure on the calling thread is available from
//! [`mdc_last_error`]. Handles are opaque and owned by the caller, who releases
//! them with the matching `_free` function. Panics never cross the boundary;
//! they surface as [`MdcStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mdc_core::error::{Error, Result};
use mdc_core::forward::ForwardKernel;
use mdc_core::losses::boundary_terms_per_token;
use mdc_core::predictor::{AnyPredictor, Predictor};
use mdc_core::rng::stream;
use mdc_core::sampler::{sample, SamplerConfig};
use mdc_core::schedule::{Schedule, T_MIN};
use mdc_core::trainer::Checkpoint;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Argument outside the domain of the function, such as `t` outside `[0, 1]`.
    Domain = 3,
    Numeric = 4,
    Io = 5,
    /// Bad magic, version, checksum or metadata.
    Checkpoint = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Masking schedule `α_t` with its endpoint shift.
pub struct MdcSchedule {
    inner: Schedule,
}

/// Trained model restored from a checkpoint; sampling uses the EMA parameters.
pub struct MdcModel {
    ckpt: Checkpoint,
    predictor: AnyPredictor,
    kernel: ForwardKernel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // interior NULs cannot appear in a C string
    let msg = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> MdcStatus {
    match e {
        Error::Domain(_) | Error::Inconsistent { .. } | Error::Singular(_) => MdcStatus::Domain,
        Error::Numeric(_) => MdcStatus::Numeric,
        Error::Io { .. } => MdcStatus::Io,
        Error::Checkpoint(_) => MdcStatus::Checkpoint,
        _ => MdcStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> std::result::Result<(), MdcStatus>) -> MdcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdcStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let what = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {what}"));
            MdcStatus::Panic
        }
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, MdcStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn non_null<T>(p: *const T, what: &str) -> std::result::Result<(), MdcStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(MdcStatus::NullPointer);
    }
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, MdcStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        MdcStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mdc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses a schedule spec such as `linear`, `cosine@0.0001` or `geometric:1e-5:20`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_schedule_parse(spec: *const c_char, out: *mut *mut MdcSchedule) -> MdcStatus {
    guard(|| {
        non_null(out, "out")?;
        let spec = str_arg(spec, "spec")?;
        let inner: Schedule = lift(spec.parse())?;
        *out = Box::into_raw(Box::new(MdcSchedule { inner }));
        Ok(())
    })
}

/// # Safety
/// `schedule` must be NULL or a handle from [`mdc_schedule_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdc_schedule_free(schedule: *mut MdcSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

unsafe fn schedule_eval(
    schedule: *const MdcSchedule,
    t: f64,
    out: *mut f64,
    f: impl FnOnce(&Schedule, f64) -> Result<f64>,
) -> MdcStatus {
    guard(|| {
        non_null(schedule, "schedule")?;
        non_null(out, "out")?;
        *out = lift(f(&(*schedule).inner, t))?;
        Ok(())
    })
}

/// `α_t` for `t` in `[0, 1]`.
///
/// # Safety
/// `schedule` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_schedule_alpha(schedule: *const MdcSchedule, t: f64, out: *mut f64) -> MdcStatus {
    schedule_eval(schedule, t, out, Schedule::alpha)
}

/// `dα/dt`.
///
/// # Safety
/// `schedule` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_schedule_alpha_prime(schedule: *const MdcSchedule, t: f64, out: *mut f64) -> MdcStatus {
    schedule_eval(schedule, t, out, Schedule::alpha_prime)
}

/// Cross-entropy weight `α′_t/(1 − α_t)`; fails at `t = 0` where it diverges.
///
/// # Safety
/// `schedule` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_schedule_ce_weight(schedule: *const MdcSchedule, t: f64, out: *mut f64) -> MdcStatus {
    schedule_eval(schedule, t, out, Schedule::ce_weight)
}

/// `log(α_t/(1 − α_t))`.
///
/// # Safety
/// `schedule` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_schedule_log_snr(schedule: *const MdcSchedule, t: f64, out: *mut f64) -> MdcStatus {
    schedule_eval(schedule, t, out, Schedule::log_snr)
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_model_load(path: *const c_char, out: *mut *mut MdcModel) -> MdcStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let ckpt = lift(Checkpoint::load(Path::new(path)))?;
        let predictor = lift(ckpt.predictor(true))?;
        let kernel = lift(ckpt.kernel())?;
        *out = Box::into_raw(Box::new(MdcModel {
            ckpt,
            predictor,
            kernel,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`mdc_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdc_model_free(model: *mut MdcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of clean token values `m`; the mask id is `m`.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_model_vocab_size(model: *const MdcModel, out: *mut usize) -> MdcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).ckpt.meta.m;
        Ok(())
    })
}

/// Sequence length fixed by the model, or 0 when any length is accepted.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mdc_model_seq_len(model: *const MdcModel, out: *mut usize) -> MdcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).predictor.seq_len().unwrap_or(0);
        Ok(())
    })
}

/// Per-token reconstruction and prior terms of the negative ELBO, in nats,
/// for models with a scalar schedule.
///
/// # Safety
/// `model` must be a live handle; `reconstruction` and `prior` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn mdc_model_boundary_terms(
    model: *const MdcModel,
    t_min: f64,
    reconstruction: *mut f64,
    prior: *mut f64,
) -> MdcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(reconstruction, "reconstruction")?;
        non_null(prior, "prior")?;
        let (r, p) = lift(boundary_terms_per_token(&(*model).kernel, t_min))?;
        *reconstruction = r;
        *prior = p;
        Ok(())
    })
}

/// Draws one clean sequence of `len` tokens into `out_ids` (capacity `cap`)
/// with `steps` ancestral steps. The same `seed` reproduces the same draw.
///
/// # Safety
/// `model` must be a live handle and `out_ids` must point to `cap` writable `u32`s.
#[no_mangle]
pub unsafe extern "C" fn mdc_model_sample(
    model: *const MdcModel,
    len: usize,
    steps: usize,
    temperature: f64,
    seed: u64,
    out_ids: *mut u32,
    cap: usize,
) -> MdcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_ids, "out_ids")?;
        if cap < len {
            set_error(format!("buffer holds {cap} ids, {len} needed"));
            return Err(MdcStatus::BufferTooSmall);
        }
        let model = &*model;
        if let Some(l) = model.predictor.seq_len() {
            if l != len {
                set_error(format!("model generates sequences of length {l}, not {len}"));
                return Err(MdcStatus::InvalidArgument);
            }
        }
        let cfg = SamplerConfig {
            steps,
            temperature,
            t_min: model.ckpt.meta.t_min.max(T_MIN),
        };
        let mut rng = stream(seed, "sample", 0);
        let x = lift(sample(&model.predictor, &model.kernel, len, &cfg, &mut rng))?;
        let out = std::slice::from_raw_parts_mut(out_ids, len);
        for (o, &id) in out.iter_mut().zip(x.ids()) {
            *o = id as u32;
        }
        Ok(())
    })
}
