//! C interface to the bevfuse detector and its metrics.
//!
//! Handles are opaque heap objects released with the matching `_free`
//! function. Every fallible call returns a [`BfStatus`]; on failure the
//! message is kept per thread and can be copied out with
//! [`bevfuse_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bevfuse::encoders::Modality;
use bevfuse::eval::{map_from_aps, mrapd, Detection, EvalConfig};
use bevfuse::experiment::prepare;
use bevfuse::fusion::Model;
use bevfuse::sim::{read_dataset, ClassId};
use bevfuse::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfStatus {
    BfOk = 0,
    BfNullPointer = 1,
    BfInvalidUtf8 = 2,
    BfInvalidArgument = 3,
    BfIo = 4,
    BfMalformed = 5,
    BfVersionMismatch = 6,
    BfMissingWeights = 7,
    BfWeightsMismatch = 8,
    BfNonFinite = 9,
    BfOutOfRange = 10,
    BfInternal = 11,
}

/// One detection in ego coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BfDetection {
    pub center: [f64; 3],
    /// length, width, height in meters
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
    pub frame_id: u64,
    /// 0 = car, 1 = pedestrian
    pub class_id: u32,
}

/// A trained model loaded from a weights directory.
pub struct BfModel {
    model: Model,
}

/// Detections produced by [`bevfuse_detect`].
pub struct BfDetections {
    items: Vec<BfDetection>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::Io { .. } => BfStatus::BfIo,
        Error::Malformed { .. } | Error::Truncated { .. } => BfStatus::BfMalformed,
        Error::VersionMismatch { .. } => BfStatus::BfVersionMismatch,
        Error::MissingWeights(_) => BfStatus::BfMissingWeights,
        Error::WeightsMismatch(_) | Error::StateMismatch(_) => BfStatus::BfWeightsMismatch,
        Error::NonFinite(_) => BfStatus::BfNonFinite,
        _ => BfStatus::BfInvalidArgument,
    }
}

struct Fail(BfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BfStatus::BfOk
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            BfStatus::BfInternal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(BfStatus::BfNullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BfStatus::BfInvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(BfStatus::BfNullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn null(what: &str) -> Fail {
    Fail(BfStatus::BfNullPointer, format!("{what} is null"))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes (without the NUL), so a call with `len == 0`
/// sizes the buffer.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads the weights directory written by `bevfuse train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_model_load(dir: *const c_char, out: *mut *mut BfModel) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let model = Model::load(&dir)?;
        *out = Box::into_raw(Box::new(BfModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`bevfuse_model_load`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn default_modalities(model: &Model) -> Result<Vec<Modality>, Fail> {
    if let Some(f) = &model.fusion {
        return Ok(f.modalities.clone());
    }
    match model.pretrained.as_slice() {
        [m] => Ok(vec![*m]),
        [] => Err(Fail(BfStatus::BfMissingWeights, "the model has no trained detector".into())),
        _ => Err(Fail(BfStatus::BfInvalidArgument, "several branches are trained; pass modalities".into())),
    }
}

/// Runs the detector over every frame of a dataset split directory.
/// `modalities` is a set such as `"LC"`; null picks the model's own set.
///
/// # Safety
/// `model` must be a live handle, strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_detect(
    model: *const BfModel,
    split_dir: *const c_char,
    modalities: *const c_char,
    out: *mut *mut BfDetections,
) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let dir = PathBuf::from(str_arg(split_dir, "split_dir")?);
        let active = if modalities.is_null() {
            default_modalities(model)?
        } else {
            Modality::parse_set(str_arg(modalities, "modalities")?)?
        };
        let frames = read_dataset(&dir)?;
        let inputs = prepare(&frames, &model.cfg);
        let dets = model.detect_all(&inputs, &active, &EvalConfig::default())?;
        *out = Box::into_raw(Box::new(BfDetections {
            items: dets.iter().map(to_c).collect(),
        }));
        Ok(())
    })
}

fn to_c(d: &Detection) -> BfDetection {
    BfDetection {
        center: d.bbox.center,
        size: d.bbox.size,
        yaw: d.bbox.yaw,
        score: d.score,
        frame_id: d.frame_id,
        class_id: match d.bbox.class_id {
            ClassId::Car => 0,
            ClassId::Pedestrian => 1,
        },
    }
}

/// Number of detections; 0 for null.
///
/// # Safety
/// `dets` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_detections_len(dets: *const BfDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// Copies detection `index` into `out`.
///
/// # Safety
/// `dets` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_detections_get(dets: *const BfDetections, index: usize, out: *mut BfDetection) -> BfStatus {
    guard(|| {
        let d = dets.as_ref().ok_or_else(|| null("dets"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *d
            .items
            .get(index)
            .ok_or_else(|| Fail(BfStatus::BfOutOfRange, format!("index {index} >= {}", d.items.len())))?;
        Ok(())
    })
}

/// # Safety
/// `dets` must come from [`bevfuse_detect`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_detections_free(dets: *mut BfDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Mean relative AP difference in percent between bad- and nice-weather APs
/// over `n` range bins. Bins whose nice AP is zero or NaN are skipped.
///
/// # Safety
/// `ap_bad` and `ap_nice` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_mrapd(ap_bad: *const f64, ap_nice: *const f64, n: usize, out: *mut f64) -> BfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = mrapd(slice_arg(ap_bad, n, "ap_bad")?, slice_arg(ap_nice, n, "ap_nice")?)?;
        *out = r.value;
        Ok(())
    })
}

/// Mean of `n` per-threshold APs.
///
/// # Safety
/// `aps` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bevfuse_map_from_aps(aps: *const f64, n: usize, out: *mut f64) -> BfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = map_from_aps(slice_arg(aps, n, "aps")?)?;
        Ok(())
    })
}
