//! C ABI over `wnet_core`.
//!
//! Every fallible function returns a [`WnetStatus`]; on failure a message is
//! available from [`wnet_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they are reported as `WNET_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use image::RgbImage;
use wnet_core::data::checkpoint;
use wnet_core::metrics::{self, ConfusionCounts};
use wnet_core::tiling::{self, TilePlan};
use wnet_core::train::{self, Detector};
use wnet_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    NonFinite = 6,
    Panic = 7,
}

impl From<&Error> for WnetStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => WnetStatus::ShapeMismatch,
            Error::Io(_) | Error::MissingFile(_) | Error::Image(_) => WnetStatus::Io,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } | Error::CheckpointShape { .. } | Error::Json(_) => {
                WnetStatus::Checkpoint
            }
            Error::NonFinite(_) => WnetStatus::NonFinite,
            _ => WnetStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Run `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (WnetStatus, String)>) -> WnetStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WnetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WnetStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (WnetStatus, String) {
    (WnetStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (WnetStatus, String) {
    (WnetStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn wnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trained detector restored from a checkpoint.
pub struct WnetDetector {
    inner: Detector,
    patch: usize,
}

/// Load a checkpoint for inference on `patch x patch` windows.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wnet_detector_load(
    path: *const c_char,
    patch: usize,
    out: *mut *mut WnetDetector,
) -> WnetStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (WnetStatus::InvalidArgument, "path is not valid utf-8".to_string()))?;
        let ck = checkpoint::load_checkpoint(Path::new(path)).map_err(core_err)?;
        let inner = Detector::from_checkpoint(&ck, patch).map_err(core_err)?;
        *out = Box::into_raw(Box::new(WnetDetector { inner, patch }));
        Ok(())
    })
}

/// # Safety
/// `detector` must come from [`wnet_detector_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn wnet_detector_free(detector: *mut WnetDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Tiled inference on two interleaved 8-bit RGB images of `width x height`.
/// Writes `width * height` probabilities to `prob_out` and, when non-null,
/// a 0/255 change mask to `mask_out`.
///
/// # Safety
/// Image buffers must hold `3 * width * height` bytes; output buffers must
/// hold `width * height` elements.
#[no_mangle]
pub unsafe extern "C" fn wnet_detector_infer(
    detector: *const WnetDetector,
    t1_rgb: *const u8,
    t2_rgb: *const u8,
    width: u32,
    height: u32,
    stride: usize,
    threshold: f64,
    prob_out: *mut f32,
    mask_out: *mut u8,
) -> WnetStatus {
    guard(|| {
        let det = detector.as_ref().ok_or_else(|| null("detector"))?;
        if t1_rgb.is_null() || t2_rgb.is_null() {
            return Err(null("image buffer"));
        }
        if prob_out.is_null() {
            return Err(null("prob_out"));
        }
        let n = width as usize * height as usize;
        let load = |p: *const u8| {
            let bytes = std::slice::from_raw_parts(p, 3 * n).to_vec();
            RgbImage::from_raw(width, height, bytes).expect("buffer length matches")
        };
        let out = train::infer_images(&det.inner, &load(t1_rgb), &load(t2_rgb), det.patch, stride, threshold)
            .map_err(core_err)?;
        let prob = std::slice::from_raw_parts_mut(prob_out, n);
        for (dst, &p) in prob.iter_mut().zip(&out.prob) {
            *dst = p as f32;
        }
        if !mask_out.is_null() {
            let mask = std::slice::from_raw_parts_mut(mask_out, n);
            for (dst, &b) in mask.iter_mut().zip(&out.binary) {
                *dst = if b { 255 } else { 0 };
            }
        }
        Ok(())
    })
}

/// Window layout for tiled inference.
pub struct WnetTilePlan {
    inner: TilePlan,
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wnet_tile_plan_new(
    width: usize,
    height: usize,
    patch: usize,
    stride: usize,
    out: *mut *mut WnetTilePlan,
) -> WnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = tiling::plan_tiles(width, height, patch, stride).map_err(core_err)?;
        *out = Box::into_raw(Box::new(WnetTilePlan { inner }));
        Ok(())
    })
}

/// Number of windows, or 0 for a null plan.
///
/// # Safety
/// `plan` must come from [`wnet_tile_plan_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn wnet_tile_plan_len(plan: *const WnetTilePlan) -> usize {
    plan.as_ref().map_or(0, |p| p.inner.len())
}

/// Origin of window `index` in raster order.
///
/// # Safety
/// `plan` must come from [`wnet_tile_plan_new`]; `x` and `y` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wnet_tile_plan_origin(
    plan: *const WnetTilePlan,
    index: usize,
    x: *mut usize,
    y: *mut usize,
) -> WnetStatus {
    guard(|| {
        let plan = plan.as_ref().ok_or_else(|| null("plan"))?;
        if x.is_null() || y.is_null() {
            return Err(null("origin output"));
        }
        let windows = plan.inner.windows();
        let &(ox, oy) = windows.get(index).ok_or_else(|| {
            (
                WnetStatus::InvalidArgument,
                format!("window {index} out of range ({} windows)", windows.len()),
            )
        })?;
        *x = ox;
        *y = oy;
        Ok(())
    })
}

/// # Safety
/// `plan` must come from [`wnet_tile_plan_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn wnet_tile_plan_free(plan: *mut WnetTilePlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WnetConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Accuracy rates; undefined values (zero denominators) are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WnetRates {
    pub mar: f64,
    pub far: f64,
    pub oer: f64,
    pub pcc: f64,
    pub pre: f64,
    pub kappa: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Count agreement between two masks of `len` bytes; nonzero means changed.
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wnet_confusion(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    out: *mut WnetConfusion,
) -> WnetStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let to_bools = |p: *const u8| {
            std::slice::from_raw_parts(p, len)
                .iter()
                .map(|&v| v != 0)
                .collect::<Vec<_>>()
        };
        let c = metrics::confusion(&to_bools(pred), &to_bools(gt)).map_err(core_err)?;
        *out = WnetConfusion {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        };
        Ok(())
    })
}

/// # Safety
/// `counts` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wnet_rates(counts: *const WnetConfusion, out: *mut WnetRates) -> WnetStatus {
    guard(|| {
        let c = counts.as_ref().ok_or_else(|| null("counts"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = metrics::rates(&ConfusionCounts {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        });
        let f = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = WnetRates {
            mar: f(r.mar),
            far: f(r.far),
            oer: f(r.oer),
            pcc: f(r.pcc),
            pre: f(r.pre),
            kappa: f(r.kappa),
            precision: f(r.precision),
            recall: f(r.recall),
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_message_is_thread_local_and_cleared() {
        let mut plan = ptr::null_mut();
        let s = unsafe { wnet_tile_plan_new(10, 10, 0, 1, &mut plan) };
        assert_eq!(s, WnetStatus::InvalidArgument);
        assert!(!wnet_last_error_message().is_null());
        let s = unsafe { wnet_tile_plan_new(10, 10, 4, 4, &mut plan) };
        assert_eq!(s, WnetStatus::Ok);
        assert!(wnet_last_error_message().is_null());
        unsafe { wnet_tile_plan_free(plan) };
    }
}
