//! C ABI over crowd-count checkpoints.
//!
//! Every fallible function returns a [`CcStatus`]; on failure a description
//! is kept per thread and read with [`cc_last_error_message`]. Models are
//! opaque [`CcModel`] handles released with [`cc_model_free`]. Images are
//! 8-bit interleaved RGB, row-major, and are resized to the model input.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use crowd_count::autodiff::{flush_denormals, Real};
use crowd_count::checkpoint::Checkpoint;
use crowd_count::commands::{checkpoint_precision, inspect_image, Inspection};
use crowd_count::data::RgbImage;
use crowd_count::profiler::{count_params, energy_per_image, estimate_flops};
use crowd_count::train::Precision;
use crowd_count::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument value, configuration or tensor shape.
    InvalidArgument = 2,
    /// Unreadable file or malformed input data.
    Data = 3,
    /// Corrupt or incompatible checkpoint.
    Checkpoint = 4,
    /// Non-finite values.
    Numerical = 5,
    /// Output buffer too small; the required length is still reported.
    BufferTooSmall = 6,
    /// Internal panic caught at the boundary.
    Panic = 7,
}

enum Inner {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

/// Loaded checkpoint. Not thread-safe; use one handle per thread.
pub struct CcModel {
    inner: Inner,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CcStatus {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Invalid { .. } | Error::Graph(_) => CcStatus::InvalidArgument,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Image { .. } => CcStatus::Data,
        Error::Checkpoint(_) => CcStatus::Checkpoint,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. } => CcStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CcStatus, String)>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CcStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CcStatus::Panic
        }
    }
}

fn lift<T>(r: crowd_count::Result<T>) -> Result<T, (CcStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CcStatus, String) {
    (CcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const CcModel) -> Result<&'a CcModel, (CcStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (CcStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn image_from(pixels: *const u8, height: usize, width: usize) -> Result<RgbImage, (CcStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if height == 0 || width == 0 {
        return Err((
            CcStatus::InvalidArgument,
            format!("image size {height}x{width} is empty"),
        ));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or((CcStatus::InvalidArgument, "image size overflows".to_string()))?;
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    RgbImage::from_raw(width as u32, height as u32, data).ok_or((
        CcStatus::InvalidArgument,
        "image buffer does not match its size".to_string(),
    ))
}

impl CcModel {
    fn inspect(&self, img: &RgbImage) -> crowd_count::Result<Inspection> {
        flush_denormals();
        match &self.inner {
            Inner::F32(c) => inspect_image(c, img),
            Inner::F64(c) => inspect_image(c, img),
        }
    }

    fn with<R>(&self, f32_fn: impl FnOnce(&Checkpoint<f32>) -> R, f64_fn: impl FnOnce(&Checkpoint<f64>) -> R) -> R {
        match &self.inner {
            Inner::F32(c) => f32_fn(c),
            Inner::F64(c) => f64_fn(c),
        }
    }
}

fn input_size<T: Real>(c: &Checkpoint<T>) -> [usize; 2] {
    c.model.backbone.input_size
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file in its stored precision.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(path: *const c_char, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (CcStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let path = Path::new(path);
        let inner = match lift(checkpoint_precision(path, None))? {
            Precision::F32 => Inner::F32(lift(Checkpoint::load(path))?),
            Precision::F64 => Inner::F64(lift(Checkpoint::load(path))?),
        };
        *out = Box::into_raw(Box::new(CcModel { inner }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`cc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network input size in pixels.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_model_input_size(model: *const CcModel, height: *mut usize, width: *mut usize) -> CcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let [h, w] = m.with(input_size, input_size);
        *out_ref(height, "height")? = h;
        *out_ref(width, "width")? = w;
        Ok(())
    })
}

/// Exact number of learnable scalars.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_model_param_count(model: *const CcModel, out: *mut u64) -> CcStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = m.with(|c| count_params(&c.params), |c| count_params(&c.params));
        Ok(())
    })
}

/// Analytic FLOPs (multiply-accumulate = 2) for one image of the given size.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_model_flops(model: *const CcModel, height: usize, width: usize, out: *mut u64) -> CcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cfg = m.with(|c| c.model.clone(), |c| c.model.clone());
        *out_ref(out, "out")? = lift(estimate_flops(&cfg, [height, width]))?;
        Ok(())
    })
}

/// Predicted count for one RGB image (`height·width·3` bytes).
///
/// # Safety
/// `pixels` must point to `height·width·3` readable bytes; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_model_predict(
    model: *const CcModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    count: *mut f64,
) -> CcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_ref(count, "count")?;
        let img = image_from(pixels, height, width)?;
        *out = lift(m.inspect(&img))?.predicted_count;
        Ok(())
    })
}

/// Pooling weights of the final token grid, row-major, summing to 1.
/// `grid_h`/`grid_w` are always written; `weights` needs `grid_h·grid_w`
/// slots, otherwise [`CcStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `pixels` as in [`cc_model_predict`]; `weights` must have `capacity` slots.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cc_model_density_weights(
    model: *const CcModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    weights: *mut f64,
    capacity: usize,
    grid_h: *mut usize,
    grid_w: *mut usize,
) -> CcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let gh = out_ref(grid_h, "grid_h")?;
        let gw = out_ref(grid_w, "grid_w")?;
        let img = image_from(pixels, height, width)?;
        let w = lift(m.inspect(&img))?.weights;
        (*gh, *gw) = w.source_shape;
        if capacity < w.weights.len() {
            return Err((
                CcStatus::BufferTooSmall,
                format!("need {} slots, got {capacity}", w.weights.len()),
            ));
        }
        if weights.is_null() {
            return Err(null("weights"));
        }
        std::slice::from_raw_parts_mut(weights, w.weights.len()).copy_from_slice(&w.weights);
        Ok(())
    })
}

/// Energy per image in joules: power (W) times latency (s).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_energy_per_image(power_watts: f64, latency_seconds: f64, out: *mut f64) -> CcStatus {
    guard(|| {
        *out_ref(out, "out")? = lift(energy_per_image(power_watts, latency_seconds))?;
        Ok(())
    })
}
