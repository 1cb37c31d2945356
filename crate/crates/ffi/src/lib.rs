//! C ABI over the rmgpmsi toolkit.
//!
//! Every function returns an [`RmgStatus`]. On failure the message is
//! available from [`rmgpmsi_last_error`] on the same thread until the next
//! call. Models are opaque handles released with [`rmgpmsi_model_free`];
//! strings returned through out-parameters are released with
//! [`rmgpmsi_string_free`]. Images are row-major `height × width × channels`
//! float arrays with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rmgpmsi::checkpoint::load_checkpoint;
use rmgpmsi::evalkit::{predict_concat, predict_mix};
use rmgpmsi::image::{ImageTensor, ValueRange};
use rmgpmsi::model::Model;
use rmgpmsi::rmg::{self, RmgConfig};
use rmgpmsi::{Error, ErrorClass};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmgStatus {
    Ok = 0,
    /// Null pointer, bad length or malformed string argument.
    InvalidArgument = 1,
    /// Invalid configuration or incompatible artifact.
    Config = 2,
    /// Unreadable or malformed data, including corrupt checkpoints.
    Data = 3,
    /// Training diverged.
    Divergence = 4,
    /// Any other failure.
    Other = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// Opaque trained model.
pub struct RmgModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> RmgStatus {
    match e.class() {
        ErrorClass::Config => RmgStatus::Config,
        ErrorClass::Data => RmgStatus::Data,
        ErrorClass::Divergence => RmgStatus::Divergence,
        ErrorClass::Other => RmgStatus::Other,
    }
}

struct Failure(RmgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(RmgStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RmgStatus::Panic
        }
    }
}

unsafe fn read_image(pixels: *const f32, height: usize, width: usize, channels: usize) -> Result<ImageTensor, Failure> {
    if pixels.is_null() {
        return Err(invalid("pixels is null"));
    }
    let len = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .filter(|&v| v > 0)
        .ok_or_else(|| invalid("image dimensions must be positive"))?;
    // SAFETY: the caller guarantees `pixels` points at `len` floats.
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    Ok(ImageTensor::new(height, width, channels, data, ValueRange::UnitFloat)?)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn rmgpmsi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rmgpmsi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rmgpmsi_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by `CString::into_raw` in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Loads a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmgpmsi_model_load(path: *const c_char, out: *mut *mut RmgModel) -> RmgStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("path and out must be non-null"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let handle = Box::new(RmgModel { model: ckpt.model });
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`rmgpmsi_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rmgpmsi_model_free(model: *mut RmgModel) {
    if !model.is_null() {
        // SAFETY: produced by `Box::into_raw` in `rmgpmsi_model_load`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Class count `K`, expected input shape, and the number of interacting
/// stages. Any out-pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmgpmsi_model_info(
    model: *const RmgModel,
    classes: *mut usize,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    stage_num: *mut usize,
) -> RmgStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle when non-null.
        let m = unsafe { model.as_ref() }.ok_or_else(|| invalid("model is null"))?;
        let size = m.model.config().backbone.input_size;
        let values = [
            (classes, m.model.classes()),
            (height, size),
            (width, size),
            (channels, m.model.config().backbone.input_channels),
            (stage_num, m.model.config().stage_num),
        ];
        for (p, v) in values {
            if !p.is_null() {
                // SAFETY: non-null and writable per contract.
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Classifies one image of exactly the model's input shape. Writes the
/// concatenation head's `K` probabilities to `concat_probs` (may be null
/// to skip) and the concat and mix predictions to the class out-pointers
/// (each may be null).
///
/// # Safety
/// `model` must be a live handle; `pixels` must hold
/// `height * width * channels` floats; `concat_probs`, when non-null, must
/// hold `classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmgpmsi_model_predict(
    model: *mut RmgModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    concat_probs: *mut f64,
    classes: usize,
    concat_class: *mut usize,
    mix_class: *mut usize,
) -> RmgStatus {
    guard(|| {
        // SAFETY: caller guarantees a live, unaliased handle when non-null.
        let m = unsafe { model.as_mut() }.ok_or_else(|| invalid("model is null"))?;
        // SAFETY: forwarded caller contract.
        let img = unsafe { read_image(pixels, height, width, channels) }?;
        let bundle = m.model.predict(&[&img])?.remove(0);
        if !concat_probs.is_null() {
            if classes != bundle.classes() {
                return Err(invalid(&format!("model has {} classes, buffer holds {classes}", bundle.classes())));
            }
            // SAFETY: non-null and sized `classes` per contract.
            unsafe { std::slice::from_raw_parts_mut(concat_probs, classes) }.copy_from_slice(&bundle.y_hat_concat);
        }
        if !concat_class.is_null() {
            // SAFETY: non-null and writable per contract.
            unsafe { *concat_class = predict_concat(&bundle) };
        }
        if !mix_class.is_null() {
            let mix = predict_mix(&bundle)?;
            // SAFETY: non-null and writable per contract.
            unsafe { *mix_class = mix };
        }
        Ok(())
    })
}

/// Writes a depth-`r` recursive mosaic of the input to `output` (same
/// shape). When `trace` is non-null it receives the mosaic trace text, to be
/// released with [`rmgpmsi_string_free`]. Depths above 3 need `allow_deep`.
///
/// # Safety
/// `input` and `output` must each hold `height * width * channels` floats;
/// `trace`, when non-null, must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmgpmsi_mosaic(
    input: *const f32,
    output: *mut f32,
    height: usize,
    width: usize,
    channels: usize,
    r: u32,
    seed: u64,
    allow_deep: bool,
    trace: *mut *mut c_char,
) -> RmgStatus {
    guard(|| {
        if output.is_null() {
            return Err(invalid("output is null"));
        }
        // SAFETY: forwarded caller contract.
        let img = unsafe { read_image(input, height, width, channels) }?;
        let config = RmgConfig {
            allow_deep,
            ..RmgConfig::new(r, seed)
        };
        let (out, steps) = rmg::generate(&img, &config)?;
        // SAFETY: `output` holds as many floats as `input` per contract.
        unsafe { std::slice::from_raw_parts_mut(output, out.values().len()) }.copy_from_slice(out.values());
        if !trace.is_null() {
            let text = CString::new(steps.to_text()).expect("trace text has no NULs");
            // SAFETY: non-null and writable per contract.
            unsafe { *trace = text.into_raw() };
        }
        Ok(())
    })
}
