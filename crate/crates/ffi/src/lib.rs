//! C ABI over the glass-seg model and metrics.
//!
//! Every function returns a [`GsStatus`]; on failure the message is available
//! from [`gs_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use glass_seg::config::ExperimentConfig;
use glass_seg::metrics::{ber, confusion, f_beta, iou, mae_binary};
use glass_seg::model::{build_variant, GlassNet, ModelConfig, Variant};
use glass_seg::raster::{BinaryMask, ImageTensor, Normalization};
use glass_seg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Panic = 5,
}

/// Opaque model handle.
pub struct GsModel {
    net: GlassNet<f32>,
    norm: Normalization,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GsMetrics {
    pub iou: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GsStatus {
    match e {
        Error::Io(_) | Error::Image(_) | Error::Missing(_) => GsStatus::Io,
        Error::Checkpoint(_) | Error::ConfigHashMismatch { .. } | Error::Json(_) => GsStatus::Checkpoint,
        _ => GsStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GsStatus, String)>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GsStatus::Panic
        }
    }
}

fn lift<T>(r: glass_seg::Result<T>) -> Result<T, (GsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GsStatus, String) {
    (GsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (GsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call.
#[no_mangle]
pub extern "C" fn gs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialised model of `variant` (e.g. `"full"`) with default settings.
///
/// # Safety
/// `variant` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_model_new_default(variant: *const c_char, seed: u64, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v: Variant = lift(str_arg(variant, "variant")?.parse())?;
        let net = lift(build_variant(&ModelConfig::new(v), seed))?;
        *out = Box::into_raw(Box::new(GsModel { net, norm: Normalization::default() }));
        Ok(())
    })
}

/// Model described by the TOML config at `config_path` (null for defaults)
/// with weights from the checkpoint at `checkpoint_path`.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_model_load(config_path: *const c_char, checkpoint_path: *const c_char, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            ExperimentConfig::default()
        } else {
            lift(ExperimentConfig::load(Path::new(str_arg(config_path, "config_path")?)))?
        };
        let ckpt = str_arg(checkpoint_path, "checkpoint_path")?;
        let net = lift(glass_seg::cli::load_model(&cfg, Path::new(ckpt)))?;
        *out = Box::into_raw(Box::new(GsModel { net, norm: cfg.data.normalization.clone() }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gs_model_free(model: *mut GsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Glass confidence for an interleaved RGB8 image. `out_confidence` receives
/// `height * width` values in [0, 1]. Both sides must be multiples of 32.
///
/// # Safety
/// `rgb` must hold `3 * height * width` bytes and `out_confidence` room for
/// `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn gs_model_predict(model: *const GsModel, rgb: *const u8, height: usize, width: usize, out_confidence: *mut f32) -> GsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() || out_confidence.is_null() {
            return Err(null("buffer"));
        }
        let n = height.checked_mul(width).filter(|&n| n > 0).ok_or((GsStatus::InvalidArgument, "empty image".to_string()))?;
        let pixels = std::slice::from_raw_parts(rgb, 3 * n);
        let image = lift(ImageTensor::from_rgb8(height, width, pixels, &m.norm))?;
        let conf = lift(m.net.predict(&[&image]))?;
        std::slice::from_raw_parts_mut(out_confidence, n).copy_from_slice(&conf[0].data);
        Ok(())
    })
}

/// IoU, F-measure (with `beta_sq`), MAE and BER of a binary prediction
/// against a binary ground truth, both `len` bytes of 0/1.
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_metrics_compute(pred: *const u8, gt: *const u8, len: usize, beta_sq: f64, out: *mut GsMetrics) -> GsStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if !(beta_sq > 0.0 && beta_sq.is_finite()) {
            return Err((GsStatus::InvalidArgument, format!("beta_sq {beta_sq} must be positive")));
        }
        let p = lift(BinaryMask::new(1, len, std::slice::from_raw_parts(pred, len).to_vec()))?;
        let g = lift(BinaryMask::new(1, len, std::slice::from_raw_parts(gt, len).to_vec()))?;
        let c = lift(confusion(&p, &g))?;
        *out = GsMetrics { iou: iou(&c), f_beta: f_beta(&c, beta_sq), mae: lift(mae_binary(&p, &g))?, ber: ber(&c) };
        Ok(())
    })
}

/// Middle width of the channel-reduction block for `c_in → c_out`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_channel_mid(c_in: usize, c_out: usize, out: *mut usize) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(glass_seg::fusion::channel_mid(c_in, c_out))?;
        Ok(())
    })
}
