//! C ABI over the `bimsa` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`BimsaStatus`]; the message of the most recent failure on the calling
//! thread is available through [`bimsa_last_error`]. Panics never unwind
//! into C: they are caught and reported as `BIMSA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use bimsa::data::LabelMap;
use bimsa::eval::{self, ConfusionMatrix, TilingPlan};
use bimsa::model::{load_checkpoint, save_checkpoint};
use bimsa::trainer::{poly_lr, TrainConfig};
use bimsa::{Error, Model, ModelConfig, StrategyId};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BimsaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Contract = 6,
    Internal = 7,
    Panic = 8,
}

/// Trained or freshly initialized segmentation model.
pub struct BimsaModel(Model);

/// Overlapping tile layout for one image size.
pub struct BimsaTiling(TilingPlan);

/// Confusion-matrix accumulator.
pub struct BimsaConfusion(ConfusionMatrix);

/// Tile rectangle in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BimsaRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BimsaStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => BimsaStatus::Io,
        Error::Checkpoint(_) => BimsaStatus::Checkpoint,
        Error::Config { .. } | Error::UnknownStrategy(_) => BimsaStatus::Config,
        Error::Contract(_) | Error::LabelOutOfRange { .. } => BimsaStatus::Contract,
        _ => BimsaStatus::Internal,
    }
}

struct Fail(BimsaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BimsaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(BimsaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BimsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BimsaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside bimsa".into());
            BimsaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies the last error message (NUL-terminated, truncated to `len`) into
/// `buf` and returns the full message length excluding the terminator.
/// Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bimsa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Learning rate after `step` of `total` steps under the polynomial decay
/// `lr0 * (1 - step/total)^power`; zero past the end.
#[no_mangle]
pub extern "C" fn bimsa_poly_lr(step: usize, total: usize, lr0: f64, power: f64) -> f64 {
    let cfg = TrainConfig {
        lr: lr0,
        poly_power: power,
        ..TrainConfig::default()
    };
    poly_lr(step, total, &cfg)
}

/// Creates a model with the default configuration and the named fusion
/// strategy (`single`, `avg`, `max`, `msd-concat`, `hmsa-score`,
/// `fhmsa-feature` or `bimsa`).
///
/// # Safety
/// `strategy` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bimsa_model_new(strategy: *const c_char, seed: u64, out: *mut *mut BimsaModel) -> BimsaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let id: StrategyId = str_arg(strategy, "strategy")?.parse()?;
        let m = Model::new(&ModelConfig::default(), id, seed)?;
        *out = Box::into_raw(Box::new(BimsaModel(m)));
        Ok(())
    })
}

/// Loads a checkpoint written by `bimsa train` or [`bimsa_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bimsa_model_load(path: *const c_char, out: *mut *mut BimsaModel) -> BimsaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let m = load_checkpoint(&path, None)?;
        *out = Box::into_raw(Box::new(BimsaModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bimsa_model_save(model: *const BimsaModel, path: *const c_char) -> BimsaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_checkpoint(&m.0, &path)?;
        Ok(())
    })
}

/// Number of classes the model predicts; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bimsa_model_n_class(model: *const BimsaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().n_class)
}

/// Tiled prediction of an interleaved 8-bit RGB image (`height * width * 3`
/// bytes, row-major). Writes `height * width` class indices to `labels` and,
/// if `scores` is non-null, `n_class * height * width` averaged logits in
/// channel-major order.
///
/// # Safety
/// All buffers must be valid for the sizes above; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn bimsa_model_predict(
    model: *const BimsaModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    tile: usize,
    overlap: usize,
    labels: *mut u8,
    scores: *mut f32,
) -> BimsaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if height == 0 || width == 0 || height > u32::MAX as usize || width > u32::MAX as usize {
            return Err(invalid(format!("bad image size {height}x{width}")));
        }
        let pixels = slice::from_raw_parts(rgb, height * width * 3).to_vec();
        let img = image::RgbImage::from_raw(width as u32, height as u32, pixels)
            .ok_or_else(|| invalid("pixel buffer does not match size"))?;
        let p = eval::predict_rgb(&m.0, &img, tile, overlap)?;
        slice::from_raw_parts_mut(labels, height * width).copy_from_slice(&p.labels.data);
        if !scores.is_null() {
            slice::from_raw_parts_mut(scores, p.scores.len()).copy_from_slice(&p.scores);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bimsa_model_free(model: *mut BimsaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Plans overlapping tiles for an image; `overlap` must be below `tile`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bimsa_tiling_new(
    height: usize,
    width: usize,
    tile: usize,
    overlap: usize,
    out: *mut *mut BimsaTiling,
) -> BimsaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let plan = eval::plan_tiles(height, width, tile, overlap)?;
        *out = Box::into_raw(Box::new(BimsaTiling(plan)));
        Ok(())
    })
}

/// Number of tiles; 0 for a null handle.
///
/// # Safety
/// `plan` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn bimsa_tiling_len(plan: *const BimsaTiling) -> usize {
    plan.as_ref().map_or(0, |p| p.0.tiles.len())
}

/// Tile `index` in row-major order.
///
/// # Safety
/// `plan` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bimsa_tiling_get(plan: *const BimsaTiling, index: usize, out: *mut BimsaRect) -> BimsaStatus {
    guard(|| {
        let p = handle(plan, "plan")?;
        let out = out_arg(out, "out")?;
        let t = p
            .0
            .tiles
            .get(index)
            .ok_or_else(|| invalid(format!("tile {index} out of {}", p.0.tiles.len())))?;
        *out = BimsaRect {
            y: t.y,
            x: t.x,
            height: t.h,
            width: t.w,
        };
        Ok(())
    })
}

/// # Safety
/// `plan` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bimsa_tiling_free(plan: *mut BimsaTiling) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bimsa_confusion_new(n_class: usize, out: *mut *mut BimsaConfusion) -> BimsaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n_class == 0 || n_class > 255 {
            return Err(invalid("n_class must lie in 1..=255"));
        }
        *out = Box::into_raw(Box::new(BimsaConfusion(ConfusionMatrix::new(n_class))));
        Ok(())
    })
}

/// Adds `len` predicted/true label pairs; truth 255 is ignored.
///
/// # Safety
/// `cm` must be live; `pred` and `truth` must hold `len` bytes each.
#[no_mangle]
pub unsafe extern "C" fn bimsa_confusion_accumulate(
    cm: *mut BimsaConfusion,
    pred: *const u8,
    truth: *const u8,
    len: usize,
) -> BimsaStatus {
    guard(|| {
        let cm = out_arg(cm, "cm")?;
        if pred.is_null() || truth.is_null() {
            return Err(null("label buffer"));
        }
        let map = |p: *const u8| LabelMap {
            width: len,
            height: 1,
            data: slice::from_raw_parts(p, len).to_vec(),
        };
        cm.0.accumulate(&map(pred), &map(truth))?;
        Ok(())
    })
}

/// Count of pixels with the given truth and predicted class.
///
/// # Safety
/// `cm` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bimsa_confusion_get(
    cm: *const BimsaConfusion,
    truth: usize,
    pred: usize,
    out: *mut u64,
) -> BimsaStatus {
    guard(|| {
        let cm = handle(cm, "cm")?;
        let out = out_arg(out, "out")?;
        let n = cm.0.n_class;
        if truth >= n || pred >= n {
            return Err(invalid(format!("class index out of range for {n} classes")));
        }
        *out = cm.0.get(truth, pred);
        Ok(())
    })
}

/// Mean IoU over classes present in truth or prediction. If `iou` is
/// non-null it receives `n_class` per-class values, NaN for absent classes.
///
/// # Safety
/// `cm` must be live; `miou` writable; `iou` null or `n_class` floats.
#[no_mangle]
pub unsafe extern "C" fn bimsa_confusion_miou(cm: *const BimsaConfusion, miou: *mut f64, iou: *mut f64) -> BimsaStatus {
    guard(|| {
        let cm = handle(cm, "cm")?;
        let miou = out_arg(miou, "miou")?;
        let r = eval::iou_report(&cm.0, &[]);
        *miou = r.miou;
        if !iou.is_null() {
            let dst = slice::from_raw_parts_mut(iou, cm.0.n_class);
            for (d, v) in dst.iter_mut().zip(&r.iou) {
                *d = v.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `cm` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bimsa_confusion_free(cm: *mut BimsaConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}
