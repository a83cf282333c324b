//! C ABI over terragen: opaque handles, integer status codes and a
//! thread-local last-error message.
//!
//! Every function returns a `TgStatus`; outputs go through pointer arguments.
//! Handles are created by `tg_*_load`/`tg_*_read` and released by the matching
//! `tg_*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use terragen::diffusion::{ddim_sample, to_pixels, Model, NoiseSchedule, SampleConfig};
use terragen::eval::{fid, schedule_from_meta, FeatureStats};
use terragen::layout::{read_layout, validate, Layout, LayoutError};
use terragen::synthdata::{write_dataset, DatasetConfig};
use terragen::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Data = 5,
    Numerics = 6,
    Layout = 7,
    Diverged = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> TgStatus {
    match e {
        Error::Numerics(_) => TgStatus::Numerics,
        Error::Layout(LayoutError::File { .. }) => TgStatus::Data,
        Error::Layout(_) => TgStatus::Layout,
        Error::Config(_) => TgStatus::Config,
        Error::Data { .. } | Error::Json(_) => TgStatus::Data,
        Error::Diverged { .. } => TgStatus::Diverged,
        Error::Io(_) => TgStatus::Io,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (TgStatus, String)>) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TgStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TgStatus::Panic
        }
    }
}

fn lib<T>(r: terragen::Result<T>) -> Result<T, (TgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (TgStatus, String) {
    (TgStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (TgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| (TgStatus::InvalidUtf8, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Trained model plus the noise schedule it was trained with.
pub struct TgModel {
    model: Model,
    schedule: NoiseSchedule,
}

pub struct TgLayout {
    layout: Layout,
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tg_model_load(path: *const c_char, out: *mut *mut TgModel) -> TgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let (model, _, meta) = lib(Model::load(&path))?;
        let schedule = lib(schedule_from_meta(&meta))?;
        *out = Box::into_raw(Box::new(TgModel { model, schedule }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `tg_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tg_model_free(model: *mut TgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes channels, height and width of generated images.
///
/// # Safety
/// `model` must be a live handle; the outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tg_model_shape(
    model: *const TgModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> TgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        let [c, h, w] = m.model.image_shape();
        (*channels, *height, *width) = (c, h, w);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tg_layout_read(path: *const c_char, out: *mut *mut TgLayout) -> TgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let layout = read_layout(&path).map_err(|e| (TgStatus::Data, e.to_string()))?;
        *out = Box::into_raw(Box::new(TgLayout { layout }));
        Ok(())
    })
}

/// # Safety
/// `layout` must come from `tg_layout_read` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tg_layout_free(layout: *mut TgLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// # Safety
/// `layout` must be a live handle; `count` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tg_layout_entity_count(layout: *const TgLayout, count: *mut usize) -> TgStatus {
    guard(|| {
        let l = layout.as_ref().ok_or_else(|| null("layout"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        *count = l.layout.entities.len();
        Ok(())
    })
}

/// Number of validation issues (overlaps, broken roads, task conflicts).
///
/// # Safety
/// `layout` must be a live handle; `issues` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tg_layout_validate(layout: *const TgLayout, issues: *mut usize) -> TgStatus {
    guard(|| {
        let l = layout.as_ref().ok_or_else(|| null("layout"))?;
        let issues = issues.as_mut().ok_or_else(|| null("issues"))?;
        *issues = validate(&l.layout).len();
        Ok(())
    })
}

/// Guided DDIM sample for `layout`, written as interleaved 8-bit pixels.
/// `len` must be at least channels·height·width.
///
/// # Safety
/// Handles must be live; `pixels` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tg_sample(
    model: *const TgModel,
    layout: *const TgLayout,
    ddim_steps: usize,
    guidance_scale: f64,
    seed: u64,
    pixels: *mut u8,
    len: usize,
) -> TgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let l = layout.as_ref().ok_or_else(|| null("layout"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let need: usize = m.model.image_shape().iter().product();
        if len < need {
            return Err((TgStatus::BufferTooSmall, format!("pixel buffer holds {len} bytes, need {need}")));
        }
        let cfg = SampleConfig { ddim_steps, guidance_scale, seed, ..SampleConfig::default() };
        let x = lib(ddim_sample(&m.model, &m.schedule, &l.layout, &cfg))?;
        let px = to_pixels(&x);
        std::ptr::copy_nonoverlapping(px.as_ptr(), pixels, px.len());
        Ok(())
    })
}

/// Writes a synthetic corpus under `root` with the default config and the
/// given seed and split sizes; `records` receives the sample count.
///
/// # Safety
/// `root` must be a NUL-terminated string; `records` null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tg_generate_dataset(
    root: *const c_char,
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
    records: *mut usize,
) -> TgStatus {
    guard(|| {
        let root = path_arg(root, "root")?;
        let cfg = DatasetConfig { seed, train, val, test, ..DatasetConfig::default() };
        let manifest = lib(write_dataset(&root, &cfg))?;
        if let Some(r) = records.as_mut() {
            *r = manifest.records.len();
        }
        Ok(())
    })
}

/// Fréchet distance between two Gaussians given as means (`dim`) and
/// row-major covariances (`dim`×`dim`).
///
/// # Safety
/// Means must be valid for `dim` reads, covariances for `dim`·`dim`, `out` for a write.
#[no_mangle]
pub unsafe extern "C" fn tg_fid(
    mean_real: *const f64,
    cov_real: *const f64,
    mean_gen: *const f64,
    cov_gen: *const f64,
    dim: usize,
    out: *mut f64,
) -> TgStatus {
    guard(|| {
        if mean_real.is_null() || cov_real.is_null() || mean_gen.is_null() || cov_gen.is_null() {
            return Err(null("statistics"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let stats = |m: *const f64, c: *const f64| FeatureStats {
            mean: std::slice::from_raw_parts(m, dim).to_vec(),
            cov: std::slice::from_raw_parts(c, dim * dim).to_vec(),
            n: 0,
        };
        *out = lib(fid(&stats(mean_real, cov_real), &stats(mean_gen, cov_gen)))?;
        Ok(())
    })
}
