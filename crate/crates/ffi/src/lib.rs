//! C ABI for docwarp.
//!
//! Every function returns a [`DwStatus`]; on failure the message is kept in
//! a thread-local slot readable through [`dw_last_error_message`]. Objects
//! cross the boundary as opaque handles created by `*_new`/`*_load`/... and
//! released by the matching `*_free`. Strings returned to the caller are
//! NUL-terminated UTF-8 and must be released with [`dw_string_free`].
//! Panics never unwind into C; they surface as `DW_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use docwarp::annotation::{parse_labelme, write_labelme};
use docwarp::evaluation::polygon_iou;
use docwarp::geometry::{Point2, Polygon};
use docwarp::obb::emit_obb_file;
use docwarp::pipeline::{augment_document, sample_plan, AugmentationConfig, TransformPlan};
use docwarp::raster::{read_image, warp_image_with, write_image, ImageBuffer};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    InvalidConfig = 5,
    InvalidPlan = 6,
    Raster = 7,
    Panic = 8,
}

/// Augmentation settings.
pub struct DwConfig {
    inner: AugmentationConfig,
}

/// A sampled or deserialized transform plan.
pub struct DwPlan {
    inner: TransformPlan,
}

/// An 8-bit gray, RGB or RGBA raster.
pub struct DwImage {
    inner: ImageBuffer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DwStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: DwStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn set_last_error(msg: String) {
    // Interior NULs would truncate the message on the C side anyway.
    let msg = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> DwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DwStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            DwStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    match unsafe { p.as_ref() } {
        Some(r) => Ok(r),
        None => fail(DwStatus::NullPointer, format!("{what} is NULL")),
    }
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    match unsafe { p.as_mut() } {
        Some(r) => Ok(r),
        None => fail(DwStatus::NullPointer, format!("{what} is NULL")),
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(DwStatus::NullPointer, format!("{what} is NULL"));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .or_else(|_| fail(DwStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> FfiResult<()> {
    let slot = unsafe { deref_mut(out, what)? };
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String, what: &str) -> FfiResult<()> {
    let slot = unsafe { deref_mut(out, what)? };
    let c = CString::new(s).or_else(|_| fail(DwStatus::InvalidArgument, "string has a NUL"))?;
    *slot = c.into_raw();
    Ok(())
}

/// Clears the output pointer first so callers never see a stale handle.
unsafe fn clear<T>(out: *mut *mut T) {
    if let Some(slot) = unsafe { out.as_mut() } {
        *slot = ptr::null_mut();
    }
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_config_default(out: *mut *mut DwConfig) -> DwStatus {
    unsafe { clear(out) };
    guard(|| unsafe {
        put(
            out,
            DwConfig {
                inner: AugmentationConfig::default(),
            },
            "out",
        )
    })
}

/// Parses and validates a JSON config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_config_from_json(
    json: *const c_char,
    out: *mut *mut DwConfig,
) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let text = unsafe { c_str(json, "json")? };
        let inner = AugmentationConfig::from_json(text)
            .or_else(|e| fail(DwStatus::InvalidConfig, e.to_string()))?;
        unsafe { put(out, DwConfig { inner }, "out") }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_config_load(path: *const c_char, out: *mut *mut DwConfig) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let path = unsafe { c_str(path, "path")? };
        let text = std::fs::read_to_string(path)
            .or_else(|e| fail(DwStatus::Io, format!("cannot read {path}: {e}")))?;
        let inner = AugmentationConfig::from_json(&text)
            .or_else(|e| fail(DwStatus::InvalidConfig, format!("{path}: {e}")))?;
        unsafe { put(out, DwConfig { inner }, "out") }
    })
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn dw_config_set_seed(cfg: *mut DwConfig, seed: u64) -> DwStatus {
    guard(|| {
        unsafe { deref_mut(cfg, "cfg")? }.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live config handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_config_to_json(
    cfg: *const DwConfig,
    out: *mut *mut c_char,
) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let cfg = unsafe { deref(cfg, "cfg")? };
        unsafe { put_string(out, cfg.inner.to_json(), "out") }
    })
}

/// # Safety
/// `cfg` must be NULL or a config handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_config_free(cfg: *mut DwConfig) {
    unsafe { free_box(cfg) }
}

/// Copies `len` bytes of interleaved 8-bit samples into a new image.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_image_new(
    width: u32,
    height: u32,
    channels: u8,
    data: *const u8,
    len: usize,
    out: *mut *mut DwImage,
) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        if data.is_null() && len > 0 {
            return fail(DwStatus::NullPointer, "data is NULL");
        }
        let bytes = if len == 0 {
            Vec::new()
        } else {
            unsafe { std::slice::from_raw_parts(data, len) }.to_vec()
        };
        let inner = ImageBuffer::new(width, height, channels, bytes)
            .or_else(|e| fail(DwStatus::InvalidArgument, e.to_string()))?;
        unsafe { put(out, DwImage { inner }, "out") }
    })
}

/// Decodes a PNG or JPEG file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_image_read(path: *const c_char, out: *mut *mut DwImage) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let path = unsafe { c_str(path, "path")? };
        let inner = read_image(Path::new(path)).or_else(|e| fail(DwStatus::Io, e.to_string()))?;
        unsafe { put(out, DwImage { inner }, "out") }
    })
}

/// Encodes by file extension.
///
/// # Safety
/// `img` must be a live image handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dw_image_write(img: *const DwImage, path: *const c_char) -> DwStatus {
    guard(|| {
        let img = unsafe { deref(img, "img")? };
        let path = unsafe { c_str(path, "path")? };
        write_image(Path::new(path), &img.inner).or_else(|e| fail(DwStatus::Io, e.to_string()))
    })
}

/// Width, height and channel count; any out pointer may be NULL.
///
/// # Safety
/// `img` must be a live image handle; non-NULL outs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_image_info(
    img: *const DwImage,
    width: *mut u32,
    height: *mut u32,
    channels: *mut u8,
) -> DwStatus {
    guard(|| {
        let img = &unsafe { deref(img, "img")? }.inner;
        unsafe {
            if let Some(w) = width.as_mut() {
                *w = img.width();
            }
            if let Some(h) = height.as_mut() {
                *h = img.height();
            }
            if let Some(c) = channels.as_mut() {
                *c = img.channels();
            }
        }
        Ok(())
    })
}

/// Borrows the pixel bytes, row-major and interleaved. The pointer is valid
/// while `img` lives.
///
/// # Safety
/// `img` must be a live image handle; `data` and `len` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_image_data(
    img: *const DwImage,
    data: *mut *const u8,
    len: *mut usize,
) -> DwStatus {
    guard(|| {
        let bytes = unsafe { deref(img, "img")? }.inner.data();
        unsafe {
            *deref_mut(data, "data")? = bytes.as_ptr();
            *deref_mut(len, "len")? = bytes.len();
        }
        Ok(())
    })
}

/// # Safety
/// `img` must be NULL or an image handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_image_free(img: *mut DwImage) {
    unsafe { free_box(img) }
}

/// Samples the plan for variant `variant` of page `stem`, exactly as batch
/// augmentation would.
///
/// # Safety
/// `cfg` must be a live config handle, `stem` a NUL-terminated string and
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_plan_sample(
    cfg: *const DwConfig,
    stem: *const c_char,
    variant: u32,
    width: u32,
    height: u32,
    out: *mut *mut DwPlan,
) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let cfg = unsafe { deref(cfg, "cfg")? };
        let stem = unsafe { c_str(stem, "stem")? };
        let inner = sample_plan(&cfg.inner, stem, variant, width, height)
            .or_else(|e| fail(DwStatus::InvalidPlan, e.to_string()))?;
        unsafe { put(out, DwPlan { inner }, "out") }
    })
}

/// Parses a plan in the manifest's JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_plan_from_json(json: *const c_char, out: *mut *mut DwPlan) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let text = unsafe { c_str(json, "json")? };
        let inner: TransformPlan =
            serde_json::from_str(text).or_else(|e| fail(DwStatus::InvalidPlan, e.to_string()))?;
        unsafe { put(out, DwPlan { inner }, "out") }
    })
}

/// # Safety
/// `plan` must be a live plan handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_plan_to_json(plan: *const DwPlan, out: *mut *mut c_char) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let plan = unsafe { deref(plan, "plan")? };
        let json = serde_json::to_string(&plan.inner)
            .or_else(|e| fail(DwStatus::InvalidPlan, e.to_string()))?;
        unsafe { put_string(out, json, "out") }
    })
}

/// Maps a source pixel location to the output frame.
///
/// # Safety
/// `plan` must be a live plan handle; `out_x` and `out_y` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_plan_forward(
    plan: *const DwPlan,
    x: f64,
    y: f64,
    out_x: *mut f64,
    out_y: *mut f64,
) -> DwStatus {
    guard(|| {
        let q = unsafe { deref(plan, "plan")? }
            .inner
            .forward(Point2::new(x, y));
        unsafe {
            *deref_mut(out_x, "out_x")? = q.x;
            *deref_mut(out_y, "out_y")? = q.y;
        }
        Ok(())
    })
}

/// Maps an output location back to the source. `converged` (may be NULL)
/// is false when the result misses `tol`.
///
/// # Safety
/// `plan` must be a live plan handle; `out_x` and `out_y` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_plan_inverse(
    plan: *const DwPlan,
    x: f64,
    y: f64,
    iters: u32,
    tol: f64,
    out_x: *mut f64,
    out_y: *mut f64,
    converged: *mut bool,
) -> DwStatus {
    guard(|| {
        let plan = unsafe { deref(plan, "plan")? };
        if !(tol > 0.0 && tol.is_finite()) || iters == 0 {
            return fail(
                DwStatus::InvalidArgument,
                "need iters > 0 and a finite tol > 0",
            );
        }
        let (p, ok) = plan.inner.inverse(Point2::new(x, y), iters, tol);
        unsafe {
            *deref_mut(out_x, "out_x")? = p.x;
            *deref_mut(out_y, "out_y")? = p.y;
            if let Some(c) = converged.as_mut() {
                *c = ok;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `plan` must be NULL or a plan handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_plan_free(plan: *mut DwPlan) {
    unsafe { free_box(plan) }
}

/// Resamples `img` through `plan` with the config's fill and inverse
/// settings. `nonconverged` (may be NULL) receives the share of pixels whose
/// inverse missed its tolerance.
///
/// # Safety
/// Handles must be live; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_warp_image(
    img: *const DwImage,
    plan: *const DwPlan,
    cfg: *const DwConfig,
    out: *mut *mut DwImage,
    nonconverged: *mut f64,
) -> DwStatus {
    unsafe { clear(out) };
    guard(|| {
        let (img, plan, cfg) =
            unsafe { (deref(img, "img")?, deref(plan, "plan")?, deref(cfg, "cfg")?) };
        let warped = warp_image_with(
            &img.inner,
            &plan.inner,
            cfg.inner.fill,
            cfg.inner.inverse.into(),
        )
        .or_else(|e| fail(DwStatus::Raster, e.to_string()))?;
        if let Some(n) = unsafe { nonconverged.as_mut() } {
            *n = warped.nonconverged_fraction();
        }
        unsafe {
            put(
                out,
                DwImage {
                    inner: warped.image,
                },
                "out",
            )
        }
    })
}

/// Augments one annotated page: the warped image, the transformed LabelMe
/// JSON (kept shapes only) and the OBB text. `out_labelme` and `out_obb`
/// may be NULL when not wanted.
///
/// # Safety
/// Handles must be live, `labelme_json` a NUL-terminated string; non-NULL
/// outs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_augment_labelme(
    cfg: *const DwConfig,
    plan: *const DwPlan,
    img: *const DwImage,
    labelme_json: *const c_char,
    out_image: *mut *mut DwImage,
    out_labelme: *mut *mut c_char,
    out_obb: *mut *mut c_char,
) -> DwStatus {
    unsafe {
        clear(out_image);
        clear(out_labelme);
        clear(out_obb);
    }
    guard(|| {
        let (cfg, plan, img) =
            unsafe { (deref(cfg, "cfg")?, deref(plan, "plan")?, deref(img, "img")?) };
        let text = unsafe { c_str(labelme_json, "labelme_json")? };
        let doc = parse_labelme(text).or_else(|e| fail(DwStatus::Parse, e.to_string()))?;
        let aug = augment_document(&doc, &img.inner, &plan.inner, &cfg.inner)
            .or_else(|e| fail(DwStatus::Raster, e.to_string()))?;
        // Fill the string outputs first so no image leaks if they fail.
        if !out_labelme.is_null() {
            unsafe { put_string(out_labelme, write_labelme(&aug.document), "out_labelme")? };
        }
        if !out_obb.is_null() {
            unsafe { put_string(out_obb, emit_obb_file(&aug.obb), "out_obb")? };
        }
        unsafe { put(out_image, DwImage { inner: aug.image }, "out_image") }
    })
}

unsafe fn polygon_arg(xy: *const f64, n: usize, what: &str) -> FfiResult<Polygon> {
    if xy.is_null() {
        return fail(DwStatus::NullPointer, format!("{what} is NULL"));
    }
    let flat = unsafe { std::slice::from_raw_parts(xy, 2 * n) };
    let pts = flat
        .chunks_exact(2)
        .map(|c| Point2::new(c[0], c[1]))
        .collect();
    Polygon::new(pts).or_else(|e| fail(DwStatus::InvalidArgument, format!("{what}: {e}")))
}

/// IoU of two simple polygons given as `n` interleaved `x, y` pairs.
///
/// # Safety
/// `a` and `b` must point to `2 * a_n` and `2 * b_n` doubles; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_polygon_iou(
    a: *const f64,
    a_n: usize,
    b: *const f64,
    b_n: usize,
    out: *mut f64,
) -> DwStatus {
    guard(|| {
        let pa = unsafe { polygon_arg(a, a_n, "a")? };
        let pb = unsafe { polygon_arg(b, b_n, "b")? };
        unsafe { *deref_mut(out, "out")? = polygon_iou(&pa, &pb) };
        Ok(())
    })
}
