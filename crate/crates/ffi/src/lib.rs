//! C ABI for the raster, normal, blending, metric, synthesis and PLY pieces
//! of `height-pipeline`.
//!
//! Rasters cross the boundary as opaque `HpRaster` handles owned by the
//! library; free them with `hp_raster_free`. Every fallible function returns
//! an `HpStatus`, and on failure `hp_last_error` holds a message for the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use height_pipeline::data::{synth_city, SynthParams};
use height_pipeline::inference::{height_metrics, semantic_metrics};
use height_pipeline::raster::{
    gaussian_window, hmap, stitch, surface_normals, Crop, LabelGrid, NormalEncoding, NormalOptions, RasterGrid,
};
use height_pipeline::recon3d::{grid_mesh, heightmap_to_pointcloud, write_cloud_ply, write_mesh_ply, CloudAttributes};
use height_pipeline::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    CoverageGap = 6,
    Internal = 7,
    Panic = 8,
}

/// Owned raster grid: row-major, channels interleaved.
pub struct HpRaster(RasterGrid);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HpHeightMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HpSemanticMetrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HpStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => HpStatus::InvalidArgument,
        Error::ShapeMismatch(_) => HpStatus::ShapeMismatch,
        Error::Io { .. } => HpStatus::Io,
        Error::Format(_) | Error::Image(_) | Error::CheckpointMismatch(_) => HpStatus::Format,
        Error::CoverageGap(_) => HpStatus::CoverageGap,
        _ => HpStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, converting errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HpStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            HpStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            HpStatus::Panic
        }
    }
}

unsafe fn grid_ref<'a>(p: *const HpRaster, what: &'static str) -> FfiResult<&'a RasterGrid> {
    p.as_ref().map(|r| &r.0).ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed(grid: RasterGrid) -> *mut HpRaster {
    Box::into_raw(Box::new(HpRaster(grid)))
}

/// Message for the last failed call on this thread. Empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `height * width * channels` floats into a new raster.
///
/// # Safety
/// `data` must point to that many readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_raster_new(
    height: usize,
    width: usize,
    channels: usize,
    gsd_m: f32,
    data: *const f32,
    out: *mut *mut HpRaster,
) -> HpStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("raster size overflows".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let grid = RasterGrid::new(height, width, channels, gsd_m, values)?;
        put(out, boxed(grid), "out")
    })
}

/// # Safety
/// `raster` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn hp_raster_free(raster: *mut HpRaster) {
    if !raster.is_null() {
        drop(Box::from_raw(raster));
    }
}

/// # Safety
/// `raster` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_raster_shape(
    raster: *const HpRaster,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    gsd_m: *mut f32,
) -> HpStatus {
    guard(|| {
        let r = grid_ref(raster, "raster")?;
        put(height, r.height(), "height")?;
        put(width, r.width(), "width")?;
        put(channels, r.channels(), "channels")?;
        put(gsd_m, r.gsd_m(), "gsd_m")
    })
}

/// Borrowed pointer to the raster's values, valid while the handle lives.
/// Null for a null handle.
///
/// # Safety
/// `raster` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_raster_data(raster: *const HpRaster) -> *const f32 {
    raster.as_ref().map_or(ptr::null(), |r| r.0.data().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_hmap_read_raster(path: *const c_char, out: *mut *mut HpRaster) -> HpStatus {
    guard(|| {
        let grid = hmap::read_raster(path_arg(path)?)?;
        put(out, boxed(grid), "out")
    })
}

/// # Safety
/// `raster` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hp_hmap_write_raster(raster: *const HpRaster, path: *const c_char) -> HpStatus {
    guard(|| Ok(hmap::write_raster(path_arg(path)?, grid_ref(raster, "raster")?)?))
}

/// Reads a label HMAP into `labels` (`capacity` entries), storing its shape.
///
/// # Safety
/// `path` must be NUL-terminated; `labels` must have room for `capacity`
/// values; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_hmap_read_labels(
    path: *const c_char,
    num_classes: usize,
    labels: *mut u16,
    capacity: usize,
    height: *mut usize,
    width: *mut usize,
) -> HpStatus {
    guard(|| {
        let grid = hmap::read_labels(path_arg(path)?, num_classes)?;
        let n = grid.labels().len();
        if labels.is_null() {
            return Err(Failure::Null("labels"));
        }
        if capacity < n {
            return Err(Error::InvalidArgument(format!("label buffer holds {capacity}, need {n}")).into());
        }
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(grid.labels());
        put(height, grid.height(), "height")?;
        put(width, grid.width(), "width")
    })
}

/// # Safety
/// `labels` must hold `height * width` values; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hp_hmap_write_labels(
    labels: *const u16,
    height: usize,
    width: usize,
    num_classes: usize,
    gsd_m: f32,
    path: *const c_char,
) -> HpStatus {
    guard(|| {
        let grid = label_grid(labels, height, width, num_classes)?;
        Ok(hmap::write_labels(path_arg(path)?, &grid, gsd_m)?)
    })
}

unsafe fn label_grid(labels: *const u16, height: usize, width: usize, num_classes: usize) -> FfiResult<LabelGrid> {
    if labels.is_null() {
        return Err(Failure::Null("labels"));
    }
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::InvalidArgument("label size overflows".into()))?;
    Ok(LabelGrid::new(height, width, num_classes, std::slice::from_raw_parts(labels, n).to_vec())?)
}

/// Encoded surface normals of a single-channel height raster. `encoding` is
/// 0 for `n/2 + 1` and 1 for `(n + 1)/2`.
///
/// # Safety
/// `height` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_surface_normals(
    height: *const HpRaster,
    encoding: u32,
    metric_gradient: bool,
    out: *mut *mut HpRaster,
) -> HpStatus {
    guard(|| {
        let encoding = match encoding {
            0 => NormalEncoding::PaperLiteral,
            1 => NormalEncoding::UnitInterval,
            e => return Err(Error::InvalidArgument(format!("unknown normal encoding {e}")).into()),
        };
        let n = surface_normals(
            grid_ref(height, "height")?,
            NormalOptions {
                encoding,
                metric_gradient,
            },
        )?;
        put(out, boxed(n.grid), "out")
    })
}

/// Square Gaussian blending window peaking at 1.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_gaussian_window(size: usize, sigma_px: f64, out: *mut *mut HpRaster) -> HpStatus {
    guard(|| put(out, boxed(gaussian_window(size, sigma_px)?), "out"))
}

/// Weighted blend of `count` crops placed at `rows[i], cols[i]` into an
/// `out_height x out_width` raster. Fails with `CoverageGap` if any pixel is
/// left uncovered.
///
/// # Safety
/// `crops`, `rows` and `cols` must each hold `count` entries of live
/// handles / indices; `weights` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_stitch(
    crops: *const *const HpRaster,
    rows: *const usize,
    cols: *const usize,
    count: usize,
    weights: *const HpRaster,
    out_height: usize,
    out_width: usize,
    out: *mut *mut HpRaster,
) -> HpStatus {
    guard(|| {
        if count > 0 && (crops.is_null() || rows.is_null() || cols.is_null()) {
            return Err(Failure::Null("crops"));
        }
        let weights = grid_ref(weights, "weights")?;
        let mut placed = Vec::with_capacity(count);
        for i in 0..count {
            placed.push(Crop {
                grid: grid_ref(*crops.add(i), "crop")?,
                row: *rows.add(i),
                col: *cols.add(i),
            });
        }
        let grid = stitch(&placed, weights, out_height, out_width)?.into_full()?;
        put(out, boxed(grid), "out")
    })
}

/// # Safety
/// Both handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_height_metrics(
    pred: *const HpRaster,
    truth: *const HpRaster,
    out: *mut HpHeightMetrics,
) -> HpStatus {
    guard(|| {
        let m = height_metrics(grid_ref(pred, "pred")?, grid_ref(truth, "truth")?)?;
        put(
            out,
            HpHeightMetrics {
                mse: m.mse,
                mae: m.mae,
                rmse: m.rmse,
            },
            "out",
        )
    })
}

/// # Safety
/// `pred` and `truth` must hold `count` labels; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_semantic_metrics(
    pred: *const u16,
    truth: *const u16,
    count: usize,
    num_classes: usize,
    out: *mut HpSemanticMetrics,
) -> HpStatus {
    guard(|| {
        let p = label_grid(pred, 1, count, num_classes)?;
        let t = label_grid(truth, 1, count, num_classes)?;
        let m = semantic_metrics(&p, &t, num_classes)?;
        put(
            out,
            HpSemanticMetrics {
                oa: m.oa,
                aa: m.aa,
                kappa: m.kappa,
            },
            "out",
        )
    })
}

/// Procedural city tile with default generator settings. Labels go to a
/// caller buffer of `size * size` entries.
///
/// # Safety
/// `labels` must have room for `size * size` values; `rgb` and `height` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_synth_city(
    seed: u64,
    size: usize,
    num_classes: usize,
    rgb: *mut *mut HpRaster,
    height: *mut *mut HpRaster,
    labels: *mut u16,
) -> HpStatus {
    guard(|| {
        if rgb.is_null() || height.is_null() || labels.is_null() {
            return Err(Failure::Null("output"));
        }
        let (tile, _) = synth_city(seed, size, num_classes, &SynthParams::default())?;
        std::slice::from_raw_parts_mut(labels, size * size).copy_from_slice(tile.labels_gt.labels());
        put(rgb, boxed(tile.rgb), "rgb")?;
        put(height, boxed(tile.height_gt), "height")
    })
}

/// One point per pixel, optionally colored by a 3-channel `rgb` raster (may be null).
///
/// # Safety
/// `height` must be live, `rgb` null or live, `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hp_write_cloud_ply(
    height: *const HpRaster,
    rgb: *const HpRaster,
    path: *const c_char,
    binary: bool,
) -> HpStatus {
    guard(|| {
        let attrs = CloudAttributes {
            rgb: rgb.as_ref().map(|r| &r.0),
            ..CloudAttributes::default()
        };
        let cloud = heightmap_to_pointcloud(grid_ref(height, "height")?, &attrs)?;
        Ok(write_cloud_ply(&cloud, &path_arg(path)?, binary)?)
    })
}

/// Two triangles per pixel quad with Sobel vertex normals.
///
/// # Safety
/// `height` must be live, `rgb` null or live, `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hp_write_mesh_ply(
    height: *const HpRaster,
    rgb: *const HpRaster,
    path: *const c_char,
    binary: bool,
) -> HpStatus {
    guard(|| {
        let mesh = grid_mesh(
            grid_ref(height, "height")?,
            rgb.as_ref().map(|r| &r.0),
            NormalOptions::default(),
        )?;
        Ok(write_mesh_ply(&mesh, &path_arg(path)?, binary)?)
    })
}
