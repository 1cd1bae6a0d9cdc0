//! PNG / TIFF adapters. Everything is converted to [`RasterGrid`] or
//! [`LabelGrid`] at the boundary; geo-referencing tags are not interpreted
//! and the ground-sample distance comes from the caller.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use super::hmap::{self, Hmap};
use super::{LabelGrid, RasterGrid};
use crate::error::{Error, Result};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn img_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(())
}

/// Raw TIFF samples as f32 with their channel count.
fn read_tiff(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(file).map_err(|e| img_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| img_err(path, e))?;
    let (w, h) = (w as usize, h as usize);
    let samples: Vec<f32> = match dec.read_image().map_err(|e| img_err(path, e))? {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(img_err(path, "unsupported TIFF sample type")),
    };
    if w * h == 0 || !samples.len().is_multiple_of(w * h) {
        return Err(img_err(path, "sample count does not match dimensions"));
    }
    let channels = samples.len() / (w * h);
    Ok((h, w, channels, samples))
}

/// Reads an RGB image as a 3-channel grid scaled to `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>, gsd_m: f32) -> Result<RasterGrid> {
    let path = path.as_ref();
    require_exists(path)?;
    match extension(path).as_str() {
        "hmap" => {
            let g = hmap::read_raster(path)?;
            if g.channels() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "{}: RGB raster has {} channels",
                    path.display(),
                    g.channels()
                )));
            }
            Ok(g)
        }
        "tif" | "tiff" => {
            let (h, w, c, s) = read_tiff(path)?;
            if c < 3 {
                return Err(img_err(path, "expected at least 3 channels"));
            }
            let max = if s.iter().any(|&v| v > 255.0) { 65535.0 } else { 255.0 };
            let data = s
                .chunks_exact(c)
                .flat_map(|p| [p[0] / max, p[1] / max, p[2] / max])
                .collect();
            RasterGrid::new(h, w, 3, gsd_m, data)
        }
        _ => {
            let img = image::open(path).map_err(|e| img_err(path, e))?.to_rgb8();
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            RasterGrid::new(h as usize, w as usize, 3, gsd_m, data)
        }
    }
}

/// Reads a single-band elevation or height raster in meters.
pub fn read_elevation(path: impl AsRef<Path>, gsd_m: f32) -> Result<RasterGrid> {
    let path = path.as_ref();
    require_exists(path)?;
    match extension(path).as_str() {
        "hmap" => {
            let g = hmap::read_raster(path)?;
            g.require_single_channel("elevation")?;
            Ok(g)
        }
        "tif" | "tiff" => {
            let (h, w, c, s) = read_tiff(path)?;
            let data = s.into_iter().step_by(c).collect();
            RasterGrid::new(h, w, 1, gsd_m, data)
        }
        _ => {
            let img = image::open(path).map_err(|e| img_err(path, e))?.to_luma32f();
            let (w, h) = img.dimensions();
            RasterGrid::new(h as usize, w as usize, 1, gsd_m, img.into_raw())
        }
    }
}

/// Reads a label image. Grayscale values are class indices; color images are
/// mapped through `palette` (class index -> RGB), unknown colors are errors.
pub fn read_labels(
    path: impl AsRef<Path>,
    num_classes: usize,
    palette: Option<&[[u8; 3]]>,
) -> Result<LabelGrid> {
    let path = path.as_ref();
    require_exists(path)?;
    if extension(path) == "hmap" {
        return match hmap::read(path)? {
            Hmap::Labels(raw) => raw.into_label_grid(num_classes),
            Hmap::Raster(_) => Err(Error::Format(format!(
                "{}: expected u16 labels",
                path.display()
            ))),
        };
    }
    let img = image::open(path).map_err(|e| img_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u16> = match palette {
        Some(pal) => img
            .to_rgb8()
            .pixels()
            .map(|p| {
                pal.iter()
                    .position(|c| *c == p.0)
                    .map(|i| i as u16)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{}: color {:?} not in label palette",
                            path.display(),
                            p.0
                        ))
                    })
            })
            .collect::<Result<_>>()?,
        None => img.to_luma16().into_raw(),
    };
    LabelGrid::new(h, w, num_classes, labels).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes a single-channel grid as an 8-bit PNG after min-max normalization.
pub fn write_png_normalized(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<()> {
    let path = path.as_ref();
    grid.require_single_channel("png export")?;
    let (lo, hi) = grid
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        grid.width() as u32,
        grid.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| img_err(path, e))
}

/// Writes an RGB grid with values in `[0, 1]` as an 8-bit PNG.
pub fn write_rgb_png(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<()> {
    let path = path.as_ref();
    if grid.channels() != 3 {
        return Err(Error::ShapeMismatch("RGB png export needs 3 channels".into()));
    }
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        grid.width() as u32,
        grid.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| img_err(path, e))
}

/// Writes a single-channel grid as a 32-bit float TIFF.
pub fn write_tiff_f32(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<()> {
    let path = path.as_ref();
    grid.require_single_channel("tiff export")?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| img_err(path, e))?;
    enc.write_image::<colortype::Gray32Float>(grid.width() as u32, grid.height() as u32, grid.data())
        .map_err(|e| img_err(path, e))
}
