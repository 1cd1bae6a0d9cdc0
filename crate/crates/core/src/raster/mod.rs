//! Raster containers and the pixel-level primitives built on them.
//!
//! Every grid is row-major with interleaved channels: the value for
//! `(row, col, ch)` lives at `(row * width + col) * channels + ch`.

mod blend;
pub mod hmap;
pub mod imageio;
mod normals;
mod resample;

pub use blend::{gaussian_window, stitch, window_origins, Crop, StitchAccumulator, StitchOutput};
pub use normals::{sobel, surface_normals, NormalEncoding, NormalMap, NormalOptions, SobelAxis};
pub use resample::{downsample, pad_replicate};

use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    height: usize,
    width: usize,
    channels: usize,
    gsd_m: f32,
    data: Vec<f32>,
}

impl RasterGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        gsd_m: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if !(gsd_m.is_finite() && gsd_m > 0.0) {
            return Err(invalid(format!("gsd must be positive, got {gsd_m}")));
        }
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            gsd_m,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, gsd_m: f32, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            gsd_m,
            vec![value; height * width * channels],
        )
    }

    pub fn zeros(height: usize, width: usize, channels: usize, gsd_m: f32) -> Result<Self> {
        Self::filled(height, width, channels, gsd_m, 0.0)
    }

    /// Builds a single-channel grid from a function of `(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        gsd_m: f32,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, 1, gsd_m, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gsd_m(&self) -> f32 {
        self.gsd_m
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    /// Writes a value; non-finite values are rejected to keep the grid invariant.
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) -> Result<()> {
        if !value.is_finite() {
            return Err(invalid(format!("non-finite value at ({row}, {col}, {ch})")));
        }
        let i = self.index(row, col, ch);
        self.data[i] = value;
        Ok(())
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_footprint(&self, other: &RasterGrid) -> bool {
        self.height == other.height
            && self.width == other.width
            && (self.gsd_m - other.gsd_m).abs() <= 1e-6 * self.gsd_m.max(other.gsd_m)
    }

    pub fn require_single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(shape(format!(
                "{what} expects a single-channel grid, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<RasterGrid> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(shape(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(RasterGrid {
            height,
            width,
            channels: self.channels,
            gsd_m: self.gsd_m,
            data,
        })
    }

    pub fn channel(&self, ch: usize) -> Result<RasterGrid> {
        if ch >= self.channels {
            return Err(invalid(format!(
                "channel {ch} out of range for {} channels",
                self.channels
            )));
        }
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Ok(RasterGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            gsd_m: self.gsd_m,
            data,
        })
    }

    /// Stacks grids with the same footprint along the channel axis.
    pub fn concat_channels(grids: &[&RasterGrid]) -> Result<RasterGrid> {
        let first = grids.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        if let Some(g) = grids.iter().find(|g| !g.same_footprint(first)) {
            return Err(shape(format!(
                "cannot concatenate {}x{} with {}x{}",
                first.height, first.width, g.height, g.width
            )));
        }
        let channels: usize = grids.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(first.height * first.width * channels);
        for p in 0..first.height * first.width {
            for g in grids {
                data.extend_from_slice(&g.data[p * g.channels..(p + 1) * g.channels]);
            }
        }
        Ok(RasterGrid {
            height: first.height,
            width: first.width,
            channels,
            gsd_m: first.gsd_m,
            data,
        })
    }

    pub fn with_gsd(mut self, gsd_m: f32) -> Result<Self> {
        if !(gsd_m.is_finite() && gsd_m > 0.0) {
            return Err(invalid(format!("gsd must be positive, got {gsd_m}")));
        }
        self.gsd_m = gsd_m;
        Ok(self)
    }

    /// Applies `f` to every value, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<RasterGrid> {
        RasterGrid::new(
            self.height,
            self.width,
            self.channels,
            self.gsd_m,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &RasterGrid) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("label grid dimensions must be positive"));
        }
        if num_classes < 2 || num_classes > u16::MAX as usize {
            return Err(invalid(format!("num_classes must be in [2, 65535], got {num_classes}")));
        }
        if labels.len() != height * width {
            return Err(shape(format!(
                "label count {} does not match {height}x{width}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: u16) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<LabelGrid> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(shape(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{} label grid",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            labels.extend_from_slice(&self.labels[start..start + width]);
        }
        Ok(LabelGrid {
            height,
            width,
            num_classes: self.num_classes,
            labels,
        })
    }
}
