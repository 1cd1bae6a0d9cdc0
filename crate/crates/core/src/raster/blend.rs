use super::RasterGrid;
use crate::error::{invalid, shape, Error, Result};

/// Separable Gaussian weights with peak 1.0 at the window center.
pub fn gaussian_window(size_px: usize, sigma_px: f64) -> Result<RasterGrid> {
    if size_px == 0 {
        return Err(invalid("window size must be >= 1"));
    }
    if !(sigma_px.is_finite() && sigma_px > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma_px}")));
    }
    let center = (size_px as f64 - 1.0) / 2.0;
    let profile: Vec<f64> = (0..size_px)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / (2.0 * sigma_px * sigma_px)).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(size_px * size_px);
    for &wr in &profile {
        for &wc in &profile {
            // floor keeps far corners of tiny-sigma windows strictly positive
            data.push(((wr * wc) as f32).max(f32::MIN_POSITIVE));
        }
    }
    RasterGrid::new(size_px, size_px, 1, 1.0, data)
}

/// Window origins along one axis: `0, step, 2*step, ...` plus one edge-aligned
/// window so the last `crop` pixels are always covered.
pub fn window_origins(extent: usize, crop: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 || crop == 0 {
        return Err(invalid("crop and step must be positive"));
    }
    if step > crop {
        return Err(invalid(format!("step {step} exceeds crop size {crop}: coverage gaps")));
    }
    if extent < crop {
        return Err(invalid(format!("extent {extent} smaller than crop {crop}")));
    }
    let mut origins: Vec<usize> = (0..=extent - crop).step_by(step).collect();
    let last = extent - crop;
    if *origins.last().expect("non-empty range") != last {
        origins.push(last);
    }
    Ok(origins)
}

/// A crop placed at `(row, col)` in the output frame.
#[derive(Debug, Clone, Copy)]
pub struct Crop<'a> {
    pub grid: &'a RasterGrid,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct StitchOutput {
    /// Blended values; uncovered pixels hold 0.
    pub grid: RasterGrid,
    pub covered: Vec<bool>,
    pub uncovered: usize,
}

impl StitchOutput {
    /// Fails if any pixel was left uncovered.
    pub fn into_full(self) -> Result<RasterGrid> {
        if self.uncovered > 0 {
            return Err(Error::CoverageGap(self.uncovered));
        }
        Ok(self.grid)
    }
}

/// Running weighted sums for blending crops into one output frame.
///
/// Sums are f64 and crops are folded in the order they are added, so the
/// result is reproducible for a fixed crop sequence.
#[derive(Debug, Clone)]
pub struct StitchAccumulator {
    weights: RasterGrid,
    height: usize,
    width: usize,
    channels: usize,
    gsd_m: f32,
    num: Vec<f64>,
    den: Vec<f64>,
    added: usize,
}

impl StitchAccumulator {
    pub fn new(
        weights: RasterGrid,
        out_height: usize,
        out_width: usize,
        channels: usize,
        gsd_m: f32,
    ) -> Result<Self> {
        weights.require_single_channel("stitch weights")?;
        if out_height == 0 || out_width == 0 || channels == 0 {
            return Err(invalid("output shape must be positive"));
        }
        Ok(Self {
            weights,
            height: out_height,
            width: out_width,
            channels,
            gsd_m,
            num: vec![0.0; out_height * out_width * channels],
            den: vec![0.0; out_height * out_width],
            added: 0,
        })
    }

    pub fn add(&mut self, crop: Crop<'_>) -> Result<()> {
        let (g, i, channels) = (crop.grid, self.added, self.channels);
        let weights = &self.weights;
        if g.height() != weights.height() || g.width() != weights.width() {
            return Err(shape(format!(
                "crop {i} is {}x{} but weights are {}x{}",
                g.height(),
                g.width(),
                weights.height(),
                weights.width()
            )));
        }
        if g.channels() != channels {
            return Err(shape(format!(
                "crop {i} has {} channels, expected {channels}",
                g.channels()
            )));
        }
        if crop.row + g.height() > self.height || crop.col + g.width() > self.width {
            return Err(shape(format!(
                "crop {i} at ({}, {}) does not fit in {}x{}",
                crop.row, crop.col, self.height, self.width
            )));
        }
        for r in 0..g.height() {
            let orow = crop.row + r;
            for c in 0..g.width() {
                let w = weights.get(r, c, 0) as f64;
                let o = orow * self.width + crop.col + c;
                self.den[o] += w;
                for (k, &v) in g.pixel(r, c).iter().enumerate() {
                    self.num[o * channels + k] += w * v as f64;
                }
            }
        }
        self.added += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<StitchOutput> {
        let channels = self.channels;
        let mut covered = vec![false; self.height * self.width];
        let mut uncovered = 0;
        let mut data = vec![0.0f32; self.height * self.width * channels];
        for (o, &d) in self.den.iter().enumerate() {
            if d > 0.0 {
                covered[o] = true;
                for k in 0..channels {
                    data[o * channels + k] = (self.num[o * channels + k] / d) as f32;
                }
            } else {
                uncovered += 1;
            }
        }
        Ok(StitchOutput {
            grid: RasterGrid::new(self.height, self.width, channels, self.gsd_m, data)?,
            covered,
            uncovered,
        })
    }
}

/// Weighted average of overlapping crops: `sum(w * v) / sum(w)` per output pixel.
pub fn stitch(
    crops: &[Crop<'_>],
    weights: &RasterGrid,
    out_height: usize,
    out_width: usize,
) -> Result<StitchOutput> {
    let channels = crops.first().map_or(1, |c| c.grid.channels());
    let gsd = crops.first().map_or(1.0, |c| c.grid.gsd_m());
    let mut acc = StitchAccumulator::new(weights.clone(), out_height, out_width, channels, gsd)?;
    for crop in crops {
        acc.add(*crop)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_center_and_symmetry() {
        let w = gaussian_window(3, 0.7).unwrap();
        assert_eq!(w.get(1, 1, 0), 1.0);
        let corner = w.get(0, 0, 0);
        for (r, c) in [(0, 2), (2, 0), (2, 2)] {
            assert_eq!(w.get(r, c, 0), corner);
        }
        assert_eq!(w.get(0, 1, 0), w.get(1, 0, 0));
    }

    #[test]
    fn window_corner_closed_form() {
        let w = gaussian_window(320, 80.0).unwrap();
        let expected = (-(159.5f64 * 159.5 + 159.5 * 159.5) / (2.0 * 80.0 * 80.0)).exp();
        assert!((w.get(0, 0, 0) as f64 - expected).abs() < 1e-7);
        assert!(w.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn degenerate_window() {
        assert_eq!(gaussian_window(1, 2.0).unwrap().data(), &[1.0]);
        assert!(gaussian_window(4, 0.0).is_err());
        assert!(gaussian_window(0, 1.0).is_err());
    }

    #[test]
    fn origins_include_edge_aligned_window() {
        let o = window_origins(1190, 320, 60).unwrap();
        let expected: Vec<usize> = (0..=840).step_by(60).chain([870]).collect();
        assert_eq!(o, expected);
        assert_eq!(window_origins(320, 320, 60).unwrap(), vec![0]);
        assert_eq!(window_origins(400, 320, 80).unwrap(), vec![0, 80]);
        assert!(window_origins(100, 320, 60).is_err());
        assert!(window_origins(1000, 320, 400).is_err());
    }

    #[test]
    fn single_crop_is_returned_unchanged() {
        let g = RasterGrid::from_fn(4, 4, 1.0, |r, c| (r * 4 + c) as f32).unwrap();
        let w = gaussian_window(4, 1.0).unwrap();
        let out = stitch(&[Crop { grid: &g, row: 0, col: 0 }], &w, 4, 4).unwrap();
        assert_eq!(out.uncovered, 0);
        assert!(out.grid.max_abs_diff(&g).unwrap() < 1e-6);
    }

    #[test]
    fn equal_weight_mean_of_two_crops() {
        let a = RasterGrid::zeros(3, 3, 1, 1.0).unwrap();
        let b = RasterGrid::filled(3, 3, 1, 1.0, 2.0).unwrap();
        let w = RasterGrid::filled(3, 3, 1, 1.0, 1.0).unwrap();
        let crops = [Crop { grid: &a, row: 0, col: 0 }, Crop { grid: &b, row: 0, col: 0 }];
        let out = stitch(&crops, &w, 3, 3).unwrap().into_full().unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn uncovered_pixels_are_reported() {
        let a = RasterGrid::filled(2, 2, 1, 1.0, 5.0).unwrap();
        let w = RasterGrid::filled(2, 2, 1, 1.0, 1.0).unwrap();
        let out = stitch(&[Crop { grid: &a, row: 0, col: 0 }], &w, 3, 3).unwrap();
        assert_eq!(out.uncovered, 5);
        assert!(!out.covered[8]);
        assert!(matches!(out.into_full(), Err(Error::CoverageGap(5))));
    }

    #[test]
    fn shape_mismatches_rejected() {
        let a = RasterGrid::zeros(2, 2, 1, 1.0).unwrap();
        let w = RasterGrid::filled(3, 3, 1, 1.0, 1.0).unwrap();
        assert!(stitch(&[Crop { grid: &a, row: 0, col: 0 }], &w, 4, 4).is_err());
        let w2 = RasterGrid::filled(2, 2, 1, 1.0, 1.0).unwrap();
        assert!(stitch(&[Crop { grid: &a, row: 3, col: 0 }], &w2, 4, 4).is_err());
    }

    #[test]
    fn stitch_identity_on_multichannel_source() {
        let src = RasterGrid::new(
            50,
            47,
            3,
            1.0,
            (0..50 * 47 * 3).map(|i| ((i * 37) % 101) as f32 * 0.3).collect(),
        )
        .unwrap();
        let crop = 16;
        let w = gaussian_window(crop, crop as f64 / 4.0).unwrap();
        for step in [4, 6, 8] {
            let rows = window_origins(50, crop, step).unwrap();
            let cols = window_origins(47, crop, step).unwrap();
            let grids: Vec<(usize, usize, RasterGrid)> = rows
                .iter()
                .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
                .map(|(r, c)| (r, c, src.crop(r, c, crop, crop).unwrap()))
                .collect();
            let crops: Vec<Crop> = grids
                .iter()
                .map(|(r, c, g)| Crop { grid: g, row: *r, col: *c })
                .collect();
            let out = stitch(&crops, &w, 50, 47).unwrap().into_full().unwrap();
            assert!(out.max_abs_diff(&src).unwrap() < 1e-6);
        }
    }
}
