use super::RasterGrid;
use crate::error::{invalid, Result};

/// Extends the grid to `height x width` by replicating the last row and column.
pub fn pad_replicate(grid: &RasterGrid, height: usize, width: usize) -> Result<RasterGrid> {
    if height < grid.height() || width < grid.width() {
        return Err(invalid(format!(
            "cannot pad {}x{} down to {height}x{width}",
            grid.height(),
            grid.width()
        )));
    }
    let ch = grid.channels();
    let mut data = Vec::with_capacity(height * width * ch);
    for r in 0..height {
        let sr = r.min(grid.height() - 1);
        for c in 0..width {
            let sc = c.min(grid.width() - 1);
            data.extend_from_slice(grid.pixel(sr, sc));
        }
    }
    RasterGrid::new(height, width, ch, grid.gsd_m(), data)
}

/// Box (area-average) downsampling by an integer factor.
///
/// Shapes that are not divisible by `factor` are first padded by replication.
pub fn downsample(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    if factor < 1 {
        return Err(invalid("downsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let padded;
    let src = if !grid.height().is_multiple_of(factor) || !grid.width().is_multiple_of(factor) {
        padded = pad_replicate(
            grid,
            grid.height().div_ceil(factor) * factor,
            grid.width().div_ceil(factor) * factor,
        )?;
        &padded
    } else {
        grid
    };
    let (oh, ow, ch) = (src.height() / factor, src.width() / factor, src.channels());
    let mut acc = vec![0.0f64; oh * ow * ch];
    for r in 0..src.height() {
        let orow = r / factor;
        for c in 0..src.width() {
            let base = (orow * ow + c / factor) * ch;
            for (k, &v) in src.pixel(r, c).iter().enumerate() {
                acc[base + k] += v as f64;
            }
        }
    }
    let norm = (factor * factor) as f64;
    RasterGrid::new(
        oh,
        ow,
        ch,
        grid.gsd_m() * factor as f32,
        acc.into_iter().map(|v| (v / norm) as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn factor_one_is_identity() {
        let g = RasterGrid::from_fn(3, 4, 0.5, |r, c| (r * 7 + c) as f32).unwrap();
        assert_eq!(downsample(&g, 1).unwrap(), g);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let g = RasterGrid::filled(4, 4, 1, 1.0, 7.0).unwrap();
        let d = downsample(&g, 2).unwrap();
        assert_eq!(d.shape(), (2, 2, 1));
        assert!(d.data().iter().all(|&v| v == 7.0));
        assert_eq!(d.gsd_m(), 2.0);
    }

    #[test]
    fn tenfold_downsample_shape_and_gsd() {
        let g = RasterGrid::zeros(3200, 3200, 3, 0.05).unwrap();
        let d = downsample(&g, 10).unwrap();
        assert_eq!(d.shape(), (320, 320, 3));
        assert!((d.gsd_m() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_factor_rejected() {
        let g = RasterGrid::zeros(2, 2, 1, 1.0).unwrap();
        assert!(downsample(&g, 0).is_err());
    }

    #[test]
    fn non_divisible_shape_is_padded() {
        let g = RasterGrid::from_fn(3, 3, 1.0, |r, c| (r * 3 + c) as f32).unwrap();
        let d = downsample(&g, 2).unwrap();
        assert_eq!(d.shape(), (2, 2, 1));
        // bottom-right block is the replicated corner value 8
        assert_eq!(d.get(1, 1, 0), 8.0);
        assert_eq!(d.get(0, 0, 0), (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
    }

    proptest! {
        #[test]
        fn downsample_composes(vals in proptest::collection::vec(-1.0f32..1.0, 144)) {
            let g = RasterGrid::new(12, 12, 1, 1.0, vals).unwrap();
            let two_step = downsample(&downsample(&g, 2).unwrap(), 3).unwrap();
            let one_step = downsample(&g, 6).unwrap();
            prop_assert_eq!(two_step.shape(), one_step.shape());
            prop_assert!(two_step.max_abs_diff(&one_step).unwrap() <= 1e-6);
            prop_assert!((two_step.gsd_m() - one_step.gsd_m()).abs() < 1e-6);
        }
    }
}
