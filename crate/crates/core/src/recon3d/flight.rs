use serde::{Deserialize, Serialize};

use super::{heightmap_to_pointcloud, CloudAttributes, PointCloud};
use crate::data::SceneTile;
use crate::error::{invalid, shape, Result};
use crate::raster::{gaussian_window, Crop, RasterGrid, StitchAccumulator};

/// A constant-altitude pass of square orthographic frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightPlan {
    pub altitude_m: f32,
    pub frame_size_px: usize,
    /// Top-left pixel of each frame, in flight order.
    pub frame_origins: Vec<(usize, usize)>,
    pub overlap_px: usize,
}

impl FlightPlan {
    /// Left-to-right pass at `row`, as many frames as fit with the given overlap.
    /// `overlap_px = None` uses 20% of the frame width.
    pub fn single_pass(
        tile_width: usize,
        row: usize,
        frame_size_px: usize,
        overlap_px: Option<usize>,
        altitude_m: f32,
    ) -> Result<Self> {
        let overlap = overlap_px.unwrap_or(frame_size_px / 5);
        if frame_size_px == 0 || overlap >= frame_size_px {
            return Err(invalid(format!(
                "frame size {frame_size_px} must exceed overlap {overlap}"
            )));
        }
        if frame_size_px > tile_width {
            return Err(invalid(format!("frame {frame_size_px} wider than tile {tile_width}")));
        }
        let advance = frame_size_px - overlap;
        let frames = 1 + (tile_width - frame_size_px) / advance;
        Ok(Self {
            altitude_m,
            frame_size_px,
            frame_origins: (0..frames).map(|i| (row, i * advance)).collect(),
            overlap_px: overlap,
        })
    }

    /// `(row, col, height, width)` bounding box of all frames.
    pub fn strip(&self) -> Option<(usize, usize, usize, usize)> {
        let r0 = self.frame_origins.iter().map(|o| o.0).min()?;
        let c0 = self.frame_origins.iter().map(|o| o.1).min()?;
        let r1 = self.frame_origins.iter().map(|o| o.0).max()? + self.frame_size_px;
        let c1 = self.frame_origins.iter().map(|o| o.1).max()? + self.frame_size_px;
        Some((r0, c0, r1 - r0, c1 - c0))
    }
}

/// Exact camera position: frame origin in pixels and meters, plus altitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub row_px: usize,
    pub col_px: usize,
    pub x_m: f32,
    pub y_m: f32,
    pub altitude_m: f32,
}

#[derive(Debug, Clone)]
pub struct FlightFrame {
    pub rgb: RasterGrid,
    pub pose: Pose,
}

/// Cuts the plan's frames out of the tile RGB with their known poses.
pub fn simulate_flight(tile: &SceneTile, plan: &FlightPlan) -> Result<Vec<FlightFrame>> {
    let s = plan.frame_size_px;
    if plan.frame_origins.is_empty() {
        return Err(invalid("flight plan has no frames"));
    }
    let gsd = tile.gsd_m();
    plan.frame_origins
        .iter()
        .map(|&(r, c)| {
            if r + s > tile.height_px() || c + s > tile.width_px() {
                return Err(invalid(format!(
                    "frame at ({r}, {c}) leaves the {}x{} tile",
                    tile.height_px(),
                    tile.width_px()
                )));
            }
            Ok(FlightFrame {
                rgb: tile.rgb.crop(r, c, s, s)?,
                pose: Pose {
                    row_px: r,
                    col_px: c,
                    x_m: c as f32 * gsd,
                    y_m: r as f32 * gsd,
                    altitude_m: plan.altitude_m,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FusedFlight {
    /// Blended heights; uncovered pixels hold 0 and are flagged in `covered`.
    pub height: RasterGrid,
    pub covered: Vec<bool>,
    pub holes: usize,
    /// One point per covered pixel.
    pub cloud: PointCloud,
}

/// Places per-frame height maps at their poses and blends the overlaps with
/// Gaussian weights. Holes are allowed and reported.
pub fn fuse_flight(
    frames: &[(RasterGrid, Pose)],
    out_shape: (usize, usize),
    sigma_px: Option<f64>,
) -> Result<FusedFlight> {
    let first = frames.first().ok_or_else(|| invalid("no frames to fuse"))?;
    let size = first.0.height();
    if frames.iter().any(|(g, _)| g.shape() != (size, size, 1)) {
        return Err(shape("flight frames must be square single-channel grids of one size"));
    }
    let weights = gaussian_window(size, sigma_px.unwrap_or(size as f64 / 4.0))?;
    let mut acc = StitchAccumulator::new(weights, out_shape.0, out_shape.1, 1, first.0.gsd_m())?;
    for (grid, pose) in frames {
        acc.add(Crop {
            grid,
            row: pose.row_px,
            col: pose.col_px,
        })?;
    }
    let out = acc.finish()?;
    let cloud = heightmap_to_pointcloud(
        &out.grid,
        &CloudAttributes {
            valid: Some(&out.covered),
            ..CloudAttributes::default()
        },
    )?;
    Ok(FusedFlight {
        height: out.grid,
        covered: out.covered,
        holes: out.uncovered,
        cloud,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_city, SynthParams};

    #[test]
    fn plan_frames_overlap_and_advance() {
        let p = FlightPlan::single_pass(200, 10, 50, None, 120.0).unwrap();
        assert_eq!(p.overlap_px, 10);
        assert_eq!(p.frame_origins, vec![(10, 0), (10, 40), (10, 80), (10, 120)]);
        for w in p.frame_origins.windows(2) {
            assert_eq!(w[0].1 + p.frame_size_px - w[1].1, p.overlap_px);
        }
        assert_eq!(p.strip(), Some((10, 0, 50, 170)));
        assert!(FlightPlan::single_pass(200, 0, 50, Some(50), 1.0).is_err());
    }

    #[test]
    fn single_frame_is_the_tile() {
        let (tile, _) = synth_city(1, 48, 6, &SynthParams::default()).unwrap();
        let plan = FlightPlan::single_pass(48, 0, 48, Some(0), 50.0).unwrap();
        let frames = simulate_flight(&tile, &plan).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].rgb, tile.rgb);
        assert_eq!((frames[0].pose.x_m, frames[0].pose.y_m), (0.0, 0.0));
    }

    #[test]
    fn gt_fed_fusion_reproduces_strip() {
        let (tile, _) = synth_city(4, 96, 6, &SynthParams::default()).unwrap();
        let plan = FlightPlan::single_pass(96, 20, 32, None, 80.0).unwrap();
        let frames = simulate_flight(&tile, &plan).unwrap();
        assert!(frames.windows(2).all(|w| w[1].pose.x_m > w[0].pose.x_m));
        let gt_frames: Vec<_> = frames
            .iter()
            .map(|f| {
                (
                    tile.height_gt.crop(f.pose.row_px, f.pose.col_px, 32, 32).unwrap(),
                    f.pose,
                )
            })
            .collect();
        let fused = fuse_flight(&gt_frames, (96, 96), None).unwrap();
        let (r, c, h, w) = plan.strip().unwrap();
        let strip = fused.height.crop(r, c, h, w).unwrap();
        let gt = tile.height_gt.crop(r, c, h, w).unwrap();
        assert!(strip.max_abs_diff(&gt).unwrap() < 1e-6);
        let covered = fused.covered.iter().filter(|&&v| v).count();
        assert_eq!(covered, h * w);
        assert_eq!(fused.cloud.len(), covered);
        assert_eq!(fused.holes, 96 * 96 - covered);
    }

    #[test]
    fn out_of_bounds_frame_rejected() {
        let (tile, _) = synth_city(1, 48, 6, &SynthParams::default()).unwrap();
        let plan = FlightPlan {
            altitude_m: 1.0,
            frame_size_px: 32,
            frame_origins: vec![(20, 0)],
            overlap_px: 0,
        };
        assert!(simulate_flight(&tile, &plan).is_err());
    }
}
