//! Classical edge-preserving smoothers used as refinement baselines.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::RasterGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    pub spatial_sigma: f64,
    /// In meters.
    pub range_sigma: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            spatial_sigma: 2.0,
            range_sigma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlmParams {
    /// Odd patch side length.
    pub patch: usize,
    /// Odd search window side length.
    pub search: usize,
    /// Filtering strength in meters.
    pub h: f64,
}

impl Default for NlmParams {
    fn default() -> Self {
        Self {
            patch: 5,
            search: 11,
            h: 1.0,
        }
    }
}

/// Bilateral filter over a `ceil(3 * spatial_sigma)` radius. Out-of-bounds
/// neighbors are skipped and the remaining weights renormalized.
///
/// `range_sigma` may be infinite, which reduces the filter to a Gaussian blur.
pub fn bilateral_filter(height: &RasterGrid, spatial_sigma: f64, range_sigma: f64) -> Result<RasterGrid> {
    height.require_single_channel("bilateral filter input")?;
    if !(spatial_sigma.is_finite() && spatial_sigma > 0.0) || range_sigma.is_nan() || range_sigma <= 0.0 {
        return Err(invalid(format!(
            "bilateral sigmas must be positive, got {spatial_sigma} and {range_sigma}"
        )));
    }
    let radius = (3.0 * spatial_sigma).ceil() as isize;
    let (h, w) = (height.height() as isize, height.width() as isize);
    let side = (2 * radius + 1) as usize;
    let mut spatial = Vec::with_capacity(side * side);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            spatial.push((-((dr * dr + dc * dc) as f64) / (2.0 * spatial_sigma * spatial_sigma)).exp());
        }
    }
    let inv_range = 1.0 / (2.0 * range_sigma * range_sigma);
    let src = height.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for c in 0..w {
            let center = src[(r * w + c) as usize] as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for dr in -radius..=radius {
                let rr = r + dr;
                if rr < 0 || rr >= h {
                    continue;
                }
                for dc in -radius..=radius {
                    let cc = c + dc;
                    if cc < 0 || cc >= w {
                        continue;
                    }
                    let v = src[(rr * w + cc) as usize] as f64;
                    let d = v - center;
                    let k = spatial[((dr + radius) as usize) * side + (dc + radius) as usize]
                        * (-(d * d) * inv_range).exp();
                    num += k * v;
                    den += k;
                }
            }
            out.push((num / den) as f32);
        }
    }
    RasterGrid::new(height.height(), height.width(), 1, height.gsd_m(), out)
}

/// Non-local means with Gaussian-weighted patch distances.
///
/// Patches use replicate padding at the borders; the search window is clipped
/// to the image. The patch kernel sigma is half the patch radius (at least 0.5).
pub fn nonlocal_means(height: &RasterGrid, patch: usize, search: usize, h_param: f64) -> Result<RasterGrid> {
    height.require_single_channel("non-local means input")?;
    if patch.is_multiple_of(2) || search.is_multiple_of(2) {
        return Err(invalid("patch and search sizes must be odd"));
    }
    let min_side = height.height().min(height.width());
    if patch > min_side || search > min_side {
        return Err(invalid(format!(
            "patch {patch} or search {search} exceeds image size {}x{}",
            height.height(),
            height.width()
        )));
    }
    if !(h_param.is_finite() && h_param > 0.0) {
        return Err(invalid(format!("filter strength must be positive, got {h_param}")));
    }
    let (h, w) = (height.height() as isize, height.width() as isize);
    let pr = (patch / 2) as isize;
    let sr = (search / 2) as isize;
    let sigma = (pr as f64 / 2.0).max(0.5);
    let mut kernel = Vec::with_capacity(patch * patch);
    for dr in -pr..=pr {
        for dc in -pr..=pr {
            kernel.push((-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);

    let src = height.data();
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h - 1);
        let c = c.clamp(0, w - 1);
        src[(r * w + c) as usize] as f64
    };
    let inv_h2 = 1.0 / (h_param * h_param);
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for c in 0..w {
            let (mut num, mut den) = (0.0, 0.0);
            for qr in (r - sr).max(0)..=(r + sr).min(h - 1) {
                for qc in (c - sr).max(0)..=(c + sr).min(w - 1) {
                    let mut d2 = 0.0;
                    let mut k = 0;
                    for dr in -pr..=pr {
                        for dc in -pr..=pr {
                            let d = at(r + dr, c + dc) - at(qr + dr, qc + dc);
                            d2 += kernel[k] * d * d;
                            k += 1;
                        }
                    }
                    let wgt = (-d2 * inv_h2).exp();
                    num += wgt * at(qr, qc);
                    den += wgt;
                }
            }
            out.push((num / den) as f32);
        }
    }
    RasterGrid::new(height.height(), height.width(), 1, height.gsd_m(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn variance(v: &[f32]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn constant_grid_unchanged() {
        let g = RasterGrid::filled(12, 9, 1, 0.5, 4.25).unwrap();
        let b = bilateral_filter(&g, 1.5, 0.3).unwrap();
        assert!(b.max_abs_diff(&g).unwrap() < 1e-6);
        let n = nonlocal_means(&g, 3, 7, 0.5).unwrap();
        assert!(n.max_abs_diff(&g).unwrap() < 1e-6);
    }

    #[test]
    fn bilateral_preserves_step_edge() {
        let g = RasterGrid::from_fn(16, 16, 1.0, |_, c| if c < 8 { 0.0 } else { 10.0 }).unwrap();
        let b = bilateral_filter(&g, 2.0, 0.1).unwrap();
        for r in 0..16 {
            assert!(b.get(r, 7, 0).abs() < 0.1);
            assert!((b.get(r, 8, 0) - 10.0).abs() < 0.1);
        }
    }

    #[test]
    fn infinite_range_sigma_is_gaussian_blur() {
        let g = RasterGrid::from_fn(9, 9, 1.0, |r, c| ((r * 7 + c * 3) % 5) as f32).unwrap();
        let sigma = 1.0;
        let b = bilateral_filter(&g, sigma, f64::INFINITY).unwrap();
        // independent blur: explicit in-bounds normalized Gaussian
        for r in 0..9isize {
            for c in 0..9isize {
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for rr in 0..9isize {
                    for cc in 0..9isize {
                        let d2 = ((rr - r).pow(2) + (cc - c).pow(2)) as f64;
                        if (rr - r).abs() > 3 || (cc - c).abs() > 3 {
                            continue;
                        }
                        let k = (-d2 / 2.0).exp();
                        num += k * g.get(rr as usize, cc as usize, 0) as f64;
                        den += k;
                    }
                }
                assert!((b.get(r as usize, c as usize, 0) as f64 - num / den).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parameters_validated() {
        let g = RasterGrid::zeros(8, 8, 1, 1.0).unwrap();
        assert!(bilateral_filter(&g, 0.0, 1.0).is_err());
        assert!(bilateral_filter(&g, 1.0, -1.0).is_err());
        assert!(nonlocal_means(&g, 3, 9, 1.0).is_err());
        assert!(nonlocal_means(&g, 4, 5, 1.0).is_err());
        assert!(nonlocal_means(&g, 3, 5, 0.0).is_err());
        assert!(bilateral_filter(&RasterGrid::zeros(4, 4, 2, 1.0).unwrap(), 1.0, 1.0).is_err());
    }

    #[test]
    fn nlm_reduces_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0f32, 0.5).unwrap();
        let g = RasterGrid::from_fn(32, 32, 1.0, |_, _| 3.0 + noise.sample(&mut rng)).unwrap();
        let n = nonlocal_means(&g, 3, 9, 1.0).unwrap();
        assert!(variance(n.data()) < variance(g.data()));
    }

    #[test]
    fn nlm_recovers_periodic_texture() {
        let sigma = 0.3f32;
        let clean = RasterGrid::from_fn(40, 40, 1.0, |r, c| if (r / 4 + c / 4) % 2 == 0 { 0.0 } else { 2.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0f32, sigma).unwrap();
        let noisy =
            RasterGrid::from_fn(40, 40, 1.0, |r, c| clean.get(r, c, 0) + noise.sample(&mut rng)).unwrap();
        let out = nonlocal_means(&noisy, 5, 13, 0.6).unwrap();
        let mse: f64 = out
            .data()
            .iter()
            .zip(clean.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / clean.data().len() as f64;
        assert!(mse < (sigma * sigma) as f64, "mse {mse}");
    }
}
