//! Full-tile reconstruction, evaluation metrics, MC-dropout uncertainty and
//! the ablation report.

mod denoise;
mod metrics;
mod report;

pub use denoise::{bilateral_filter, nonlocal_means, BilateralParams, NlmParams};
pub use metrics::{
    confusion_matrix, height_metrics, semantic_metrics, HeightErrorSums, HeightMetrics,
    SemanticMetrics,
};
pub use report::{
    ablation_csv, ablation_report, standard_variants, AblationConfig, AblationModels, AblationRow,
    GroundTruthPredictor, HeightPredictor, PostFilter, RefinedPredictor, Stage1Predictor, Variant,
};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::error::{invalid, shape, Result};
use crate::nn::{
    grids_to_tensor, refiner_input, tensor_to_grids, Dropout, MultiTaskModel, RefinerModel,
};
use crate::raster::{
    gaussian_window, window_origins, Crop, LabelGrid, NormalMap, RasterGrid, StitchAccumulator,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub crop_size: usize,
    pub step_px: usize,
    /// Gaussian blending sigma; `None` means a quarter of the crop size.
    pub blend_sigma_px: Option<f64>,
    /// Crops per forward pass.
    pub batch_size: usize,
    /// Clamp negative predicted heights to zero.
    pub clamp_negative: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            crop_size: 320,
            step_px: 60,
            blend_sigma_px: None,
            batch_size: 8,
            clamp_negative: true,
        }
    }
}

impl ReconstructionConfig {
    pub fn sigma(&self) -> f64 {
        self.blend_sigma_px.unwrap_or(self.crop_size as f64 / 4.0)
    }

    pub fn with_step(&self, step_px: usize) -> Self {
        Self {
            step_px,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.step_px == 0 || self.batch_size == 0 {
            return Err(invalid("crop size, step and batch size must be positive"));
        }
        if self.step_px > self.crop_size {
            return Err(invalid(format!(
                "step {} exceeds crop size {}: coverage gaps",
                self.step_px, self.crop_size
            )));
        }
        if !(self.sigma().is_finite() && self.sigma() > 0.0) {
            return Err(invalid("blend sigma must be positive"));
        }
        Ok(())
    }

    /// Every window origin `(row, col)` for a tile, row-major.
    pub fn windows(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let rows = window_origins(height, self.crop_size, self.step_px)?;
        let cols = window_origins(width, self.crop_size, self.step_px)?;
        Ok(rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect())
    }
}

/// Blends per-window predictions over a whole tile. `predict` receives a
/// batch of window origins and returns one crop per origin.
pub fn reconstruct(
    height: usize,
    width: usize,
    channels: usize,
    gsd_m: f32,
    cfg: &ReconstructionConfig,
    mut predict: impl FnMut(&[(usize, usize)]) -> Result<Vec<RasterGrid>>,
) -> Result<RasterGrid> {
    let windows = cfg.windows(height, width)?;
    let weights = gaussian_window(cfg.crop_size, cfg.sigma())?;
    let mut acc = StitchAccumulator::new(weights, height, width, channels, gsd_m)?;
    for batch in windows.chunks(cfg.batch_size) {
        let crops = predict(batch)?;
        if crops.len() != batch.len() {
            return Err(shape(format!(
                "predictor returned {} crops for {} windows",
                crops.len(),
                batch.len()
            )));
        }
        for (grid, &(row, col)) in crops.iter().zip(batch) {
            acc.add(Crop { grid, row, col })?;
        }
    }
    acc.finish()?.into_full()
}

/// Full-tile outputs of the two-stage model.
#[derive(Debug, Clone)]
pub struct TilePrediction {
    pub height: RasterGrid,
    pub refined_height: Option<RasterGrid>,
    /// Blended class probabilities, one channel per class.
    pub probabilities: RasterGrid,
    pub labels: LabelGrid,
    pub normals: NormalMap,
}

impl TilePrediction {
    /// Refined heights when a refiner ran, stage-1 heights otherwise.
    pub fn best_height(&self) -> &RasterGrid {
        self.refined_height.as_ref().unwrap_or(&self.height)
    }
}

fn check_tile(model: &MultiTaskModel, rgb: &RasterGrid, cfg: &ReconstructionConfig) -> Result<()> {
    cfg.validate()?;
    if rgb.channels() != 3 {
        return Err(shape(format!("expected an RGB tile, got {} channels", rgb.channels())));
    }
    let (h, w, _) = model.spec.input_size;
    if (h, w) != (cfg.crop_size, cfg.crop_size) {
        return Err(invalid(format!(
            "model input is {h}x{w} but reconstruction crop is {}",
            cfg.crop_size
        )));
    }
    if rgb.height() < cfg.crop_size || rgb.width() < cfg.crop_size {
        return Err(invalid(format!(
            "tile {}x{} smaller than crop {}",
            rgb.height(),
            rgb.width(),
            cfg.crop_size
        )));
    }
    Ok(())
}

fn crop_batch(rgb: &RasterGrid, origins: &[(usize, usize)], size: usize, model: &MultiTaskModel) -> Result<Tensor> {
    let crops = origins
        .iter()
        .map(|&(r, c)| rgb.crop(r, c, size, size))
        .collect::<Result<Vec<_>>>()?;
    grids_to_tensor(&crops.iter().collect::<Vec<_>>(), model.params.dtype())
}

fn argmax_labels(probs: &RasterGrid) -> Result<LabelGrid> {
    let c = probs.channels();
    let labels = probs
        .data()
        .chunks_exact(c)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if p[k] > p[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    LabelGrid::new(probs.height(), probs.width(), c, labels)
}

fn clamp_heights(grid: RasterGrid, on: bool) -> Result<RasterGrid> {
    if on {
        grid.map(|v| v.max(0.0))
    } else {
        Ok(grid)
    }
}

/// Sliding-window prediction of a whole tile with Gaussian blending.
pub fn predict_tile(
    stage1: &MultiTaskModel,
    refiner: Option<&RefinerModel>,
    rgb: &RasterGrid,
    cfg: &ReconstructionConfig,
) -> Result<TilePrediction> {
    check_tile(stage1, rgb, cfg)?;
    let (h, w, gsd) = (rgb.height(), rgb.width(), rgb.gsd_m());
    let nc = stage1.spec.num_classes;
    let encoding = stage1.spec.normal_encoding;
    let windows = cfg.windows(h, w)?;
    let weights = gaussian_window(cfg.crop_size, cfg.sigma())?;
    let mut acc_h = StitchAccumulator::new(weights.clone(), h, w, 1, gsd)?;
    let mut acc_s = StitchAccumulator::new(weights.clone(), h, w, nc, gsd)?;
    let mut acc_n = StitchAccumulator::new(weights.clone(), h, w, 3, gsd)?;
    let mut acc_r = match refiner {
        Some(_) => Some(StitchAccumulator::new(weights, h, w, 1, gsd)?),
        None => None,
    };

    for batch in windows.chunks(cfg.batch_size) {
        let x = crop_batch(rgb, batch, cfg.crop_size, stage1)?;
        let out = stage1.forward(&x, &mut Dropout::Off)?;
        let heights = tensor_to_grids(&out.height, gsd)?;
        let probs = tensor_to_grids(&out.semantic, gsd)?;
        let normals = tensor_to_grids(&out.normals, gsd)?;
        let refined = match refiner {
            Some(r) => Some(tensor_to_grids(&r.forward(&refiner_input(&x, &out)?)?, gsd)?),
            None => None,
        };
        for (i, &(row, col)) in batch.iter().enumerate() {
            acc_h.add(Crop { grid: &heights[i], row, col })?;
            acc_s.add(Crop { grid: &probs[i], row, col })?;
            acc_n.add(Crop { grid: &normals[i], row, col })?;
            if let (Some(acc), Some(r)) = (acc_r.as_mut(), refined.as_ref()) {
                acc.add(Crop { grid: &r[i], row, col })?;
            }
        }
    }

    let probabilities = acc_s.finish()?.into_full()?;
    let labels = argmax_labels(&probabilities)?;
    let blended_normals = acc_n.finish()?.into_full()?;
    let unit: Vec<f32> = blended_normals
        .data()
        .chunks_exact(3)
        .flat_map(|e| encoding.encode(encoding.decode([e[0], e[1], e[2]])))
        .collect();
    let normals = NormalMap {
        grid: RasterGrid::new(h, w, 3, gsd, unit)?,
        encoding,
    };
    Ok(TilePrediction {
        height: clamp_heights(acc_h.finish()?.into_full()?, cfg.clamp_negative)?,
        refined_height: match acc_r {
            Some(acc) => Some(clamp_heights(acc.finish()?.into_full()?, cfg.clamp_negative)?),
            None => None,
        },
        probabilities,
        labels,
        normals,
    })
}

/// Blended stage-1 heights with dropout active, one random stream per pass.
fn stochastic_height(
    model: &MultiTaskModel,
    rgb: &RasterGrid,
    cfg: &ReconstructionConfig,
    seed: u64,
) -> Result<RasterGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reconstruct(rgb.height(), rgb.width(), 1, rgb.gsd_m(), cfg, |batch| {
        let x = crop_batch(rgb, batch, cfg.crop_size, model)?;
        let out = model.forward(&x, &mut Dropout::On(&mut rng))?;
        tensor_to_grids(&out.height, rgb.gsd_m())
    })
}

/// Per-pixel variance across stochastic passes, one pass per seed.
pub fn uncertainty_map_with_seeds(
    model: &MultiTaskModel,
    rgb: &RasterGrid,
    cfg: &ReconstructionConfig,
    seeds: &[u64],
) -> Result<RasterGrid> {
    if seeds.len() < 2 {
        return Err(invalid(format!("uncertainty needs at least 2 passes, got {}", seeds.len())));
    }
    check_tile(model, rgb, cfg)?;
    let n = rgb.height() * rgb.width();
    let mut mean = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    for (t, &seed) in seeds.iter().enumerate() {
        let pass = stochastic_height(model, rgb, cfg, seed)?;
        let k = (t + 1) as f64;
        for (i, &v) in pass.data().iter().enumerate() {
            let v = v as f64;
            let delta = v - mean[i];
            mean[i] += delta / k;
            m2[i] += delta * (v - mean[i]);
        }
    }
    let t = seeds.len() as f64;
    let var = m2.iter().map(|&s| (s / t) as f32).collect();
    RasterGrid::new(rgb.height(), rgb.width(), 1, rgb.gsd_m(), var)
}

/// MC-dropout uncertainty: population variance of `passes` blended height maps.
pub fn uncertainty_map(
    model: &MultiTaskModel,
    rgb: &RasterGrid,
    passes: usize,
    cfg: &ReconstructionConfig,
    seed: u64,
) -> Result<RasterGrid> {
    let seeds: Vec<u64> = (0..passes as u64).map(|t| derive_seed(seed, t)).collect();
    uncertainty_map_with_seeds(model, rgb, cfg, &seeds)
}

/// Pixels of `class` with at least one 4-neighbor of another class.
pub fn class_boundary_mask(labels: &LabelGrid, class: u16) -> Vec<bool> {
    let (h, w) = (labels.height(), labels.width());
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if labels.get(r, c) != class {
                continue;
            }
            let n = [
                (r > 0).then(|| labels.get(r - 1, c)),
                (r + 1 < h).then(|| labels.get(r + 1, c)),
                (c > 0).then(|| labels.get(r, c - 1)),
                (c + 1 < w).then(|| labels.get(r, c + 1)),
            ];
            mask[r * w + c] = n.iter().flatten().any(|&l| l != class);
        }
    }
    mask
}

/// Mean of a single-channel grid over the selected pixels.
pub fn masked_mean(grid: &RasterGrid, mask: &[bool]) -> Option<f64> {
    let (sum, n) = grid
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}
