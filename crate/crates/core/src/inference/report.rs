use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::denoise::{bilateral_filter, nonlocal_means, BilateralParams, NlmParams};
use super::metrics::{HeightErrorSums, HeightMetrics};
use super::{predict_tile, reconstruct, ReconstructionConfig};
use crate::data::SceneTile;
use crate::error::{invalid, Result};
use crate::nn::{MultiTaskModel, RefinerModel};
use crate::raster::RasterGrid;

/// Anything that turns a scene tile into a full-tile height map.
pub trait HeightPredictor {
    fn predict_height(&self, tile: &SceneTile, cfg: &ReconstructionConfig) -> Result<RasterGrid>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PostFilter {
    None,
    Bilateral(BilateralParams),
    Nlm(NlmParams),
}

/// Stage-1 heights, optionally smoothed by a classical filter.
pub struct Stage1Predictor<'a> {
    pub model: &'a MultiTaskModel,
    pub post: PostFilter,
}

impl HeightPredictor for Stage1Predictor<'_> {
    fn predict_height(&self, tile: &SceneTile, cfg: &ReconstructionConfig) -> Result<RasterGrid> {
        let h = predict_tile(self.model, None, &tile.rgb, cfg)?.height;
        match self.post {
            PostFilter::None => Ok(h),
            PostFilter::Bilateral(p) => bilateral_filter(&h, p.spatial_sigma, p.range_sigma),
            PostFilter::Nlm(p) => nonlocal_means(&h, p.patch, p.search, p.h),
        }
    }
}

pub struct RefinedPredictor<'a> {
    pub stage1: &'a MultiTaskModel,
    pub refiner: &'a RefinerModel,
}

impl HeightPredictor for RefinedPredictor<'_> {
    fn predict_height(&self, tile: &SceneTile, cfg: &ReconstructionConfig) -> Result<RasterGrid> {
        let p = predict_tile(self.stage1, Some(self.refiner), &tile.rgb, cfg)?;
        Ok(p.refined_height.expect("refiner supplied"))
    }
}

/// Returns ground-truth crops through the same window blending; a reference
/// row whose errors must be zero.
pub struct GroundTruthPredictor;

impl HeightPredictor for GroundTruthPredictor {
    fn predict_height(&self, tile: &SceneTile, cfg: &ReconstructionConfig) -> Result<RasterGrid> {
        let gt = &tile.height_gt;
        reconstruct(gt.height(), gt.width(), 1, gt.gsd_m(), cfg, |batch| {
            batch
                .iter()
                .map(|&(r, c)| gt.crop(r, c, cfg.crop_size, cfg.crop_size))
                .collect()
        })
    }
}

/// One labelled row group of the report.
pub struct Variant<'a> {
    pub label: String,
    pub predictor: Box<dyn HeightPredictor + 'a>,
    pub steps: Vec<usize>,
}

#[derive(Default, Clone, Copy)]
pub struct AblationModels<'a> {
    pub multitask: Option<&'a MultiTaskModel>,
    /// Trained with the semantic and normal terms weighted to zero.
    pub single_task: Option<&'a MultiTaskModel>,
    pub refiner: Option<&'a RefinerModel>,
    /// Refiner that only sees the stage-1 height channel.
    pub single_input_refiner: Option<&'a RefinerModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Base reconstruction settings; `step_px` is the step for single-step rows.
    pub recon: ReconstructionConfig,
    /// Steps swept for the refined variant.
    pub steps: Vec<usize>,
    pub bilateral: BilateralParams,
    pub nlm: NlmParams,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            recon: ReconstructionConfig::default(),
            steps: vec![40, 60, 80],
            bilateral: BilateralParams::default(),
            nlm: NlmParams::default(),
        }
    }
}

/// The report's standard variants for whichever models are available.
pub fn standard_variants<'a>(models: &AblationModels<'a>, cfg: &AblationConfig) -> Vec<Variant<'a>> {
    let main = vec![cfg.recon.step_px];
    let mut out: Vec<Variant<'a>> = Vec::new();
    let mut push = |label: &str, p: Option<Box<dyn HeightPredictor + 'a>>, steps: &[usize]| match p {
        Some(predictor) => out.push(Variant {
            label: label.to_string(),
            predictor,
            steps: steps.to_vec(),
        }),
        None => log::warn!("ablation variant '{label}' skipped: model not supplied"),
    };
    let stage1 = |post| {
        models
            .multitask
            .map(|model| Box::new(Stage1Predictor { model, post }) as Box<dyn HeightPredictor + 'a>)
    };
    push("multi-task", stage1(PostFilter::None), &main);
    push("multi-task + BF", stage1(PostFilter::Bilateral(cfg.bilateral)), &main);
    push("multi-task + NLM", stage1(PostFilter::Nlm(cfg.nlm)), &main);
    let refined = |r: Option<&'a RefinerModel>| match (models.multitask, r) {
        (Some(stage1), Some(refiner)) => {
            Some(Box::new(RefinedPredictor { stage1, refiner }) as Box<dyn HeightPredictor + 'a>)
        }
        _ => None,
    };
    push("multi-task + Unet", refined(models.refiner), &cfg.steps);
    push(
        "single-task",
        models.single_task.map(|model| {
            Box::new(Stage1Predictor {
                model,
                post: PostFilter::None,
            }) as Box<dyn HeightPredictor + 'a>
        }),
        &main,
    );
    push("single-input Unet", refined(models.single_input_refiner), &main);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub step_px: usize,
    pub metrics: HeightMetrics,
}

/// Pixel-pooled height metrics of every variant over the test tiles.
pub fn ablation_report(
    variants: &[Variant<'_>],
    tiles: &[SceneTile],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    if tiles.is_empty() {
        return Err(invalid("ablation needs at least one test tile"));
    }
    let mut rows = Vec::new();
    for v in variants {
        for &step in &v.steps {
            let recon = cfg.recon.with_step(step);
            let mut sums = HeightErrorSums::default();
            for tile in tiles {
                let pred = v.predictor.predict_height(tile, &recon)?;
                sums.add(&pred, &tile.height_gt)?;
            }
            rows.push(AblationRow {
                variant: v.label.clone(),
                step_px: step,
                metrics: sums.metrics()?,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,step_px,mse,mae,rmse\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            r.variant, r.step_px, r.metrics.mse, r.metrics.mae, r.metrics.rmse
        );
    }
    s
}
