//! Pipeline configuration: a preset expanded to a full TOML tree, with the
//! user's file merged on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{HeightSource, SceneSources, SynthParams};
use crate::error::{Error, Result};
use crate::inference::{BilateralParams, NlmParams, ReconstructionConfig};
use crate::nn::{MultiTaskSpec, RefinerSpec};
use crate::raster::NormalOptions;
use crate::training::{LossWeights, Stage2Inputs, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small widths and crops, trainable on one CPU core.
    #[default]
    Desk,
    /// Published layer widths, 320 px crops and batch 64. Not desk-runnable.
    PaperReference,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-reference" => Ok(Preset::PaperReference),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected desk or paper-reference)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Procedural tiles generated by `synth`.
    Synth,
    /// Tiles listed under `dataset.files`.
    Files,
}

/// One on-disk tile. Either `ndsm` or both `dsm` and `dem` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTile {
    pub id: String,
    pub rgb: PathBuf,
    pub labels: PathBuf,
    pub ndsm: Option<PathBuf>,
    pub dsm: Option<PathBuf>,
    pub dem: Option<PathBuf>,
}

impl FileTile {
    pub fn sources(&self) -> Result<SceneSources> {
        let height = match (&self.ndsm, &self.dsm, &self.dem) {
            (Some(p), None, None) => HeightSource::Ndsm(p.clone()),
            (None, Some(dsm), Some(dem)) => HeightSource::DsmDem {
                dsm: dsm.clone(),
                dem: dem.clone(),
            },
            _ => {
                return Err(Error::Config(format!(
                    "tile {}: give either ndsm or both dsm and dem",
                    self.id
                )))
            }
        };
        Ok(SceneSources {
            rgb: self.rgb.clone(),
            height,
            labels: self.labels.clone(),
        })
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        [Some(&self.rgb), Some(&self.labels), self.ndsm.as_ref(), self.dsm.as_ref(), self.dem.as_ref()]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Synthetic tiles to generate.
    pub n_tiles: usize,
    /// Side length of each synthetic tile in pixels.
    pub tile_size: usize,
    /// When the split lists are empty, the last `test_tiles` synthetic tiles are held out.
    pub test_tiles: usize,
    /// Random crops drawn from each training tile.
    pub crops_per_tile: usize,
    pub split: SplitLists,
    /// Ground-sample distance of the height and label rasters (file source).
    pub gsd_m: f32,
    /// RGB resolution factor over the height raster (file source).
    pub rgb_downsample: usize,
    /// Label images are color-coded with `palette` rather than grayscale indices (file source).
    pub label_colors: bool,
    /// Ground-truth normal generation for every tile; overrides `synth.normals`.
    pub normals: NormalOptions,
    pub synth: SynthParams,
    pub files: Vec<FileTile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub multitask: MultiTaskSpec,
    pub refiner: RefinerSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Equalize the three terms from their means at initialization.
    Auto,
    /// Use `w1`, `w2`, `w3` as given.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightConfig {
    pub mode: WeightMode,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Batches averaged when `mode = "auto"`.
    pub probe_batches: usize,
}

impl LossWeightConfig {
    pub fn fixed(&self) -> Result<LossWeights> {
        LossWeights::new(self.w1, self.w2, self.w3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub loss_weights: LossWeightConfig,
    pub stage2_inputs: Stage2Inputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bilateral: BilateralParams,
    pub nlm: NlmParams,
    /// Stochastic forward passes for the uncertainty map.
    pub uncertainty_passes: usize,
    /// Steps swept by the refined row of the ablation report.
    pub ablation_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub num_classes: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub recon: ReconstructionConfig,
    pub eval: EvalConfig,
    /// Class index to RGB, used for semantic point clouds and label images.
    pub palette: Vec<[u8; 3]>,
}

pub const DEFAULT_PALETTE: [[u8; 3]; 6] = [
    [0, 170, 0],
    [150, 150, 150],
    [210, 60, 50],
    [0, 90, 20],
    [230, 210, 0],
    [160, 110, 60],
];

impl PipelineConfig {
    /// Fully expanded preset.
    pub fn preset(preset: Preset, num_classes: usize) -> Self {
        let palette = (0..num_classes)
            .map(|k| DEFAULT_PALETTE.get(k).copied().unwrap_or([(37 * k % 256) as u8, (91 * k % 256) as u8, (173 * k % 256) as u8]))
            .collect();
        let dataset = DatasetConfig {
            source: DatasetSource::Synth,
            n_tiles: 10,
            tile_size: 192,
            test_tiles: 2,
            crops_per_tile: 128,
            split: SplitLists::default(),
            gsd_m: 1.0,
            rgb_downsample: 1,
            label_colors: false,
            normals: NormalOptions::default(),
            synth: SynthParams::default(),
            files: Vec::new(),
        };
        let weights = LossWeightConfig {
            mode: WeightMode::Auto,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            probe_batches: 4,
        };
        let eval = EvalConfig {
            bilateral: BilateralParams::default(),
            nlm: NlmParams::default(),
            uncertainty_passes: 20,
            ablation_steps: vec![40, 60, 80],
        };
        match preset {
            Preset::Desk => {
                let crop = 64;
                let stage1 = TrainConfig {
                    learning_rate: 2e-3,
                    steps_per_epoch: Some(32),
                    ..TrainConfig::desk()
                };
                Self {
                    preset,
                    seed: 0,
                    num_classes,
                    dataset,
                    model: ModelConfig {
                        multitask: MultiTaskSpec::desk(num_classes, crop),
                        refiner: RefinerSpec::desk(num_classes, crop),
                    },
                    train: TrainSection {
                        stage2: TrainConfig {
                            learning_rate: 1e-3,
                            epochs: 10,
                            ..stage1.clone()
                        },
                        stage1,
                        loss_weights: weights,
                        stage2_inputs: Stage2Inputs::Cached,
                    },
                    recon: ReconstructionConfig {
                        crop_size: crop,
                        step_px: 12,
                        ..ReconstructionConfig::default()
                    },
                    // the 40/60/80 steps scaled from 320 px crops to 64 px
                    eval: EvalConfig {
                        ablation_steps: vec![8, 12, 16],
                        ..eval
                    },
                    palette,
                }
            }
            Preset::PaperReference => Self {
                preset,
                seed: 0,
                num_classes,
                dataset: DatasetConfig {
                    n_tiles: 20,
                    tile_size: 1190,
                    test_tiles: 4,
                    crops_per_tile: 256,
                    ..dataset
                },
                model: ModelConfig {
                    multitask: MultiTaskSpec::paper_reference(num_classes),
                    refiner: RefinerSpec::paper_reference(num_classes),
                },
                train: TrainSection {
                    stage1: TrainConfig::default(),
                    stage2: TrainConfig::default(),
                    loss_weights: weights,
                    stage2_inputs: Stage2Inputs::OnTheFly,
                },
                recon: ReconstructionConfig::default(),
                eval,
                palette,
            },
        }
    }

    /// Preset chosen by `preset_override`, else the file's `preset` key, else
    /// desk; the user's TOML is then merged over it key by key.
    pub fn resolve(user_toml: Option<&str>, preset_override: Option<Preset>) -> Result<Self> {
        let user: toml::Table = match user_toml {
            Some(text) => toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?,
            None => toml::Table::new(),
        };
        let preset = match (preset_override, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| Error::Config("preset must be a string".into()))?
                .parse()?,
            (None, None) => Preset::Desk,
        };
        let num_classes = match user.get("num_classes") {
            Some(v) => v
                .as_integer()
                .filter(|&n| n >= 2)
                .ok_or_else(|| Error::Config("num_classes must be an integer >= 2".into()))?
                as usize,
            None => 6,
        };
        let base = Self::preset(preset, num_classes);
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("preset".into(), toml::Value::try_from(preset).map_err(|e| Error::Config(e.to_string()))?);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset_override: Option<Preset>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), preset_override)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn crop_size(&self) -> usize {
        self.model.multitask.input_size.0
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.model.multitask.validate()?;
        self.model.refiner.validate()?;
        self.train.stage1.validate()?;
        self.train.stage2.validate()?;
        self.recon.validate()?;
        let nc = self.num_classes;
        if self.model.multitask.num_classes != nc || self.model.refiner.num_classes != nc {
            return cfg_err(format!("model num_classes must equal num_classes = {nc}"));
        }
        let (h, w, _) = self.model.multitask.input_size;
        if h != w {
            return cfg_err(format!("crops must be square, got {h}x{w}"));
        }
        let sizes = [
            ("model.refiner.input_size", self.model.refiner.input_size.0),
            ("train.stage1.crop_size", self.train.stage1.crop_size),
            ("train.stage2.crop_size", self.train.stage2.crop_size),
            ("recon.crop_size", self.recon.crop_size),
        ];
        for (key, s) in sizes {
            if s != h {
                return cfg_err(format!("{key} = {s} differs from the model crop size {h}"));
            }
        }
        if self.model.refiner.input_size.1 != h {
            return cfg_err("model.refiner.input_size must be square".into());
        }
        if self.model.multitask.normal_encoding != self.dataset.normals.encoding {
            return cfg_err("model.multitask.normal_encoding differs from dataset.normals.encoding".into());
        }
        if self.palette.len() < nc {
            return cfg_err(format!("palette has {} colors for {nc} classes", self.palette.len()));
        }
        if self.eval.ablation_steps.iter().any(|&s| s == 0 || s > h) {
            return cfg_err(format!("eval.ablation_steps must lie in 1..={h}"));
        }
        if self.train.loss_weights.mode == WeightMode::Fixed {
            self.train.loss_weights.fixed()?;
        }
        if self.train.loss_weights.probe_batches == 0 {
            return cfg_err("train.loss_weights.probe_batches must be positive".into());
        }
        let ds = &self.dataset;
        if ds.crops_per_tile == 0 {
            return cfg_err("dataset.crops_per_tile must be positive".into());
        }
        match ds.source {
            DatasetSource::Synth => {
                if ds.tile_size < h {
                    return cfg_err(format!("dataset.tile_size {} below crop size {h}", ds.tile_size));
                }
                if ds.split.train.is_empty() && ds.test_tiles >= ds.n_tiles {
                    return cfg_err(format!(
                        "dataset.test_tiles = {} leaves no training tiles out of {}",
                        ds.test_tiles, ds.n_tiles
                    ));
                }
            }
            DatasetSource::Files => {
                if ds.files.is_empty() {
                    return cfg_err("dataset.source = \"files\" needs [[dataset.files]] entries".into());
                }
                for t in &ds.files {
                    t.sources()?;
                    if let Some(p) = t.paths().find(|p| !p.exists()) {
                        return cfg_err(format!("tile {}: {} does not exist", t.id, p.display()));
                    }
                }
                let ids: Vec<&str> = ds.files.iter().map(|t| t.id.as_str()).collect();
                if let Some(t) = ds.split.train.iter().chain(&ds.split.test).find(|t| !ids.contains(&t.as_str())) {
                    return cfg_err(format!("split references unknown tile {t}"));
                }
                if ds.split.train.is_empty() {
                    return cfg_err("file datasets need dataset.split.train".into());
                }
            }
        }
        if let Some(t) = ds.split.test.iter().find(|t| ds.split.train.contains(t)) {
            return cfg_err(format!("tile {t} is in both train and test splits"));
        }
        Ok(())
    }
}

/// Recursive table merge; `over` wins on every non-table value.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
