//! Artifact layout and the end-to-end steps behind each CLI command:
//! dataset generation and loading, two-stage training, prediction,
//! evaluation, 3D export and the simulated flight.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, PipelineConfig, WeightMode};
use crate::data::{derive_seed, load_scene, sample_crops, synth_city, CropSample, LoadConfig, SceneTile, SynthParams};
use crate::error::{invalid, Error, Result};
use crate::inference::{
    ablation_csv, ablation_report, confusion_matrix, predict_tile, standard_variants, uncertainty_map,
    AblationConfig, AblationModels, AblationRow, HeightErrorSums, HeightMetrics, SemanticMetrics,
    TilePrediction,
};
use crate::nn::checkpoint::{load_multitask, load_refiner, save_multitask, save_refiner};
use crate::nn::{MultiTaskModel, RefinerInputMode, RefinerModel, RefinerSpec};
use crate::raster::{hmap, imageio, LabelGrid, NormalMap, NormalOptions, RasterGrid};
use crate::recon3d::{
    fuse_flight, grid_mesh, heightmap_to_pointcloud, simulate_flight, write_cloud_ply, write_mesh_ply,
    CloudAttributes, FlightPlan, FusedFlight, Pose,
};
use crate::training::{
    append_metrics, auto_balance_weights, probe_batches, train_stage1, train_stage2, EpochPlan, EpochRecord,
    LossWeights, Stage1Source, TrainConfig,
};

// seed streams derived from the master seed
pub const STREAM_CROPS: u64 = 1;
pub const STREAM_INIT_MULTITASK: u64 = 2;
pub const STREAM_INIT_REFINER: u64 = 3;
pub const STREAM_TRAIN1: u64 = 4;
pub const STREAM_TRAIN2: u64 = 5;
pub const STREAM_INIT_SINGLE_TASK: u64 = 6;
pub const STREAM_INIT_SINGLE_INPUT: u64 = 7;
pub const STREAM_UNCERTAINTY: u64 = 8;

/// Where every artifact of one run lives under the output directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn multitask_ckpt(&self) -> PathBuf {
        self.checkpoints().join("multitask.ckpt")
    }

    pub fn refiner_ckpt(&self) -> PathBuf {
        self.checkpoints().join("refiner.ckpt")
    }

    pub fn single_task_ckpt(&self) -> PathBuf {
        self.checkpoints().join("single_task.ckpt")
    }

    pub fn single_input_refiner_ckpt(&self) -> PathBuf {
        self.checkpoints().join("refiner_single_input.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn loss_weights(&self) -> PathBuf {
        self.root.join("loss_weights.toml")
    }

    pub fn predictions(&self, tile_id: &str) -> PathBuf {
        self.root.join("predictions").join(tile_id)
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn export(&self) -> PathBuf {
        self.root.join("export")
    }

    pub fn flight(&self) -> PathBuf {
        self.root.join("flight")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

fn from_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {}", path.display(), e.message())))
}

/// Writes the resolved configuration next to the outputs.
pub fn write_resolved_config(cfg: &PipelineConfig, layout: &RunLayout) -> Result<()> {
    write_text(&layout.resolved_config(), &cfg.to_toml()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTile {
    pub id: String,
    /// Generator seed, stored as a decimal string since TOML integers are signed.
    #[serde(with = "seed_string")]
    pub seed: u64,
    pub split: Split,
    pub buildings: usize,
}

mod seed_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub num_classes: usize,
    pub tile_size: usize,
    pub gsd_m: f32,
    pub tiles: Vec<ManifestTile>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.toml";
}

fn tile_files(dir: &Path, id: &str) -> [PathBuf; 3] {
    ["rgb", "height", "labels"].map(|k| dir.join(format!("{id}_{k}.hmap")))
}

fn synth_params(cfg: &PipelineConfig) -> SynthParams {
    SynthParams {
        normals: cfg.dataset.normals,
        ..cfg.dataset.synth.clone()
    }
}

/// Refuses to touch a non-empty directory unless `force`, in which case it is cleared.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(invalid(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    create_dir(dir)
}

/// Generates the synthetic tiles as HMAP files plus a manifest.
pub fn generate_synth(cfg: &PipelineConfig, dir: &Path, force: bool) -> Result<Manifest> {
    let ds = &cfg.dataset;
    if ds.source != DatasetSource::Synth {
        return Err(Error::Config("synth needs dataset.source = \"synth\"".into()));
    }
    prepare_dir(dir, force)?;
    let params = synth_params(cfg);
    let mut tiles = Vec::with_capacity(ds.n_tiles);
    for i in 0..ds.n_tiles {
        let id = format!("tile_{i:03}");
        let seed = derive_seed(cfg.seed, i as u64);
        let (tile, meta) = synth_city(seed, ds.tile_size, cfg.num_classes, &params)?;
        if meta.degenerate {
            log::warn!("{id} has no buildings");
        }
        let split = if ds.split.train.is_empty() && ds.split.test.is_empty() {
            if i + ds.test_tiles >= ds.n_tiles {
                Split::Test
            } else {
                Split::Train
            }
        } else if ds.split.test.contains(&id) {
            Split::Test
        } else {
            Split::Train
        };
        let [rgb, height, labels] = tile_files(dir, &id);
        hmap::write_raster(&rgb, &tile.rgb)?;
        hmap::write_raster(&height, &tile.height_gt)?;
        hmap::write_labels(&labels, &tile.labels_gt, tile.gsd_m())?;
        tiles.push(ManifestTile {
            id,
            seed,
            split,
            buildings: meta.buildings,
        });
    }
    let manifest = Manifest {
        master_seed: cfg.seed,
        num_classes: cfg.num_classes,
        tile_size: ds.tile_size,
        gsd_m: params.gsd_m,
        tiles,
    };
    write_text(&dir.join(Manifest::FILE), &to_toml(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<SceneTile>,
    pub test: Vec<SceneTile>,
}

impl Dataset {
    pub fn tile(&self, id: &str) -> Option<&SceneTile> {
        self.train.iter().chain(&self.test).find(|t| t.tile_id == id)
    }
}

/// Loads the configured dataset: the synthetic tiles under `dataset_dir`, or
/// the files listed in the config.
pub fn load_dataset(cfg: &PipelineConfig, dataset_dir: &Path) -> Result<Dataset> {
    let split = &cfg.dataset.split;
    let explicit = !split.train.is_empty() || !split.test.is_empty();
    let mut out = Dataset::default();
    match cfg.dataset.source {
        DatasetSource::Synth => {
            let path = dataset_dir.join(Manifest::FILE);
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset manifest; run synth first"),
                ));
            }
            let manifest: Manifest = from_toml(&path)?;
            if manifest.num_classes != cfg.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, config says {}",
                    manifest.num_classes, cfg.num_classes
                )));
            }
            for t in manifest.tiles {
                let [rgb, height, labels] = tile_files(dataset_dir, &t.id);
                let tile = SceneTile::new(
                    t.id.clone(),
                    hmap::read_raster(&rgb)?,
                    hmap::read_raster(&height)?,
                    hmap::read_labels(&labels, cfg.num_classes)?,
                    cfg.dataset.normals,
                )?;
                let is_test = if explicit {
                    split.test.contains(&t.id)
                } else {
                    t.split == Split::Test
                };
                if is_test {
                    out.test.push(tile);
                } else if !explicit || split.train.contains(&t.id) {
                    out.train.push(tile);
                }
            }
        }
        DatasetSource::Files => {
            for f in &cfg.dataset.files {
                let tile = load_scene(
                    &f.sources()?,
                    &LoadConfig {
                        tile_id: f.id.clone(),
                        gsd_m: cfg.dataset.gsd_m,
                        rgb_downsample: cfg.dataset.rgb_downsample,
                        num_classes: cfg.num_classes,
                        palette: cfg.dataset.label_colors.then(|| cfg.palette.clone()),
                        normals: cfg.dataset.normals,
                    },
                )?;
                if split.test.contains(&f.id) {
                    out.test.push(tile);
                } else if split.train.contains(&f.id) {
                    out.train.push(tile);
                }
            }
        }
    }
    Ok(out)
}

/// `crops_per_tile` random crops from every tile, seeded per tile.
pub fn training_crops(tiles: &[SceneTile], crop: usize, per_tile: usize, seed: u64) -> Result<Vec<CropSample>> {
    let mut out = Vec::with_capacity(tiles.len() * per_tile);
    for (i, t) in tiles.iter().enumerate() {
        out.extend(sample_crops(t, per_tile, crop, derive_seed(seed, i as u64))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stages {
    One,
    Two,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub stages: Stages,
    /// Continue from the latest checkpoints up to the configured epoch totals.
    pub resume: bool,
    /// Also train the single-task and single-input models used by the ablation.
    pub ablation_variants: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub weights: Option<LossWeights>,
    pub stage1: Vec<EpochRecord>,
    pub stage2: Vec<EpochRecord>,
}

fn stage_config(base: &TrainConfig, master: u64, stream: u64, done: usize) -> TrainConfig {
    TrainConfig {
        epochs: base.epochs.saturating_sub(done),
        seed: derive_seed(master ^ base.seed, stream),
        ..base.clone()
    }
}

fn missing_checkpoint(path: &Path) -> Error {
    Error::CheckpointMismatch(format!("no checkpoint at {} (run train first)", path.display()))
}

pub fn load_stage1(cfg: &PipelineConfig, path: &Path) -> Result<(MultiTaskModel, usize)> {
    if !path.exists() {
        return Err(missing_checkpoint(path));
    }
    load_multitask(path, Some(&cfg.model.multitask), DType::F32)
}

pub fn load_stage2(spec: &RefinerSpec, path: &Path) -> Result<(RefinerModel, usize)> {
    if !path.exists() {
        return Err(missing_checkpoint(path));
    }
    load_refiner(path, Some(spec), DType::F32)
}

/// The refiner spec with every channel but `P_h` masked out.
pub fn single_input_spec(cfg: &PipelineConfig) -> RefinerSpec {
    RefinerSpec {
        input_mode: RefinerInputMode::HeightOnly,
        ..cfg.model.refiner.clone()
    }
}

/// Stage 1 over `crops`, checkpointing every epoch under `ckpt` (plus an
/// epoch-tagged copy) and appending rows to `metrics` when given.
fn fit_stage1(
    model: &MultiTaskModel,
    crops: &[CropSample],
    tcfg: &TrainConfig,
    weights: LossWeights,
    first_epoch: usize,
    ckpt: &Path,
    metrics: Option<&Path>,
) -> Result<Vec<EpochRecord>> {
    let mut on_epoch = |rec: &EpochRecord| -> Result<()> {
        let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        save_multitask(&ckpt.with_file_name(format!("{stem}_e{:03}.ckpt", rec.epoch)), model, rec.epoch)?;
        save_multitask(ckpt, model, rec.epoch)?;
        match metrics {
            Some(m) => append_metrics(m, &[*rec]),
            None => Ok(()),
        }
    };
    train_stage1(
        model,
        crops,
        tcfg,
        weights,
        EpochPlan {
            first_epoch,
            on_epoch: Some(&mut on_epoch),
        },
    )
}

fn fit_stage2(
    stage1: &MultiTaskModel,
    refiner: &RefinerModel,
    crops: &[CropSample],
    tcfg: &TrainConfig,
    cfg: &PipelineConfig,
    first_epoch: usize,
    ckpt: &Path,
    metrics: Option<&Path>,
) -> Result<Vec<EpochRecord>> {
    let mut on_epoch = |rec: &EpochRecord| -> Result<()> {
        let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        save_refiner(&ckpt.with_file_name(format!("{stem}_e{:03}.ckpt", rec.epoch)), refiner, rec.epoch)?;
        save_refiner(ckpt, refiner, rec.epoch)?;
        match metrics {
            Some(m) => append_metrics(m, &[*rec]),
            None => Ok(()),
        }
    };
    train_stage2(
        Stage1Source::Model(stage1),
        refiner,
        crops,
        tcfg,
        cfg.train.stage2_inputs,
        EpochPlan {
            first_epoch,
            on_epoch: Some(&mut on_epoch),
        },
    )
}

/// The two-stage protocol: stage 1 on the composite loss, then the refiner
/// on frozen stage-1 outputs.
pub fn run_training(
    cfg: &PipelineConfig,
    layout: &RunLayout,
    data: &Dataset,
    opts: TrainOptions,
) -> Result<TrainSummary> {
    if data.train.is_empty() {
        return Err(invalid("no training tiles"));
    }
    create_dir(&layout.checkpoints())?;
    let crop = cfg.crop_size();
    let crops = training_crops(
        &data.train,
        crop,
        cfg.dataset.crops_per_tile,
        derive_seed(cfg.seed, STREAM_CROPS),
    )?;
    log::info!("{} training crops from {} tiles", crops.len(), data.train.len());
    let mut summary = TrainSummary::default();
    let s1 = &cfg.train.stage1;

    let multitask = if opts.stages == Stages::Two {
        load_stage1(cfg, &layout.multitask_ckpt())?.0
    } else {
        let (model, done) = if opts.resume && layout.multitask_ckpt().exists() {
            load_stage1(cfg, &layout.multitask_ckpt())?
        } else {
            let seed = derive_seed(cfg.seed, STREAM_INIT_MULTITASK);
            (MultiTaskModel::build(&cfg.model.multitask, DType::F32, seed)?, 0)
        };
        let weights = if opts.resume && layout.loss_weights().exists() {
            from_toml(&layout.loss_weights())?
        } else {
            let w = match cfg.train.loss_weights.mode {
                WeightMode::Fixed => cfg.train.loss_weights.fixed()?,
                WeightMode::Auto => {
                    let probes = probe_batches(&crops, s1, DType::F32, cfg.train.loss_weights.probe_batches)?;
                    auto_balance_weights(&model, &probes)?
                }
            };
            write_text(&layout.loss_weights(), &to_toml(&w)?)?;
            w
        };
        log::info!("loss weights {weights:?}");
        summary.weights = Some(weights);
        let tcfg = stage_config(s1, cfg.seed, STREAM_TRAIN1, done);
        if tcfg.epochs == 0 {
            log::info!("stage 1 already at epoch {done}");
        } else {
            summary.stage1 = fit_stage1(
                &model,
                &crops,
                &tcfg,
                weights,
                done + 1,
                &layout.multitask_ckpt(),
                Some(&layout.metrics()),
            )?;
        }
        model
    };

    if opts.stages != Stages::One {
        let (refiner, done) = if opts.resume && layout.refiner_ckpt().exists() {
            load_stage2(&cfg.model.refiner, &layout.refiner_ckpt())?
        } else {
            let seed = derive_seed(cfg.seed, STREAM_INIT_REFINER);
            (RefinerModel::build(&cfg.model.refiner, DType::F32, seed)?, 0)
        };
        let tcfg = stage_config(&cfg.train.stage2, cfg.seed, STREAM_TRAIN2, done);
        if tcfg.epochs == 0 {
            log::info!("stage 2 already at epoch {done}");
        } else {
            summary.stage2 = fit_stage2(
                &multitask,
                &refiner,
                &crops,
                &tcfg,
                cfg,
                done + 1,
                &layout.refiner_ckpt(),
                Some(&layout.metrics()),
            )?;
        }
    }

    if opts.ablation_variants {
        train_ablation_variants(cfg, layout, &multitask, &crops, opts.stages)?;
    }
    Ok(summary)
}

/// Single-task stage 1 (height term only) and the height-only refiner.
fn train_ablation_variants(
    cfg: &PipelineConfig,
    layout: &RunLayout,
    multitask: &MultiTaskModel,
    crops: &[CropSample],
    stages: Stages,
) -> Result<()> {
    if stages != Stages::Two {
        log::info!("training single-task variant");
        let seed = derive_seed(cfg.seed, STREAM_INIT_SINGLE_TASK);
        let model = MultiTaskModel::build(&cfg.model.multitask, DType::F32, seed)?;
        let tcfg = stage_config(&cfg.train.stage1, cfg.seed, STREAM_TRAIN1, 0);
        fit_stage1(&model, crops, &tcfg, LossWeights::height_only(), 1, &layout.single_task_ckpt(), None)?;
    }
    if stages != Stages::One {
        train_single_input_refiner(cfg, layout, multitask, crops)?;
    }
    Ok(())
}

/// Trains the height-only refiner used by the input ablation and saves it
/// next to the full refiner.
pub fn train_single_input_refiner(
    cfg: &PipelineConfig,
    layout: &RunLayout,
    multitask: &MultiTaskModel,
    crops: &[CropSample],
) -> Result<Vec<EpochRecord>> {
    log::info!("training single-input refiner variant");
    let seed = derive_seed(cfg.seed, STREAM_INIT_SINGLE_INPUT);
    let refiner = RefinerModel::build(&single_input_spec(cfg), DType::F32, seed)?;
    let tcfg = stage_config(&cfg.train.stage2, cfg.seed, STREAM_TRAIN2, 0);
    fit_stage2(multitask, &refiner, crops, &tcfg, cfg, 1, &layout.single_input_refiner_ckpt(), None)
}

/// Stage-1 model plus the refiner when requested and available.
pub fn load_models(
    cfg: &PipelineConfig,
    layout: &RunLayout,
    refine: bool,
) -> Result<(MultiTaskModel, Option<RefinerModel>)> {
    let (stage1, _) = load_stage1(cfg, &layout.multitask_ckpt())?;
    let refiner = if !refine {
        None
    } else if layout.refiner_ckpt().exists() {
        Some(load_stage2(&cfg.model.refiner, &layout.refiner_ckpt())?.0)
    } else {
        log::warn!("no refiner checkpoint; writing stage-1 heights only");
        None
    };
    Ok((stage1, refiner))
}

/// Prediction rasters as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredPrediction {
    pub height: RasterGrid,
    pub refined_height: Option<RasterGrid>,
    pub labels: LabelGrid,
    pub normals: NormalMap,
    pub uncertainty: Option<RasterGrid>,
}

impl StoredPrediction {
    pub fn best_height(&self) -> &RasterGrid {
        self.refined_height.as_ref().unwrap_or(&self.height)
    }
}

pub fn write_prediction(dir: &Path, pred: &TilePrediction, uncertainty: Option<&RasterGrid>) -> Result<()> {
    create_dir(dir)?;
    hmap::write_raster(dir.join("height.hmap"), &pred.height)?;
    let refined = dir.join("refined_height.hmap");
    match &pred.refined_height {
        Some(r) => hmap::write_raster(&refined, r)?,
        None if refined.exists() => fs::remove_file(&refined).map_err(|e| Error::io(&refined, e))?,
        None => {}
    }
    hmap::write_labels(dir.join("labels.hmap"), &pred.labels, pred.height.gsd_m())?;
    hmap::write_raster(dir.join("normals.hmap"), &pred.normals.grid)?;
    if let Some(u) = uncertainty {
        hmap::write_raster(dir.join("uncertainty.hmap"), u)?;
    }
    Ok(())
}

pub fn read_prediction(dir: &Path, num_classes: usize, normals: NormalOptions) -> Result<StoredPrediction> {
    let height_path = dir.join("height.hmap");
    if !height_path.exists() {
        return Err(Error::io(
            &height_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing prediction; run predict first"),
        ));
    }
    let optional = |name: &str| -> Result<Option<RasterGrid>> {
        let p = dir.join(name);
        p.exists().then(|| hmap::read_raster(&p)).transpose()
    };
    Ok(StoredPrediction {
        height: hmap::read_raster(&height_path)?,
        refined_height: optional("refined_height.hmap")?,
        labels: hmap::read_labels(dir.join("labels.hmap"), num_classes)?,
        normals: NormalMap {
            grid: hmap::read_raster(dir.join("normals.hmap"))?,
            encoding: normals.encoding,
        },
        uncertainty: optional("uncertainty.hmap")?,
    })
}

/// Predicts one RGB tile and writes its rasters under `dir`.
pub fn predict_to_dir(
    cfg: &PipelineConfig,
    stage1: &MultiTaskModel,
    refiner: Option<&RefinerModel>,
    rgb: &RasterGrid,
    step_px: Option<usize>,
    uncertainty: bool,
    dir: &Path,
) -> Result<TilePrediction> {
    let recon = match step_px {
        Some(s) => cfg.recon.with_step(s),
        None => cfg.recon.clone(),
    };
    let pred = predict_tile(stage1, refiner, rgb, &recon)?;
    let unc = if uncertainty {
        Some(uncertainty_map(
            stage1,
            rgb,
            cfg.eval.uncertainty_passes,
            &recon,
            derive_seed(cfg.seed, STREAM_UNCERTAINTY),
        )?)
    } else {
        None
    };
    write_prediction(dir, &pred, unc.as_ref())?;
    Ok(pred)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileEval {
    pub tile: String,
    pub height: HeightMetrics,
    pub semantic: SemanticMetrics,
}

pub const EVAL_HEADER: &str = "tile,mse,mae,rmse,oa,aa,kappa";

/// Per-tile metrics of the stored predictions against ground truth, plus a
/// pixel-pooled aggregate row named `all`.
pub fn evaluate_predictions(cfg: &PipelineConfig, layout: &RunLayout, tiles: &[SceneTile]) -> Result<Vec<TileEval>> {
    if tiles.is_empty() {
        return Err(invalid("no test tiles to evaluate"));
    }
    let nc = cfg.num_classes;
    let mut rows = Vec::with_capacity(tiles.len() + 1);
    let mut pooled = HeightErrorSums::default();
    let mut confusion = vec![vec![0u64; nc]; nc];
    for t in tiles {
        let p = read_prediction(&layout.predictions(&t.tile_id), nc, cfg.dataset.normals)?;
        let mut sums = HeightErrorSums::default();
        sums.add(p.best_height(), &t.height_gt)?;
        pooled.add(p.best_height(), &t.height_gt)?;
        let cm = confusion_matrix(&p.labels, &t.labels_gt, nc)?;
        for (acc, row) in confusion.iter_mut().zip(&cm) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        rows.push(TileEval {
            tile: t.tile_id.clone(),
            height: sums.metrics()?,
            semantic: SemanticMetrics::from_confusion(cm)?,
        });
    }
    rows.push(TileEval {
        tile: "all".into(),
        height: pooled.metrics()?,
        semantic: SemanticMetrics::from_confusion(confusion)?,
    });
    Ok(rows)
}

pub fn eval_csv(rows: &[TileEval]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.tile, r.height.mse, r.height.mae, r.height.rmse, r.semantic.oa, r.semantic.aa, r.semantic.kappa
        );
    }
    s
}

/// Ablation rows for whichever checkpoints exist.
pub fn run_ablation(cfg: &PipelineConfig, layout: &RunLayout, tiles: &[SceneTile]) -> Result<Vec<AblationRow>> {
    let (stage1, refiner) = load_models(cfg, layout, true)?;
    let single_task = match layout.single_task_ckpt() {
        p if p.exists() => Some(load_stage1(cfg, &p)?.0),
        _ => None,
    };
    let single_input = match layout.single_input_refiner_ckpt() {
        p if p.exists() => Some(load_stage2(&single_input_spec(cfg), &p)?.0),
        _ => None,
    };
    let models = AblationModels {
        multitask: Some(&stage1),
        single_task: single_task.as_ref(),
        refiner: refiner.as_ref(),
        single_input_refiner: single_input.as_ref(),
    };
    let acfg = AblationConfig {
        recon: cfg.recon.clone(),
        steps: cfg.eval.ablation_steps.clone(),
        bilateral: cfg.eval.bilateral,
        nlm: cfg.eval.nlm,
    };
    let variants = standard_variants(&models, &acfg);
    let rows = ablation_report(&variants, tiles, &acfg)?;
    Ok(rows)
}

pub fn write_ablation(layout: &RunLayout, rows: &[AblationRow]) -> Result<PathBuf> {
    let path = layout.eval().join("ablation.csv");
    write_text(&path, &ablation_csv(rows))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Cloud,
    Mesh,
    SemanticCloud,
}

impl ExportKind {
    pub fn name(self) -> &'static str {
        match self {
            ExportKind::Cloud => "cloud",
            ExportKind::Mesh => "mesh",
            ExportKind::SemanticCloud => "semantic-cloud",
        }
    }
}

/// PLY export of a stored prediction, colored by the tile RGB or, for the
/// semantic cloud, by the palette entry of each predicted label.
pub fn export3d(
    cfg: &PipelineConfig,
    layout: &RunLayout,
    tile: &SceneTile,
    kind: ExportKind,
    binary: bool,
) -> Result<PathBuf> {
    let p = read_prediction(&layout.predictions(&tile.tile_id), cfg.num_classes, cfg.dataset.normals)?;
    let path = layout.export().join(format!("{}_{}.ply", tile.tile_id, kind.name()));
    create_dir(&layout.export())?;
    match kind {
        ExportKind::Mesh => {
            let mesh = grid_mesh(p.best_height(), Some(&tile.rgb), cfg.dataset.normals)?;
            write_mesh_ply(&mesh, &path, binary)?;
        }
        ExportKind::Cloud | ExportKind::SemanticCloud => {
            let mut cloud = heightmap_to_pointcloud(
                p.best_height(),
                &CloudAttributes {
                    rgb: Some(&tile.rgb),
                    labels: Some(&p.labels),
                    normals: Some(&p.normals),
                    valid: None,
                },
            )?;
            if kind == ExportKind::SemanticCloud {
                cloud.colorize_by_label(&cfg.palette)?;
            }
            write_cloud_ply(&cloud, &path, binary)?;
        }
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightMeta {
    pub tile: String,
    pub frames: usize,
    pub frame_size_px: usize,
    pub overlap_px: usize,
    pub altitude_m: f32,
    /// `(row, col, height, width)` covered by the frames.
    pub strip: (usize, usize, usize, usize),
    pub covered_px: usize,
    pub holes: usize,
    pub ground_truth_frames: bool,
}

/// Flies a single pass over the tile, predicts (or, with `ground_truth`,
/// copies) the height of each frame and fuses them into one raster.
pub fn run_flight(
    cfg: &PipelineConfig,
    layout: &RunLayout,
    tile: &SceneTile,
    plan: &FlightPlan,
    ground_truth: bool,
) -> Result<(FusedFlight, FlightMeta)> {
    let frames = simulate_flight(tile, plan)?;
    let models = if ground_truth {
        None
    } else {
        Some(load_models(cfg, layout, true)?)
    };
    let mut heights: Vec<(RasterGrid, Pose)> = Vec::with_capacity(frames.len());
    for f in &frames {
        let h = match &models {
            None => tile
                .height_gt
                .crop(f.pose.row_px, f.pose.col_px, plan.frame_size_px, plan.frame_size_px)?,
            Some((stage1, refiner)) => predict_tile(stage1, refiner.as_ref(), &f.rgb, &cfg.recon)?
                .best_height()
                .clone(),
        };
        heights.push((h, f.pose));
    }
    let fused = fuse_flight(&heights, (tile.height_px(), tile.width_px()), None)?;

    let dir = layout.flight();
    create_dir(&dir)?;
    hmap::write_raster(dir.join("fused_height.hmap"), &fused.height)?;
    write_cloud_ply(&fused.cloud, &dir.join("fused_cloud.ply"), true)?;
    let mut poses = String::from("frame,row_px,col_px,x_m,y_m,altitude_m\n");
    for (i, (_, p)) in heights.iter().enumerate() {
        let _ = writeln!(poses, "{i},{},{},{},{},{}", p.row_px, p.col_px, p.x_m, p.y_m, p.altitude_m);
    }
    write_text(&dir.join("poses.csv"), &poses)?;
    let meta = FlightMeta {
        tile: tile.tile_id.clone(),
        frames: frames.len(),
        frame_size_px: plan.frame_size_px,
        overlap_px: plan.overlap_px,
        altitude_m: plan.altitude_m,
        strip: plan.strip().unwrap_or_default(),
        covered_px: fused.covered.iter().filter(|&&c| c).count(),
        holes: fused.holes,
        ground_truth_frames: ground_truth,
    };
    write_text(&dir.join("meta.toml"), &to_toml(&meta)?)?;
    Ok((fused, meta))
}

/// RGB image file as a tile-sized raster for prediction.
pub fn read_image(path: &Path, gsd_m: f32) -> Result<RasterGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hmap") => hmap::read_raster(path),
        _ => imageio::read_rgb(path, gsd_m),
    }
}
