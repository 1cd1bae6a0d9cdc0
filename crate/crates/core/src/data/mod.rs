//! Scene tiles, dataset loading and crop sampling.

mod synth;

pub use synth::{synth_city, SynthMeta, SynthParams, BUILDING, CAR, CLASS_NAMES, CLUTTER, GROUND, ROAD, TREE};

use std::collections::HashSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::raster::{
    downsample, imageio, surface_normals, LabelGrid, NormalMap, NormalOptions, RasterGrid,
};

/// Aligned RGB, height, labels and normals for one geographic tile.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTile {
    pub tile_id: String,
    pub rgb: RasterGrid,
    pub height_gt: RasterGrid,
    pub labels_gt: LabelGrid,
    pub normals_gt: NormalMap,
}

impl SceneTile {
    /// Assembles a tile, deriving the normals from the height grid.
    pub fn new(
        tile_id: impl Into<String>,
        rgb: RasterGrid,
        height_gt: RasterGrid,
        labels_gt: LabelGrid,
        normals: NormalOptions,
    ) -> Result<Self> {
        height_gt.require_single_channel("scene height")?;
        if rgb.channels() != 3 {
            return Err(shape(format!("scene RGB has {} channels", rgb.channels())));
        }
        if !rgb.same_footprint(&height_gt) {
            return Err(shape(format!(
                "RGB {}x{} @ {} m vs height {}x{} @ {} m",
                rgb.height(),
                rgb.width(),
                rgb.gsd_m(),
                height_gt.height(),
                height_gt.width(),
                height_gt.gsd_m()
            )));
        }
        if labels_gt.height() != height_gt.height() || labels_gt.width() != height_gt.width() {
            return Err(shape(format!(
                "labels {}x{} vs height {}x{}",
                labels_gt.height(),
                labels_gt.width(),
                height_gt.height(),
                height_gt.width()
            )));
        }
        let normals_gt = surface_normals(&height_gt, normals)?;
        Ok(Self {
            tile_id: tile_id.into(),
            rgb,
            height_gt,
            labels_gt,
            normals_gt,
        })
    }

    pub fn height_px(&self) -> usize {
        self.height_gt.height()
    }

    pub fn width_px(&self) -> usize {
        self.height_gt.width()
    }

    pub fn gsd_m(&self) -> f32 {
        self.height_gt.gsd_m()
    }

    pub fn num_classes(&self) -> usize {
        self.labels_gt.num_classes()
    }

    /// Maximum deviation between the stored normals and normals re-derived from the height.
    pub fn normal_consistency_error(&self, opts: NormalOptions) -> Result<f32> {
        surface_normals(&self.height_gt, opts)?
            .grid
            .max_abs_diff(&self.normals_gt.grid)
    }
}

/// Aligned training views cut from one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub rgb: RasterGrid,
    pub height: RasterGrid,
    pub labels: LabelGrid,
    pub normals: RasterGrid,
    pub source_tile: String,
    pub origin: (usize, usize),
}

impl CropSample {
    pub fn cut(tile: &SceneTile, row: usize, col: usize, size: usize) -> Result<Self> {
        Ok(Self {
            rgb: tile.rgb.crop(row, col, size, size)?,
            height: tile.height_gt.crop(row, col, size, size)?,
            labels: tile.labels_gt.crop(row, col, size, size)?,
            normals: tile.normals_gt.grid.crop(row, col, size, size)?,
            source_tile: tile.tile_id.clone(),
            origin: (row, col),
        })
    }

    pub fn size(&self) -> usize {
        self.rgb.height()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    train_tiles: Vec<String>,
    test_tiles: Vec<String>,
}

impl SplitSpec {
    pub fn new(train_tiles: Vec<String>, test_tiles: Vec<String>) -> Result<Self> {
        let train: HashSet<&String> = train_tiles.iter().collect();
        if let Some(dup) = test_tiles.iter().find(|t| train.contains(t)) {
            return Err(invalid(format!("tile {dup} is in both train and test splits")));
        }
        Ok(Self {
            train_tiles,
            test_tiles,
        })
    }

    pub fn train_tiles(&self) -> &[String] {
        &self.train_tiles
    }

    pub fn test_tiles(&self) -> &[String] {
        &self.test_tiles
    }
}

/// Height above terrain: `max(dsm - dem, 0)`.
pub fn derive_height_dfc(dsm: &RasterGrid, dem: &RasterGrid) -> Result<RasterGrid> {
    dsm.require_single_channel("DSM")?;
    dem.require_single_channel("DEM")?;
    if !dsm.same_footprint(dem) {
        return Err(shape(format!(
            "DSM {}x{} @ {} m vs DEM {}x{} @ {} m",
            dsm.height(),
            dsm.width(),
            dsm.gsd_m(),
            dem.height(),
            dem.width(),
            dem.gsd_m()
        )));
    }
    let data = dsm
        .data()
        .iter()
        .zip(dem.data())
        .map(|(s, e)| (s - e).max(0.0))
        .collect();
    RasterGrid::new(dsm.height(), dsm.width(), 1, dsm.gsd_m(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeightSource {
    /// Normalized DSM, already height above ground.
    Ndsm(PathBuf),
    /// Surface and terrain models, subtracted on load.
    DsmDem { dsm: PathBuf, dem: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSources {
    pub rgb: PathBuf,
    pub height: HeightSource,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadConfig {
    pub tile_id: String,
    /// Ground-sample distance of the height/label rasters.
    pub gsd_m: f32,
    /// RGB is this many times finer than the height raster (10 for DFC2018-style data).
    pub rgb_downsample: usize,
    pub num_classes: usize,
    /// Class colors for color-coded label images.
    pub palette: Option<Vec<[u8; 3]>>,
    pub normals: NormalOptions,
}

pub fn load_scene(src: &SceneSources, cfg: &LoadConfig) -> Result<SceneTile> {
    if cfg.rgb_downsample == 0 {
        return Err(invalid("rgb_downsample must be >= 1"));
    }
    let rgb_gsd = cfg.gsd_m / cfg.rgb_downsample as f32;
    let rgb = imageio::read_rgb(&src.rgb, rgb_gsd)?;
    let rgb = if cfg.rgb_downsample > 1 {
        downsample(&rgb, cfg.rgb_downsample)?
    } else {
        rgb
    };
    let height = match &src.height {
        HeightSource::Ndsm(p) => imageio::read_elevation(p, cfg.gsd_m)?.map(|v| v.max(0.0))?,
        HeightSource::DsmDem { dsm, dem } => derive_height_dfc(
            &imageio::read_elevation(dsm, cfg.gsd_m)?,
            &imageio::read_elevation(dem, cfg.gsd_m)?,
        )?,
    };
    let labels = imageio::read_labels(&src.labels, cfg.num_classes, cfg.palette.as_deref())?;
    // containers may carry their own gsd; the configured one wins after shape checks
    if rgb.height() != height.height() || rgb.width() != height.width() {
        return Err(shape(format!(
            "RGB is {}x{} after downsampling by {}, height raster is {}x{}",
            rgb.height(),
            rgb.width(),
            cfg.rgb_downsample,
            height.height(),
            height.width()
        )));
    }
    let height = height.with_gsd(cfg.gsd_m)?;
    let rgb = rgb.with_gsd(cfg.gsd_m)?;
    SceneTile::new(cfg.tile_id.clone(), rgb, height, labels, cfg.normals)
}

/// Draws `n` crops with uniformly random origins; deterministic per seed.
pub fn sample_crops(tile: &SceneTile, n: usize, size: usize, seed: u64) -> Result<Vec<CropSample>> {
    if size == 0 || tile.height_px() < size || tile.width_px() < size {
        return Err(invalid(format!(
            "tile {}x{} smaller than crop size {size}",
            tile.height_px(),
            tile.width_px()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = rng.random_range(0..=tile.height_px() - size);
            let c = rng.random_range(0..=tile.width_px() - size);
            CropSample::cut(tile, r, c, size)
        })
        .collect()
}

/// Deterministic per-worker or per-tile seed derived from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
