//! Command-line interface: `synth`, `train`, `predict`, `evaluate`,
//! `export3d` and `flight`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{PipelineConfig, Preset};
use crate::data::SceneTile;
use crate::error::{invalid, Result};
use crate::pipeline::{
    eval_csv, evaluate_predictions, export3d, generate_synth, load_dataset, load_models, predict_to_dir,
    read_image, run_ablation, run_flight, run_training, write_ablation, write_resolved_config, Dataset,
    ExportKind, RunLayout, Stages, TrainOptions,
};
use crate::recon3d::FlightPlan;

#[derive(Debug, Parser)]
#[command(name = "heightpipe", version, about = "Height maps, labels and normals from aerial RGB")]
pub struct Cli {
    /// Pipeline config (TOML); keys override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Run directory holding the dataset, checkpoints and outputs.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// desk (default) or paper-reference.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset under <out>/dataset.
    Synth {
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train stage 1, then the refiner on frozen stage-1 outputs.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        /// Continue from the latest checkpoints.
        #[arg(long)]
        resume: bool,
        /// Also train the single-task and single-input models for --ablate.
        #[arg(long)]
        with_ablation_variants: bool,
    },
    /// Write height, refined height, labels and normals for tiles or an image.
    Predict {
        /// Tile id; repeatable. Defaults to every test tile.
        #[arg(long = "tile")]
        tiles: Vec<String>,
        /// Predict a standalone RGB image (PNG/JPEG/TIFF or HMAP) instead.
        #[arg(long, conflicts_with = "tiles")]
        image: Option<PathBuf>,
        /// Skip the refiner.
        #[arg(long)]
        no_refine: bool,
        /// Sliding-window step in pixels.
        #[arg(long)]
        step: Option<usize>,
        /// Also write the MC-dropout variance map.
        #[arg(long)]
        uncertainty: bool,
    },
    /// Score stored predictions of the test tiles.
    Evaluate {
        /// Also write the ablation report from the available checkpoints.
        #[arg(long)]
        ablate: bool,
    },
    /// Export a predicted tile as a PLY point cloud or mesh.
    Export3d {
        #[arg(long)]
        tile: String,
        #[arg(long, value_enum, default_value_t = KindArg::Cloud)]
        kind: KindArg,
        /// ASCII PLY instead of binary little-endian.
        #[arg(long)]
        ascii: bool,
    },
    /// Simulate a single-pass flight over a tile and fuse the frames.
    Flight(FlightArgs),
}

#[derive(Debug, Args)]
pub struct FlightArgs {
    #[arg(long)]
    pub tile: String,
    /// Pixel row of the pass.
    #[arg(long, default_value_t = 0)]
    pub row: usize,
    /// Frame side in pixels; defaults to the crop size.
    #[arg(long)]
    pub frame: Option<usize>,
    /// Overlap between consecutive frames in pixels; defaults to 20% of the frame.
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long, default_value_t = 100.0)]
    pub altitude: f32,
    /// Use ground-truth heights per frame instead of the model.
    #[arg(long)]
    pub gt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Cloud,
    Mesh,
    SemanticCloud,
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn find_tile<'a>(data: &'a Dataset, id: &str) -> Result<&'a SceneTile> {
    data.tile(id).ok_or_else(|| invalid(format!("unknown tile '{id}'")))
}

/// Runs one parsed command. Every command writes the resolved config next to its outputs.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let layout = RunLayout::new(&cli.out);
    match &cli.command {
        Command::Synth { force } => {
            let manifest = generate_synth(&cfg, &layout.dataset(), *force)?;
            write_resolved_config(&cfg, &layout)?;
            println!("{} tiles written to {}", manifest.tiles.len(), layout.dataset().display());
        }
        Command::Train {
            stage,
            resume,
            with_ablation_variants,
        } => {
            let data = load_dataset(&cfg, &layout.dataset())?;
            write_resolved_config(&cfg, &layout)?;
            let stages = match stage {
                StageArg::One => Stages::One,
                StageArg::Two => Stages::Two,
                StageArg::Both => Stages::Both,
            };
            let summary = run_training(
                &cfg,
                &layout,
                &data,
                TrainOptions {
                    stages,
                    resume: *resume,
                    ablation_variants: *with_ablation_variants,
                },
            )?;
            println!(
                "trained {} stage-1 and {} stage-2 epochs; checkpoints in {}",
                summary.stage1.len(),
                summary.stage2.len(),
                layout.checkpoints().display()
            );
        }
        Command::Predict {
            tiles,
            image,
            no_refine,
            step,
            uncertainty,
        } => {
            let (stage1, refiner) = load_models(&cfg, &layout, !no_refine)?;
            write_resolved_config(&cfg, &layout)?;
            if let Some(path) = image {
                let rgb = read_image(path, cfg.dataset.gsd_m)?;
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let dir = layout.predictions(name);
                predict_to_dir(&cfg, &stage1, refiner.as_ref(), &rgb, *step, *uncertainty, &dir)?;
                println!("{}", dir.display());
                return Ok(());
            }
            let data = load_dataset(&cfg, &layout.dataset())?;
            let targets: Vec<&SceneTile> = if tiles.is_empty() {
                data.test.iter().collect()
            } else {
                tiles.iter().map(|t| find_tile(&data, t)).collect::<Result<_>>()?
            };
            for t in targets {
                let dir = layout.predictions(&t.tile_id);
                predict_to_dir(&cfg, &stage1, refiner.as_ref(), &t.rgb, *step, *uncertainty, &dir)?;
                println!("{}", dir.display());
            }
        }
        Command::Evaluate { ablate } => {
            let data = load_dataset(&cfg, &layout.dataset())?;
            let rows = evaluate_predictions(&cfg, &layout, &data.test)?;
            let path = layout.eval().join("metrics.csv");
            let csv = eval_csv(&rows);
            std::fs::create_dir_all(layout.eval()).map_err(|e| crate::Error::io(layout.eval(), e))?;
            std::fs::write(&path, &csv).map_err(|e| crate::Error::io(&path, e))?;
            write_resolved_config(&cfg, &layout)?;
            print!("{csv}");
            if *ablate {
                let rows = run_ablation(&cfg, &layout, &data.test)?;
                let path = write_ablation(&layout, &rows)?;
                print!("{}", std::fs::read_to_string(&path).map_err(|e| crate::Error::io(&path, e))?);
            }
        }
        Command::Export3d { tile, kind, ascii } => {
            let data = load_dataset(&cfg, &layout.dataset())?;
            let kind = match kind {
                KindArg::Cloud => ExportKind::Cloud,
                KindArg::Mesh => ExportKind::Mesh,
                KindArg::SemanticCloud => ExportKind::SemanticCloud,
            };
            let path = export3d(&cfg, &layout, find_tile(&data, tile)?, kind, !ascii)?;
            write_resolved_config(&cfg, &layout)?;
            println!("{}", path.display());
        }
        Command::Flight(args) => {
            let data = load_dataset(&cfg, &layout.dataset())?;
            let tile = find_tile(&data, &args.tile)?;
            let plan = FlightPlan::single_pass(
                tile.width_px(),
                args.row,
                args.frame.unwrap_or(cfg.crop_size()),
                args.overlap,
                args.altitude,
            )?;
            let (_, meta) = run_flight(&cfg, &layout, tile, &plan, args.gt)?;
            write_resolved_config(&cfg, &layout)?;
            println!(
                "{} frames fused into {}; {} holes",
                meta.frames,
                layout.flight().display(),
                meta.holes
            );
        }
    }
    Ok(())
}

/// Parses the process arguments and runs; failures print one
/// `error[<category>]: <message>` line and return exit code 1.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            1
        }
    }
}
