use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use height_pipeline::config::PipelineConfig;
use height_pipeline::pipeline::{load_dataset, write_prediction, RunLayout};
use height_pipeline::raster::{hmap, surface_normals, RasterGrid};
use height_pipeline::inference::TilePrediction;
use height_pipeline::recon3d::read_ply;

const SMALL: &str = r#"
[dataset]
n_tiles = 3
tile_size = 64
test_tiles = 1
crops_per_tile = 4

[model.multitask]
input_size = [32, 32, 3]
stage_widths = [8, 8, 8, 8, 8]

[model.multitask.encoder]
skip_channels = [4, 4, 4, 4]
bottleneck_channels = 8

[model.refiner]
input_size = [32, 32]
encoder_widths = [4, 4, 4, 4, 4]
decoder_widths = [4, 4, 4, 4]

[train.stage1]
crop_size = 32
epochs = 2
batch_size = 4

[train.stage2]
crop_size = 32
epochs = 1
batch_size = 4

[recon]
crop_size = 32
step_px = 8

[eval]
ablation_steps = [8, 16]
uncertainty_passes = 3
"#;

struct Run {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("pipeline.toml");
        fs::write(&config, format!("{extra}\n{SMALL}")).unwrap();
        let out = tmp.path().join("run");
        Self { _tmp: tmp, out, config }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_heightpipe"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn config(&self) -> PipelineConfig {
        PipelineConfig::load(Some(&self.config), None).unwrap()
    }

    fn layout(&self) -> RunLayout {
        RunLayout::new(&self.out)
    }
}

fn error_category(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().find(|l| l.starts_with("error[")).expect("error line");
    line[6..line.find(']').unwrap()].to_string()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic_and_guards_existing_output() {
    let a = Run::new("seed = 7");
    a.ok(&["synth"]);
    let b = Run::new("seed = 7");
    b.ok(&["synth"]);
    assert_eq!(dir_bytes(&a.layout().dataset()), dir_bytes(&b.layout().dataset()));

    let o = a.cmd(&["synth"]);
    assert_eq!(error_category(&o), "invalid-argument");
    a.ok(&["synth", "--force"]);
    assert_eq!(dir_bytes(&a.layout().dataset()), dir_bytes(&b.layout().dataset()));

    let c = a.ok(&["synth", "--force", "--seed", "8"]);
    assert!(c.contains("3 tiles"));
    assert_ne!(dir_bytes(&a.layout().dataset()), dir_bytes(&b.layout().dataset()));
}

#[test]
fn manifest_lists_every_tile() {
    let r = Run::new("seed = 3");
    let mut text = fs::read_to_string(&r.config).unwrap();
    text = text.replace("n_tiles = 3", "n_tiles = 5");
    fs::write(&r.config, text).unwrap();
    r.ok(&["synth"]);
    let manifest = fs::read_to_string(r.layout().dataset().join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[tiles]]").count(), 5);
    let data = load_dataset(&r.config(), &r.layout().dataset()).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (4, 1));
}

#[test]
fn resolved_snapshot_reproduces_artifacts() {
    let r = Run::new("seed = 11");
    r.ok(&["synth"]);
    let snapshot = r.layout().resolved_config();
    let again = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_heightpipe"))
        .arg("--config")
        .arg(&snapshot)
        .arg("--out")
        .arg(again.path())
        .arg("synth")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(
        dir_bytes(&r.layout().dataset()),
        dir_bytes(&RunLayout::new(again.path()).dataset())
    );
    assert_eq!(
        fs::read_to_string(&snapshot).unwrap(),
        fs::read_to_string(RunLayout::new(again.path()).resolved_config()).unwrap()
    );
}

#[test]
fn bad_inputs_report_one_line_categories() {
    let r = Run::new("");
    assert_eq!(error_category(&r.cmd(&["train"])), "io");
    r.ok(&["synth"]);
    assert_eq!(error_category(&r.cmd(&["predict"])), "checkpoint");

    fs::write(&r.config, "[recon]\nstep_px = 0").unwrap();
    assert_eq!(error_category(&r.cmd(&["synth"])), "config");
    let o = r.cmd(&["synth", "--preset", "huge"]);
    assert!(!o.status.success());
}

#[test]
fn two_stage_workflow() {
    let r = Run::new("seed = 5");
    r.ok(&["synth"]);
    let layout = r.layout();

    // stage 1 only, then resume stage 1 to a larger epoch count
    r.ok(&["train", "--stage", "1"]);
    assert!(layout.multitask_ckpt().exists());
    assert!(!layout.refiner_ckpt().exists());
    assert!(layout.checkpoints().join("multitask_e002.ckpt").exists());
    let text = fs::read_to_string(&r.config).unwrap().replacen("epochs = 2", "epochs = 3", 1);
    fs::write(&r.config, text).unwrap();
    r.ok(&["train", "--stage", "1", "--resume"]);
    let metrics = fs::read_to_string(layout.metrics()).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,L_h,L_s,L_n,L,L_r"));
    let epochs: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3"]);
    assert!(layout.loss_weights().exists());
    assert!(layout.resolved_config().exists());

    r.ok(&["train", "--stage", "2", "--with-ablation-variants"]);
    assert!(layout.refiner_ckpt().exists());
    assert!(layout.single_input_refiner_ckpt().exists());

    let cfg = r.config();
    let data = load_dataset(&cfg, &layout.dataset()).unwrap();
    let test = &data.test[0];
    let id = test.tile_id.clone();

    r.ok(&["predict", "--no-refine", "--step", "16"]);
    let dir = layout.predictions(&id);
    assert!(!dir.join("refined_height.hmap").exists());
    r.ok(&["predict", "--tile", &id, "--uncertainty"]);
    for f in ["height", "refined_height", "normals", "uncertainty"] {
        let g = hmap::read_raster(dir.join(format!("{f}.hmap"))).unwrap();
        assert_eq!((g.height(), g.width()), (64, 64), "{f}");
    }
    let labels = hmap::read_labels(dir.join("labels.hmap"), 6).unwrap();
    assert_eq!((labels.height(), labels.width()), (64, 64));

    let csv = r.ok(&["evaluate", "--ablate"]);
    let metrics = fs::read_to_string(layout.eval().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("tile,mse,mae,rmse,oa,aa,kappa\n"));
    assert!(metrics.contains(&format!("\n{id},")) && metrics.contains("\nall,"));
    assert!(csv.contains("variant,step_px,mse,mae,rmse"));
    let ablation = fs::read_to_string(layout.eval().join("ablation.csv")).unwrap();
    let variants: Vec<&str> = ablation.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        [
            "multi-task",
            "multi-task + BF",
            "multi-task + NLM",
            "multi-task + Unet",
            "multi-task + Unet",
            "single-input Unet"
        ]
    );

    let ply = r.ok(&["export3d", "--tile", &id, "--kind", "cloud"]);
    let cloud = read_ply(Path::new(ply.trim())).unwrap().cloud;
    assert_eq!(cloud.len(), 64 * 64);
    let ply = r.ok(&["export3d", "--tile", &id, "--kind", "mesh", "--ascii"]);
    assert_eq!(read_ply(Path::new(ply.trim())).unwrap().faces.len(), 2 * 63 * 63);
    let ply = r.ok(&["export3d", "--tile", &id, "--kind", "semantic-cloud"]);
    let sem = read_ply(Path::new(ply.trim())).unwrap().cloud;
    let colors = sem.colors.unwrap();
    for (i, l) in sem.labels.unwrap().iter().enumerate() {
        assert_eq!(colors[i], cfg.palette[*l as usize]);
    }

    r.ok(&["flight", "--tile", &id, "--row", "10"]);
    let meta = fs::read_to_string(layout.flight().join("meta.toml")).unwrap();
    assert!(meta.contains("holes = "));
    assert!(layout.flight().join("fused_cloud.ply").exists());
}

#[test]
fn gt_flight_reproduces_strip() {
    let r = Run::new("seed = 2");
    r.ok(&["synth"]);
    let out = r.ok(&["flight", "--tile", "tile_000", "--row", "16", "--gt", "--frame", "24"]);
    assert!(out.contains("frames fused"));
    let layout = r.layout();
    let data = load_dataset(&r.config(), &layout.dataset()).unwrap();
    let tile = data.tile("tile_000").unwrap();
    let fused = hmap::read_raster(layout.flight().join("fused_height.hmap")).unwrap();
    // 24 px frames with 4 px overlap: origins 0, 20, 40 cover columns 0..64
    let strip = fused.crop(16, 0, 24, 64).unwrap();
    let gt = tile.height_gt.crop(16, 0, 24, 64).unwrap();
    assert!(strip.max_abs_diff(&gt).unwrap() < 1e-6);
    let poses = fs::read_to_string(layout.flight().join("poses.csv")).unwrap();
    assert_eq!(poses.lines().count(), 1 + 3);
    let meta = fs::read_to_string(layout.flight().join("meta.toml")).unwrap();
    assert!(meta.contains(&format!("holes = {}", 64 * 64 - 24 * 64)));
}

#[test]
fn perfect_predictions_score_zero_error() {
    let r = Run::new("");
    r.ok(&["synth"]);
    let cfg = r.config();
    let layout = r.layout();
    let data = load_dataset(&cfg, &layout.dataset()).unwrap();
    for t in &data.test {
        let probs = RasterGrid::zeros(t.height_px(), t.width_px(), 6, t.gsd_m()).unwrap();
        let pred = TilePrediction {
            height: t.height_gt.clone(),
            refined_height: None,
            probabilities: probs,
            labels: t.labels_gt.clone(),
            normals: surface_normals(&t.height_gt, cfg.dataset.normals).unwrap(),
        };
        write_prediction(&layout.predictions(&t.tile_id), &pred, None).unwrap();
    }
    let csv = r.ok(&["evaluate"]);
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(&v[..3], &[0.0, 0.0, 0.0], "{line}");
        assert_eq!(v[5], 1.0, "{line}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let runs: Vec<Run> = (0..2).map(|_| Run::new("seed = 13")).collect();
    for r in &runs {
        r.ok(&["synth"]);
        r.ok(&["train", "--stage", "both"]);
    }
    let bytes = |r: &Run| {
        let l = r.layout();
        [l.multitask_ckpt(), l.refiner_ckpt(), l.metrics(), l.loss_weights()].map(|p| fs::read(p).unwrap())
    };
    assert!(bytes(&runs[0]) == bytes(&runs[1]));
}
