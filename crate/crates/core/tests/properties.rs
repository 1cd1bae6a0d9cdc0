use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;

use height_pipeline::data::{derive_height_dfc, sample_crops, synth_city, SynthParams};
use height_pipeline::inference::{reconstruct, ReconstructionConfig};
use height_pipeline::nn::{Dropout, MultiTaskModel, MultiTaskSpec, RefinerModel, RefinerSpec};
use height_pipeline::raster::RasterGrid;
use height_pipeline::recon3d::{heightmap_to_pointcloud, CloudAttributes};
use height_pipeline::training::{composite_loss, loss_height, loss_terms, Batch, LossTerms, LossWeights};

fn grid(h: usize, w: usize, c: usize, vals: &[f32]) -> RasterGrid {
    let n = h * w * c;
    RasterGrid::new(h, w, c, 0.5, vals.iter().cycle().take(n).copied().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stitching_source_crops_reproduces_the_source(
        h in 16usize..48,
        w in 16usize..48,
        crop in 4usize..16,
        step_frac in 0.1f64..1.0,
        channels in 1usize..4,
        vals in proptest::collection::vec(-300.0f32..300.0, 1..64),
    ) {
        let src = grid(h, w, channels, &vals);
        let step = ((crop as f64 * step_frac).ceil() as usize).clamp(1, crop);
        let cfg = ReconstructionConfig { crop_size: crop, step_px: step, batch_size: 5, ..ReconstructionConfig::default() };
        let out = reconstruct(h, w, channels, 0.5, &cfg, |batch| {
            batch.iter().map(|&(r, c)| src.crop(r, c, crop, crop)).collect()
        }).unwrap();
        prop_assert!(out.max_abs_diff(&src).unwrap() <= 1e-6);
    }

    #[test]
    fn dfc_heights_are_nonnegative(
        dsm in proptest::collection::vec(-50.0f32..400.0, 30),
        dem in proptest::collection::vec(-50.0f32..400.0, 30),
    ) {
        let h = derive_height_dfc(&grid(5, 6, 1, &dsm), &grid(5, 6, 1, &dem)).unwrap();
        prop_assert!(h.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cloud_has_one_point_per_covered_pixel(
        mask in proptest::collection::vec(any::<bool>(), 42),
        vals in proptest::collection::vec(0.0f32..40.0, 42),
    ) {
        let g = grid(6, 7, 1, &vals);
        let cloud = heightmap_to_pointcloud(&g, &CloudAttributes { valid: Some(&mask), ..Default::default() }).unwrap();
        prop_assert_eq!(cloud.len(), mask.iter().filter(|&&m| m).count());
    }
}

fn tiny_batch(dtype: DType) -> Batch {
    let (tile, _) = synth_city(5, 64, 6, &SynthParams::default()).unwrap();
    let crops = sample_crops(&tile, 2, 32, 1).unwrap();
    Batch::from_samples(&crops.iter().collect::<Vec<_>>(), dtype).unwrap()
}

fn terms(model: &MultiTaskModel, batch: &Batch) -> LossTerms {
    let out = model.forward(&batch.rgb, &mut Dropout::Off).unwrap();
    loss_terms(&out, batch).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn set_entry(var: &Var, flat: &mut [f64], k: usize, v: f64) {
    flat[k] = v;
    var.set(&Tensor::from_vec(flat.to_vec(), var.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Backprop through the weighted sum against the weighted sum of per-term
/// central differences.
#[test]
fn composite_gradient_is_weighted_sum_of_term_gradients() {
    let model = MultiTaskModel::build(&MultiTaskSpec::tiny(6), DType::F64, 11).unwrap();
    let batch = tiny_batch(DType::F64);
    let w = LossWeights::new(0.7, 1.9, 0.4).unwrap();
    let grads = composite_loss(&terms(&model, &batch), w).unwrap().backward().unwrap();
    let mut vars: Vec<_> = model.params.named_vars().map(|(n, v)| (n.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    let eps = 1e-4;
    for (i, (name, var)) in vars.iter().enumerate().step_by(3) {
        let mut flat = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let k = (i * 7919) % flat.len();
        let orig = flat[k];
        set_entry(var, &mut flat, k, orig + eps);
        let plus = terms(&model, &batch).values().unwrap();
        set_entry(var, &mut flat, k, orig - eps);
        let minus = terms(&model, &batch).values().unwrap();
        set_entry(var, &mut flat, k, orig);
        let d: Vec<f64> = (0..3).map(|t| (plus[t] - minus[t]) / (2.0 * eps)).collect();
        let numeric = w.w1 * d[0] + w.w2 * d[1] + w.w3 * d[2];
        let analytic = grads
            .get(var.as_tensor())
            .map_or(0.0, |g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[k]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= 1e-3, "{name}[{k}]: analytic {analytic}, numeric {numeric}");
    }
}

/// With w2 = w3 = 0 the objective is the height loss alone, bit for bit,
/// in both value and gradient.
#[test]
fn height_only_weights_reduce_to_height_loss() {
    let model = MultiTaskModel::build(&MultiTaskSpec::tiny(6), DType::F32, 12).unwrap();
    let batch = tiny_batch(DType::F32);
    let t = terms(&model, &batch);
    let composite = composite_loss(&t, LossWeights::height_only()).unwrap();
    let out = model.forward(&batch.rgb, &mut Dropout::Off).unwrap();
    let single = loss_height(&out.height, &batch.height).unwrap();
    assert_eq!(scalar(&composite).to_bits(), scalar(&single).to_bits());
    let ga = composite.backward().unwrap();
    let gb = single.backward().unwrap();
    for (name, var) in model.params.named_vars() {
        let a = ga.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let b = gb.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let zero = |g: Option<Vec<f32>>| g.unwrap_or_default().into_iter().all(|v| v == 0.0);
        match (a, b) {
            (Some(a), Some(b)) => assert_eq!(a, b, "{name}"),
            (a, b) => assert!(zero(a) && zero(b), "{name}"),
        }
    }
}

/// Parameter counts per spec, recorded when the architectures were first built.
#[test]
fn parameter_counts_are_stable() {
    let mt = |s: &MultiTaskSpec| MultiTaskModel::build(s, DType::F32, 0).unwrap().params.num_parameters();
    let rf = |s: &RefinerSpec| RefinerModel::build(s, DType::F32, 0).unwrap().params.num_parameters();
    let counts = [
        mt(&MultiTaskSpec::tiny(6)),
        mt(&MultiTaskSpec::desk(6, 64)),
        mt(&MultiTaskSpec::paper_reference(6)),
        rf(&RefinerSpec::tiny(6)),
        rf(&RefinerSpec::desk(6, 64)),
        rf(&RefinerSpec::paper_reference(6)),
    ];
    assert_eq!(counts, ANCHORS);
}

const ANCHORS: [usize; 6] = [36_950, 2_961_242, 154_934_858, 4_161, 540_937, 34_519_105];
