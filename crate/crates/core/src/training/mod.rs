//! Two-stage training: the multi-task network first, then the refiner on top of
//! the frozen stage-1 outputs.

mod loss;

pub use loss::{
    balance_from_means, composite_loss, composite_value, loss_height, loss_normals, loss_semantic,
    LossTerms, LossWeights, LOG_CLAMP,
};

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, CropSample};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    grids_to_tensor, labels_to_tensor, refiner_input, Dropout, MultiTaskModel, MultiTaskOutput,
    RefinerModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub crop_size: usize,
    /// Batches per epoch; `None` means one pass over the samples.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            crop_size: 320,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            crop_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.crop_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(invalid("batch_size, crop_size and steps_per_epoch must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> ParamsAdamW {
        // Adam: decoupled weight decay switched off
        ParamsAdamW {
            lr: self.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Mean training losses of one epoch. Stage-1 rows leave `l_r` empty and
/// stage-2 rows leave the stage-1 terms empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_h: Option<f64>,
    pub l_s: Option<f64>,
    pub l_n: Option<f64>,
    pub l: Option<f64>,
    pub l_r: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,L_h,L_s,L_n,L,L_r";

pub fn metrics_csv(rows: &[EpochRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.8e}")).unwrap_or_default();
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            cell(r.l_h),
            cell(r.l_s),
            cell(r.l_n),
            cell(r.l),
            cell(r.l_r)
        );
    }
    s
}

/// Appends rows to a metrics log, writing the header when the file is new.
pub fn append_metrics(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let text = metrics_csv(rows);
    let body = if fresh {
        text.as_str()
    } else {
        text.split_once('\n').map(|(_, b)| b).unwrap_or("")
    };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One mini-batch as NCHW tensors.
pub struct Batch {
    pub rgb: Tensor,
    pub height: Tensor,
    pub labels: Tensor,
    pub normals: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&CropSample], dtype: DType) -> Result<Self> {
        let rgb: Vec<_> = samples.iter().map(|s| &s.rgb).collect();
        let height: Vec<_> = samples.iter().map(|s| &s.height).collect();
        let normals: Vec<_> = samples.iter().map(|s| &s.normals).collect();
        let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
        Ok(Self {
            rgb: grids_to_tensor(&rgb, dtype)?,
            height: grids_to_tensor(&height, dtype)?,
            labels: labels_to_tensor(&labels)?,
            normals: grids_to_tensor(&normals, dtype)?,
        })
    }

    /// Ground truth arranged like a stage-1 output: heights, one-hot classes, normals.
    pub fn as_perfect_output(&self, num_classes: usize) -> Result<MultiTaskOutput> {
        let (b, h, w) = self.labels.dims3()?;
        let labels = self.labels.flatten_all()?.to_vec1::<u32>()?;
        let mut onehot = vec![0f32; b * num_classes * h * w];
        for (i, &c) in labels.iter().enumerate() {
            let (n, p) = (i / (h * w), i % (h * w));
            onehot[(n * num_classes + c as usize) * h * w + p] = 1.0;
        }
        let semantic = Tensor::from_vec(onehot, (b, num_classes, h, w), &Device::Cpu)?
            .to_dtype(self.height.dtype())?;
        Ok(MultiTaskOutput {
            height: self.height.clone(),
            semantic,
            normals: self.normals.clone(),
        })
    }
}

/// Stage-1 loss terms for one batch.
pub fn loss_terms(out: &MultiTaskOutput, batch: &Batch) -> Result<LossTerms> {
    Ok(LossTerms {
        height: loss_height(&out.height, &batch.height)?,
        semantic: loss_semantic(&out.semantic, &batch.labels)?,
        normals: loss_normals(&out.normals, &batch.normals)?,
    })
}

/// Batch order for one epoch, deterministic in `(seed, epoch)`.
fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
    let steps = cfg.steps_per_epoch.unwrap_or(n.div_ceil(cfg.batch_size));
    let mut order: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                if cfg.steps_per_epoch.is_none() && !batches.is_empty() && batch.is_empty() {
                    break;
                }
                order = (0..n).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
            if cfg.steps_per_epoch.is_none() && order.is_empty() {
                break;
            }
        }
        if !batch.is_empty() {
            batches.push(batch);
        }
    }
    batches
}

fn check_samples(data: &[CropSample], size: (usize, usize), num_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    for s in data {
        if (s.rgb.height(), s.rgb.width()) != size {
            return Err(invalid(format!(
                "crop from {} is {}x{}, model expects {:?}",
                s.source_tile,
                s.rgb.height(),
                s.rgb.width(),
                size
            )));
        }
        if s.labels.num_classes() != num_classes {
            return Err(invalid(format!(
                "crop from {} has {} classes, model expects {num_classes}",
                s.source_tile,
                s.labels.num_classes()
            )));
        }
    }
    Ok(())
}

/// Mean unweighted losses over the probe batches at the current parameters,
/// turned into weights that equalize the three terms.
pub fn auto_balance_weights(model: &MultiTaskModel, probes: &[Batch]) -> Result<LossWeights> {
    if probes.is_empty() {
        return Err(invalid("auto-balancing needs at least one probe batch"));
    }
    let mut sums = [0.0; 3];
    for b in probes {
        let out = model.forward(&b.rgb, &mut Dropout::Off)?;
        let v = loss_terms(&out, b)?.values()?;
        for k in 0..3 {
            sums[k] += v[k];
        }
    }
    let n = probes.len() as f64;
    Ok(balance_from_means([sums[0] / n, sums[1] / n, sums[2] / n]))
}

/// Probe batches for weight balancing: the first `count` batches of epoch 0.
pub fn probe_batches(
    data: &[CropSample],
    cfg: &TrainConfig,
    dtype: DType,
    count: usize,
) -> Result<Vec<Batch>> {
    epoch_batches(data.len(), cfg, 0)
        .into_iter()
        .take(count.max(1))
        .map(|idx| {
            let s: Vec<&CropSample> = idx.iter().map(|&i| &data[i]).collect();
            Batch::from_samples(&s, dtype)
        })
        .collect()
}

/// Epoch numbering and per-epoch callback shared by both stages.
pub struct EpochPlan<'a> {
    /// Number given to the first epoch trained in this call.
    pub first_epoch: usize,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord) -> Result<()>>,
}

impl Default for EpochPlan<'_> {
    fn default() -> Self {
        Self {
            first_epoch: 1,
            on_epoch: None,
        }
    }
}

impl EpochPlan<'_> {
    fn finish(&mut self, rec: &EpochRecord) -> Result<()> {
        log::info!("epoch {}: {}", rec.epoch, metrics_csv(&[*rec]).lines().nth(1).unwrap_or(""));
        match self.on_epoch.as_mut() {
            Some(f) => f(rec),
            None => Ok(()),
        }
    }
}

/// Adam on the composite loss. Returns one record per epoch.
pub fn train_stage1(
    model: &MultiTaskModel,
    data: &[CropSample],
    cfg: &TrainConfig,
    weights: LossWeights,
    mut plan: EpochPlan<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let (h, w, _) = model.spec.input_size;
    check_samples(data, (h, w), model.spec.num_classes)?;
    let dtype = model.params.dtype();
    let mut opt = AdamW::new(model.params.vars(), cfg.adam())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for e in 0..cfg.epochs {
        let epoch = plan.first_epoch + e;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xD50F, epoch as u64));
        let mut sums = [0.0; 4];
        let batches = epoch_batches(data.len(), cfg, epoch);
        for idx in &batches {
            let samples: Vec<&CropSample> = idx.iter().map(|&i| &data[i]).collect();
            let batch = Batch::from_samples(&samples, dtype)?;
            let out = model.forward(&batch.rgb, &mut Dropout::On(&mut drop_rng))?;
            let terms = loss_terms(&out, &batch)?;
            let total = composite_loss(&terms, weights)?;
            let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            loss::check_finite(value, step)?;
            opt.backward_step(&total)?;
            let v = terms.values()?;
            for k in 0..3 {
                sums[k] += v[k];
            }
            sums[3] += value;
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            l_h: Some(sums[0] / n),
            l_s: Some(sums[1] / n),
            l_n: Some(sums[2] / n),
            l: Some(sums[3] / n),
            l_r: None,
        };
        plan.finish(&rec)?;
        history.push(rec);
    }
    Ok(history)
}

/// Where the refiner's `P_h, P_s, P_n` inputs come from.
pub enum Stage1Source<'a> {
    /// A trained multi-task model, run without dropout and kept frozen.
    Model(&'a MultiTaskModel),
    /// Ground truth standing in for a perfect stage 1.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Inputs {
    /// Stage-1 forward for every batch.
    #[default]
    OnTheFly,
    /// Stage-1 outputs computed once per sample and reused across epochs.
    Cached,
}

fn stage1_outputs(source: &Stage1Source<'_>, batch: &Batch, num_classes: usize) -> Result<Tensor> {
    let out = match source {
        Stage1Source::Model(m) => {
            let o = m.forward(&batch.rgb, &mut Dropout::Off)?;
            MultiTaskOutput {
                height: o.height.detach(),
                semantic: o.semantic.detach(),
                normals: o.normals.detach(),
            }
        }
        Stage1Source::GroundTruth => batch.as_perfect_output(num_classes)?,
    };
    refiner_input(&batch.rgb, &out)
}

/// Trains the refiner on `z = [RGB, P_h, P_s, P_n]` with the mean squared
/// error against ground-truth heights. Stage-1 parameters must come out
/// bit-identical; any change is reported as an error.
pub fn train_stage2(
    source: Stage1Source<'_>,
    refiner: &RefinerModel,
    data: &[CropSample],
    cfg: &TrainConfig,
    inputs: Stage2Inputs,
    mut plan: EpochPlan<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let num_classes = refiner.spec.num_classes;
    check_samples(data, refiner.spec.input_size, num_classes)?;
    if let Stage1Source::Model(m) = &source {
        if m.spec.num_classes != num_classes {
            return Err(invalid("stage-1 and refiner disagree on num_classes"));
        }
    }
    let before = match &source {
        Stage1Source::Model(m) => Some(m.params.checksum()?),
        Stage1Source::GroundTruth => None,
    };
    let dtype = refiner.params.dtype();

    let cache: Option<Vec<Tensor>> = match inputs {
        Stage2Inputs::OnTheFly => None,
        Stage2Inputs::Cached => Some(
            data.iter()
                .map(|s| stage1_outputs(&source, &Batch::from_samples(&[s], dtype)?, num_classes))
                .collect::<Result<_>>()?,
        ),
    };

    let mut opt = AdamW::new(refiner.params.vars(), cfg.adam())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for e in 0..cfg.epochs {
        let epoch = plan.first_epoch + e;
        let batches = epoch_batches(data.len(), cfg, epoch);
        let mut sum = 0.0;
        for idx in &batches {
            let samples: Vec<&CropSample> = idx.iter().map(|&i| &data[i]).collect();
            let batch = Batch::from_samples(&samples, dtype)?;
            let z = match &cache {
                Some(c) => Tensor::cat(&idx.iter().map(|&i| &c[i]).collect::<Vec<_>>(), 0)?,
                None => stage1_outputs(&source, &batch, num_classes)?,
            };
            let pred = refiner.forward(&z)?;
            let l_r = loss_height(&pred, &batch.height)?;
            let value = l_r.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            loss::check_finite(value, step)?;
            opt.backward_step(&l_r)?;
            sum += value;
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            l_r: Some(sum / batches.len().max(1) as f64),
            ..EpochRecord::default()
        };
        plan.finish(&rec)?;
        history.push(rec);
    }

    if let (Some(before), Stage1Source::Model(m)) = (before, &source) {
        if m.params.checksum()? != before {
            return Err(Error::FrozenParametersChanged);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_cover_each_sample_once() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let b = epoch_batches(10, &cfg, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, &cfg, 1));
        assert_ne!(b, epoch_batches(10, &cfg, 2));
    }

    #[test]
    fn fixed_epoch_size_wraps() {
        let cfg = TrainConfig {
            batch_size: 4,
            steps_per_epoch: Some(5),
            ..TrainConfig::default()
        };
        let b = epoch_batches(6, &cfg, 0);
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|x| x.len() == 4));
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [
            EpochRecord {
                epoch: 1,
                l_h: Some(1.0),
                l_s: Some(2.0),
                l_n: Some(3.0),
                l: Some(6.0),
                l_r: None,
            },
            EpochRecord {
                epoch: 2,
                l_r: Some(0.5),
                ..EpochRecord::default()
            },
        ];
        let text = metrics_csv(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("1,1.00000000e0,"));
        assert!(lines[1].ends_with(','));
        assert_eq!(lines[2], "2,,,,,5.00000000e-1");
    }

    #[test]
    fn append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = EpochRecord {
            epoch: 1,
            l_r: Some(1.0),
            ..EpochRecord::default()
        };
        append_metrics(&p, &[r]).unwrap();
        append_metrics(&p, &[EpochRecord { epoch: 2, ..r }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.matches("epoch").count(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
