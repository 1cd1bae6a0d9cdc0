//! Network definitions: the multi-task predictor and the refinement U-Net.

pub mod checkpoint;
mod layers;
mod multitask;
mod refiner;
mod spec;

pub use layers::{channel_softmax, Conv, Dropout, ParamStore, UpConv};
pub use multitask::{EncoderFeatures, FeatureEncoder, MultiTaskModel, MultiTaskNet, MultiTaskOutput};
pub use refiner::{RefinerModel, RefinerNet};
pub use spec::{
    EncoderFamily, EncoderSpec, MultiTaskSpec, RefinerInputMode, RefinerSpec, ENCODER_STRIDE,
};

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, shape, Result};
use crate::raster::{LabelGrid, RasterGrid};

/// One layer of a shape trace, `(height, width, channels)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub layer: String,
    pub shape: (usize, usize, usize),
}

impl TraceRow {
    pub fn new(layer: impl Into<String>, shape: (usize, usize, usize)) -> Self {
        Self {
            layer: layer.into(),
            shape,
        }
    }
}

/// Stacks equally shaped HWC grids into an NCHW tensor.
pub fn grids_to_tensor(grids: &[&RasterGrid], dtype: DType) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| invalid("empty batch"))?;
    let (h, w, c) = first.shape();
    let mut data: Vec<f32> = Vec::with_capacity(grids.len() * h * w * c);
    for g in grids {
        if g.shape() != (h, w, c) {
            return Err(shape(format!("batch mixes {:?} and {:?}", (h, w, c), g.shape())));
        }
        for ch in 0..c {
            data.extend(g.data().iter().skip(ch).step_by(c));
        }
    }
    Ok(Tensor::from_vec(data, (grids.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits an NCHW tensor back into HWC grids.
pub fn tensor_to_grids(t: &Tensor, gsd_m: f32) -> Result<Vec<RasterGrid>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t
        .to_dtype(DType::F32)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f32>()?;
    flat.chunks_exact(h * w * c)
        .take(b)
        .map(|chunk| RasterGrid::new(h, w, c, gsd_m, chunk.to_vec()))
        .collect()
}

/// `(B, H, W)` u32 class indices.
pub fn labels_to_tensor(labels: &[&LabelGrid]) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| invalid("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(shape("label batch mixes shapes"));
        }
        data.extend(l.labels().iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(data, (labels.len(), h, w), &Device::Cpu)?)
}

/// Refiner input in the fixed channel order `[RGB, P_h, P_s, P_n]`.
pub fn refiner_input(rgb: &Tensor, stage1: &MultiTaskOutput) -> Result<Tensor> {
    Ok(Tensor::cat(
        &[rgb, &stage1.height, &stage1.semantic, &stage1.normals],
        1,
    )?)
}

/// Stage-1 forward; dropout is active only when `dropout` is `On`.
pub fn forward_multitask(
    model: &MultiTaskModel,
    rgb: &Tensor,
    dropout: &mut Dropout<'_>,
) -> Result<MultiTaskOutput> {
    model.forward(rgb, dropout)
}

pub fn forward_refiner(model: &RefinerModel, z: &Tensor) -> Result<Tensor> {
    model.forward(z)
}

/// Expected Table-1 style trace for a multi-task spec.
pub fn expected_multitask_trace(spec: &MultiTaskSpec) -> Vec<TraceRow> {
    let (h, w, _) = spec.input_size;
    let mut rows = vec![TraceRow::new(
        "Encoder",
        (h / 32, w / 32, spec.encoder.bottleneck_channels),
    )];
    for (k, &cw) in spec.stage_widths.iter().enumerate() {
        let scale = 1 << (4 - k);
        let (sh, sw) = (h / scale, w / scale);
        rows.push(TraceRow::new(format!("DeConv_{}", k + 1), (sh, sw, cw)));
        rows.push(TraceRow::new("Concat", (sh, sw, 3 * cw)));
        rows.push(TraceRow::new(format!("Conv_{}1", k + 1), (sh, sw, cw)));
        rows.push(TraceRow::new(format!("Conv_{}2", k + 1), (sh, sw, cw)));
    }
    rows.push(TraceRow::new("Conv_out", (h, w, 1)));
    rows
}
