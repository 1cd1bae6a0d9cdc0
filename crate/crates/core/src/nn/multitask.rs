//! Shared encoder with three decoder branches (height, semantics, normals).
//!
//! Every decoder stage upsamples with a 2x2 transposed convolution, concatenates
//! the upsampled features with a projected encoder skip, and applies two 3x3
//! convolutions. The height branch additionally concatenates a 1x1 projection
//! of the same-stage semantic and normal features, so its concat is three
//! stage-widths wide.

use candle_core::{DType, Tensor};

use super::layers::{cat_channels, channel_softmax, hwc, Conv, Dropout, ParamStore, UpConv};
use super::spec::{EncoderFamily, MultiTaskSpec};
use super::TraceRow;
use crate::error::{shape, Result};

pub struct EncoderFeatures {
    /// Features at input/2, /4, /8, /16.
    pub skips: [Tensor; 4],
    /// Features at input/32.
    pub bottleneck: Tensor,
}

/// Anything that maps an RGB batch to four skip maps and a bottleneck.
pub trait FeatureEncoder: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<EncoderFeatures>;
    fn skip_channels(&self) -> [usize; 4];
    fn bottleneck_channels(&self) -> usize;
}

struct PlainEncoder {
    levels: Vec<(Conv, Conv)>,
    skip_channels: [usize; 4],
    bottleneck: usize,
}

impl PlainEncoder {
    fn new(ps: &mut ParamStore, skip: [usize; 4], bottleneck: usize) -> Result<Self> {
        let widths = [skip[0], skip[1], skip[2], skip[3], bottleneck];
        let mut levels = Vec::with_capacity(5);
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let down = Conv::new(ps, &format!("encoder.l{i}.down"), c_in, w, 3, 2)?;
            let conv = Conv::new(ps, &format!("encoder.l{i}.conv"), w, w, 3, 1)?;
            levels.push((down, conv));
            c_in = w;
        }
        Ok(Self {
            levels,
            skip_channels: skip,
            bottleneck,
        })
    }
}

impl FeatureEncoder for PlainEncoder {
    fn forward(&self, x: &Tensor) -> Result<EncoderFeatures> {
        let mut feats = Vec::with_capacity(5);
        let mut h = x.clone();
        for (down, conv) in &self.levels {
            h = down.forward(&h)?.relu()?;
            h = conv.forward(&h)?.relu()?;
            feats.push(h.clone());
        }
        let bottleneck = feats.pop().expect("five levels");
        let skips: [Tensor; 4] = feats.try_into().map_err(|_| shape("encoder levels"))?;
        Ok(EncoderFeatures { skips, bottleneck })
    }

    fn skip_channels(&self) -> [usize; 4] {
        self.skip_channels
    }

    fn bottleneck_channels(&self) -> usize {
        self.bottleneck
    }
}

struct DenseBlock {
    layers: Vec<Conv>,
    transition: Conv,
}

impl DenseBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for layer in &self.layers {
            let input = cat_channels(&feats.iter().collect::<Vec<_>>())?;
            feats.push(layer.forward(&input)?.relu()?);
        }
        let all = cat_channels(&feats.iter().collect::<Vec<_>>())?;
        Ok(self.transition.forward(&all)?.relu()?)
    }
}

/// Strided stem followed by pooled dense blocks, one per resolution.
struct DenseEncoder {
    stem: Conv,
    blocks: Vec<DenseBlock>,
    skip_channels: [usize; 4],
    bottleneck: usize,
}

impl DenseEncoder {
    fn new(
        ps: &mut ParamStore,
        skip: [usize; 4],
        bottleneck: usize,
        growth: usize,
        layers: usize,
    ) -> Result<Self> {
        let stem = Conv::new(ps, "encoder.stem", 3, skip[0], 3, 2)?;
        let outs = [skip[1], skip[2], skip[3], bottleneck];
        let mut c_in = skip[0];
        let mut blocks = Vec::with_capacity(4);
        for (b, &out) in outs.iter().enumerate() {
            let mut convs = Vec::with_capacity(layers);
            for l in 0..layers {
                convs.push(Conv::new(
                    ps,
                    &format!("encoder.block{b}.dense{l}"),
                    c_in + l * growth,
                    growth,
                    3,
                    1,
                )?);
            }
            let transition = Conv::new(
                ps,
                &format!("encoder.block{b}.transition"),
                c_in + layers * growth,
                out,
                1,
                1,
            )?;
            blocks.push(DenseBlock {
                layers: convs,
                transition,
            });
            c_in = out;
        }
        Ok(Self {
            stem,
            blocks,
            skip_channels: skip,
            bottleneck,
        })
    }
}

impl FeatureEncoder for DenseEncoder {
    fn forward(&self, x: &Tensor) -> Result<EncoderFeatures> {
        let mut h = self.stem.forward(x)?.relu()?;
        let mut feats = vec![h.clone()];
        for block in &self.blocks {
            h = block.forward(&h.max_pool2d(2)?)?;
            feats.push(h.clone());
        }
        let bottleneck = feats.pop().expect("five levels");
        let skips: [Tensor; 4] = feats.try_into().map_err(|_| shape("encoder levels"))?;
        Ok(EncoderFeatures { skips, bottleneck })
    }

    fn skip_channels(&self) -> [usize; 4] {
        self.skip_channels
    }

    fn bottleneck_channels(&self) -> usize {
        self.bottleneck
    }
}

fn build_encoder(spec: &MultiTaskSpec, ps: &mut ParamStore) -> Result<Box<dyn FeatureEncoder>> {
    let e = &spec.encoder;
    Ok(match e.family {
        EncoderFamily::PlainConv => {
            Box::new(PlainEncoder::new(ps, e.skip_channels, e.bottleneck_channels)?)
        }
        EncoderFamily::DenseSkip => Box::new(DenseEncoder::new(
            ps,
            e.skip_channels,
            e.bottleneck_channels,
            e.growth,
            e.dense_layers,
        )?),
    })
}

struct DecoderStage {
    up: UpConv,
    skip_proj: Conv,
    fuse: Option<Conv>,
    conv1: Conv,
    conv2: Conv,
}

struct Branch {
    stages: Vec<DecoderStage>,
    head: Conv,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BranchKind {
    Height,
    Semantic,
    Normals,
}

impl Branch {
    fn new(
        ps: &mut ParamStore,
        kind: BranchKind,
        spec: &MultiTaskSpec,
        encoder: &dyn FeatureEncoder,
    ) -> Result<Self> {
        let (name, out) = match kind {
            BranchKind::Height => ("height", 1),
            BranchKind::Semantic => ("semantic", spec.num_classes),
            BranchKind::Normals => ("normals", 3),
        };
        let skips = encoder.skip_channels();
        let mut c_in = encoder.bottleneck_channels();
        let mut stages = Vec::with_capacity(5);
        for (k, &cw) in spec.stage_widths.iter().enumerate() {
            let p = format!("{name}.stage{}", k + 1);
            let up = UpConv::new(ps, &format!("{p}.up"), c_in, cw)?;
            let skip_proj = if k < 4 {
                Conv::new(ps, &format!("{p}.skip"), skips[3 - k], cw, 1, 1)?
            } else {
                Conv::new(ps, &format!("{p}.skip"), 3, cw, 3, 1)?
            };
            let (fuse, concat) = if kind == BranchKind::Height {
                (Some(Conv::new(ps, &format!("{p}.fuse"), 2 * cw, cw, 1, 1)?), 3 * cw)
            } else {
                (None, 2 * cw)
            };
            let conv1 = Conv::new(ps, &format!("{p}.conv1"), concat, cw, 3, 1)?;
            let conv2 = Conv::new(ps, &format!("{p}.conv2"), cw, cw, 3, 1)?;
            stages.push(DecoderStage {
                up,
                skip_proj,
                fuse,
                conv1,
                conv2,
            });
            c_in = cw;
        }
        let head = Conv::new(ps, &format!("{name}.head"), c_in, out, 1, 1)?;
        Ok(Self { stages, head })
    }
}

/// Raw stage-1 outputs, NCHW.
#[derive(Debug, Clone)]
pub struct MultiTaskOutput {
    /// `(B, 1, H, W)` heights in meters.
    pub height: Tensor,
    /// `(B, C, H, W)` per-pixel class probabilities.
    pub semantic: Tensor,
    /// `(B, 3, H, W)` encoded normals.
    pub normals: Tensor,
}

pub struct MultiTaskNet {
    encoder: Box<dyn FeatureEncoder>,
    height: Branch,
    semantic: Branch,
    normals: Branch,
    dropout_rate: f64,
    input_size: (usize, usize, usize),
}

impl MultiTaskNet {
    pub fn new(spec: &MultiTaskSpec, ps: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let encoder = build_encoder(spec, ps)?;
        Self::with_encoder(spec, ps, encoder)
    }

    /// Builds the decoders around a caller-supplied encoder.
    pub fn with_encoder(
        spec: &MultiTaskSpec,
        ps: &mut ParamStore,
        encoder: Box<dyn FeatureEncoder>,
    ) -> Result<Self> {
        spec.validate()?;
        let height = Branch::new(ps, BranchKind::Height, spec, encoder.as_ref())?;
        let semantic = Branch::new(ps, BranchKind::Semantic, spec, encoder.as_ref())?;
        let normals = Branch::new(ps, BranchKind::Normals, spec, encoder.as_ref())?;
        Ok(Self {
            encoder,
            height,
            semantic,
            normals,
            dropout_rate: spec.dropout_rate,
            input_size: spec.input_size,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        dropout: &mut Dropout<'_>,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<MultiTaskOutput> {
        let (_, c, h, w) = x.dims4()?;
        if (h, w, c) != self.input_size {
            return Err(shape(format!(
                "multi-task input is {h}x{w}x{c}, model expects {:?}",
                self.input_size
            )));
        }
        let mut record = |name: String, t: &Tensor| -> Result<()> {
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(TraceRow::new(name, hwc(t)?));
            }
            Ok(())
        };
        let feats = self.encoder.forward(x)?;
        record("Encoder".into(), &feats.bottleneck)?;

        let mut hx = feats.bottleneck.clone();
        let mut sx = feats.bottleneck.clone();
        let mut nx = feats.bottleneck.clone();
        for k in 0..5 {
            let skip_src = if k < 4 { &feats.skips[3 - k] } else { x };
            let (ss, ns, hs) = (
                &self.semantic.stages[k],
                &self.normals.stages[k],
                &self.height.stages[k],
            );

            let s_up = ss.up.forward(&sx)?.relu()?;
            let s_cat = cat_channels(&[&s_up, &ss.skip_proj.forward(skip_src)?])?;
            sx = ss.conv2.forward(&ss.conv1.forward(&s_cat)?.relu()?)?.relu()?;

            let n_up = ns.up.forward(&nx)?.relu()?;
            let n_cat = cat_channels(&[&n_up, &ns.skip_proj.forward(skip_src)?])?;
            nx = ns.conv2.forward(&ns.conv1.forward(&n_cat)?.relu()?)?.relu()?;

            let h_up = dropout.apply(&hs.up.forward(&hx)?.relu()?, self.dropout_rate)?;
            record(format!("DeConv_{}", k + 1), &h_up)?;
            let fuse = hs
                .fuse
                .as_ref()
                .expect("height branch fuses")
                .forward(&cat_channels(&[&sx, &nx])?)?;
            let h_cat = cat_channels(&[&h_up, &hs.skip_proj.forward(skip_src)?, &fuse])?;
            record("Concat".into(), &h_cat)?;
            let h1 = hs.conv1.forward(&h_cat)?.relu()?;
            record(format!("Conv_{}1", k + 1), &h1)?;
            hx = hs.conv2.forward(&h1)?.relu()?;
            record(format!("Conv_{}2", k + 1), &hx)?;
        }
        let height = self.height.head.forward(&hx)?;
        record("Conv_out".into(), &height)?;
        let semantic = channel_softmax(&self.semantic.head.forward(&sx)?)?;
        let normals = self.normals.head.forward(&nx)?;
        Ok(MultiTaskOutput {
            height,
            semantic,
            normals,
        })
    }
}

/// A multi-task network together with its spec and parameters.
pub struct MultiTaskModel {
    pub spec: MultiTaskSpec,
    pub params: ParamStore,
    pub net: MultiTaskNet,
}

impl MultiTaskModel {
    pub fn build(spec: &MultiTaskSpec, dtype: DType, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(dtype, seed);
        let net = MultiTaskNet::new(spec, &mut params)?;
        Ok(Self {
            spec: spec.clone(),
            params,
            net,
        })
    }

    pub fn forward(&self, x: &Tensor, dropout: &mut Dropout<'_>) -> Result<MultiTaskOutput> {
        self.net.forward(x, dropout, None)
    }

    pub fn trace(&self, x: &Tensor) -> Result<(MultiTaskOutput, Vec<TraceRow>)> {
        let mut rows = Vec::new();
        let out = self.net.forward(x, &mut Dropout::Off, Some(&mut rows))?;
        Ok((out, rows))
    }
}
