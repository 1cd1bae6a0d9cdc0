//! U-Net refiner: five conv blocks with 2x2 max-pooling between them, four
//! nearest-neighbor upsampling stages with skip concatenation, and a 1x1
//! single-channel output.

use candle_core::{DType, Tensor};

use super::layers::{cat_channels, hwc, Conv, ParamStore};
use super::spec::{RefinerInputMode, RefinerSpec};
use super::TraceRow;
use crate::error::{shape, Result};

struct ConvBlock {
    a: Conv,
    b: Conv,
}

impl ConvBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            a: Conv::new(ps, &format!("{name}.a"), c_in, c_out, 3, 1)?,
            b: Conv::new(ps, &format!("{name}.b"), c_out, c_out, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.relu()?)?.relu()?)
    }
}

struct UpStage {
    up: Conv,
    block: ConvBlock,
}

pub struct RefinerNet {
    down: Vec<ConvBlock>,
    up: Vec<UpStage>,
    out: Conv,
    input_channels: usize,
    input_size: (usize, usize),
    mode: RefinerInputMode,
    residual: bool,
}

impl RefinerNet {
    pub fn new(spec: &RefinerSpec, ps: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let mut down = Vec::with_capacity(5);
        let mut c_in = spec.input_channels;
        for (i, &w) in spec.encoder_widths.iter().enumerate() {
            down.push(ConvBlock::new(ps, &format!("refiner.conv{}", i + 1), c_in, w)?);
            c_in = w;
        }
        let mut up = Vec::with_capacity(4);
        for (k, &w) in spec.decoder_widths.iter().enumerate() {
            let skip = spec.encoder_widths[3 - k];
            up.push(UpStage {
                up: Conv::new(ps, &format!("refiner.up{}", k + 1), c_in, w, 3, 1)?,
                block: ConvBlock::new(ps, &format!("refiner.conv{}", k + 6), w + skip, w)?,
            });
            c_in = w;
        }
        let out = Conv::new(ps, "refiner.out", c_in, 1, 1, 1)?;
        if spec.residual {
            let w = ps.get("refiner.out.weight").expect("output conv weight registered");
            w.set(&w.zeros_like()?)?;
        }
        Ok(Self {
            down,
            up,
            out,
            input_channels: spec.input_channels,
            input_size: spec.input_size,
            mode: spec.input_mode,
            residual: spec.residual,
        })
    }

    pub fn forward(&self, z: &Tensor, mut trace: Option<&mut Vec<TraceRow>>) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.input_channels {
            return Err(shape(format!(
                "refiner input has {c} channels, expected {}",
                self.input_channels
            )));
        }
        if (h, w) != self.input_size {
            return Err(shape(format!(
                "refiner input is {h}x{w}, model expects {:?}",
                self.input_size
            )));
        }
        let mut record = |name: String, t: &Tensor| -> Result<()> {
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(TraceRow::new(name, hwc(t)?));
            }
            Ok(())
        };
        let p_h = z.narrow(1, 3, 1)?;
        let z = match self.mode {
            RefinerInputMode::Full => z.clone(),
            RefinerInputMode::HeightOnly => {
                let mut mask = vec![0f32; c];
                mask[3] = 1.0;
                let mask = Tensor::from_vec(mask, (1, c, 1, 1), z.device())?.to_dtype(z.dtype())?;
                z.broadcast_mul(&mask)?
            }
        };

        let mut skips = Vec::with_capacity(4);
        let mut x = z;
        for (i, block) in self.down.iter().enumerate() {
            x = block.forward(&x)?;
            record(format!("Conv_{}", i + 1), &x)?;
            if i < 4 {
                skips.push(x.clone());
                x = x.max_pool2d(2)?;
                record("MaxPooling".into(), &x)?;
            }
        }
        for (k, stage) in self.up.iter().enumerate() {
            let (_, _, h, w) = x.dims4()?;
            x = stage.up.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?.relu()?;
            record("Upsampling".into(), &x)?;
            x = cat_channels(&[&x, &skips[3 - k]])?;
            record("Concat".into(), &x)?;
            x = stage.block.forward(&x)?;
            record(format!("Conv_{}", k + 6), &x)?;
        }
        let mut out = self.out.forward(&x)?;
        if self.residual {
            out = out.add(&p_h)?;
        }
        record("Conv_out".into(), &out)?;
        Ok(out)
    }
}

pub struct RefinerModel {
    pub spec: RefinerSpec,
    pub params: ParamStore,
    pub net: RefinerNet,
}

impl RefinerModel {
    pub fn build(spec: &RefinerSpec, dtype: DType, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(dtype, seed);
        let net = RefinerNet::new(spec, &mut params)?;
        Ok(Self {
            spec: spec.clone(),
            params,
            net,
        })
    }

    /// Refined heights `(B, 1, H, W)` from `z = [RGB, P_h, P_s, P_n]`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.net.forward(z, None)
    }

    pub fn trace(&self, z: &Tensor) -> Result<(Tensor, Vec<TraceRow>)> {
        let mut rows = Vec::new();
        let out = self.net.forward(z, Some(&mut rows))?;
        Ok((out, rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn trace_and_output_shape() {
        let spec = RefinerSpec::tiny(4);
        let m = RefinerModel::build(&spec, DType::F32, 0).unwrap();
        let z = Tensor::rand(0f32, 1f32, (2, 11, 32, 32), &Device::Cpu).unwrap();
        let (out, rows) = m.trace(&z).unwrap();
        assert_eq!(out.dims(), &[2, 1, 32, 32]);
        let names: Vec<&str> = rows.iter().map(|r| r.layer.as_str()).collect();
        assert_eq!(names[0], "Conv_1");
        assert_eq!(names[1], "MaxPooling");
        assert_eq!(names[8], "Conv_5");
        assert_eq!(rows[8].shape, (2, 2, 4));
        assert_eq!(names.last(), Some(&"Conv_out"));
        assert_eq!(rows.len(), 9 + 4 * 3 + 1);
    }

    #[test]
    fn height_only_ignores_other_channels() {
        let mut spec = RefinerSpec::tiny(4);
        spec.input_mode = RefinerInputMode::HeightOnly;
        let m = RefinerModel::build(&spec, DType::F32, 0).unwrap();
        let z = Tensor::rand(0f32, 1f32, (1, 11, 32, 32), &Device::Cpu).unwrap();
        let noise = Tensor::rand(0f32, 1f32, (1, 11, 32, 32), &Device::Cpu).unwrap();
        let mut keep = vec![1f32; 11];
        keep[3] = 0.0;
        let keep = Tensor::from_vec(keep, (1, 11, 1, 1), &Device::Cpu).unwrap();
        let z2 = z.add(&noise.broadcast_mul(&keep).unwrap()).unwrap();
        let a = m.forward(&z).unwrap();
        let b = m.forward(&z2).unwrap();
        let d = a.sub(&b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn residual_refiner_starts_as_identity_on_height() {
        let mut spec = RefinerSpec::tiny(4);
        spec.residual = true;
        let m = RefinerModel::build(&spec, DType::F32, 3).unwrap();
        let z = Tensor::rand(0f32, 1f32, (2, 11, 32, 32), &Device::Cpu).unwrap();
        let out = m.forward(&z).unwrap();
        let d = out.sub(&z.narrow(1, 3, 1).unwrap()).unwrap().abs().unwrap();
        let d = d.flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn channel_count_checked() {
        let m = RefinerModel::build(&RefinerSpec::tiny(4), DType::F32, 0).unwrap();
        let z = Tensor::zeros((1, 10, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(m.forward(&z).is_err());
    }
}
