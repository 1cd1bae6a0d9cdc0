//! Parameter store and the handful of layers the two networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named, trainable tensors with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// He-normal weights with the given fan-in.
    pub fn he_normal(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt() as f32;
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter with zeros.
    pub fn zero_all(&self) -> Result<()> {
        for v in self.vars.values() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            match self.dtype {
                DType::F64 => {
                    for v in var.flatten_all()?.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Flat f32 copies of all parameters, in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let data = v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((n.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Replaces parameter values; every stored parameter must be provided with its exact shape.
    pub fn import(&self, blobs: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let provided: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = blobs
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        if provided.len() != self.vars.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                provided.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = provided.get(name.as_str()).ok_or_else(|| {
                Error::CheckpointMismatch(format!("parameter {name} missing from checkpoint"))
            })?;
            if shape.as_slice() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec((*data).clone(), shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// 2-D convolution with bias, NCHW.
#[derive(Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = ps.he_normal(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
        )?;
        let bias = ps.zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// 2x2 transposed convolution with stride 2: doubles the spatial size.
#[derive(Clone)]
pub struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = ps.he_normal(format!("{name}.weight"), &[c_in, c_out, 2, 2], c_in)?;
        let bias = ps.zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self { weight, bias })
    }

    /// The 2x2 windows at stride 2 never overlap, so each input pixel maps to
    /// its own output block: one matmul followed by a pixel shuffle. Candle's
    /// CPU transposed convolution is a direct loop and several times slower.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c_in, h, w) = x.dims4()?;
        let c_out = self.weight.dim(1)?;
        let cols = x.reshape((n, c_in, h * w))?.transpose(1, 2)?;
        let y = cols.broadcast_matmul(&self.weight.reshape((c_in, c_out * 4))?)?;
        let y = y
            .reshape((n, h, w, c_out, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((n, c_out, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Source of dropout randomness for one forward pass.
pub enum Dropout<'a> {
    Off,
    On(&'a mut ChaCha8Rng),
}

impl Dropout<'_> {
    pub fn is_on(&self) -> bool {
        matches!(self, Dropout::On(_))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by `1 / (1 - rate)`.
    pub fn apply(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Dropout::Off => Ok(x.clone()),
            Dropout::On(_) if rate <= 0.0 => Ok(x.clone()),
            Dropout::On(rng) => {
                let keep = 1.0 - rate;
                let scale = (1.0 / keep) as f32;
                let mask: Vec<f32> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
                Ok(x.mul(&mask)?)
            }
        }
    }
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Concatenation along channels.
pub fn cat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(xs, 1)?)
}

/// `(h, w, c)` of an NCHW tensor.
pub fn hwc(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = x.dims4()?;
    Ok((h, w, c))
}
