use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Floor applied to probabilities before the log in the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        for (name, w) in [("w1", w1), ("w2", w2), ("w3", w3)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(invalid(format!("loss weight {name} = {w} must be positive")));
            }
        }
        Ok(Self { w1, w2, w3 })
    }

    pub fn equal() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
        }
    }

    /// Height term only; the single-task baseline of the multi-task ablation.
    pub fn height_only() -> Self {
        Self {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
        }
    }

    pub fn scaled(self, alpha: f64) -> Self {
        Self {
            w1: self.w1 * alpha,
            w2: self.w2 * alpha,
            w3: self.w3 * alpha,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::equal()
    }
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn mse(pred: &Tensor, target: &Tensor, what: &str) -> Result<Tensor> {
    same_dims(pred, target, what)?;
    Ok(pred.sub(target)?.sqr()?.mean_all()?)
}

/// Mean squared height error over every pixel in the batch.
pub fn loss_height(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    mse(pred, target, "height loss")
}

/// Mean squared error over all normal components.
pub fn loss_normals(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    mse(pred, target, "normal loss")
}

/// Mean cross-entropy of `(B, C, H, W)` probabilities against `(B, H, W)` u32 labels.
pub fn loss_semantic(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = probs.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(shape(format!(
            "semantic loss: probabilities {:?} vs labels {:?}",
            probs.dims(),
            labels.dims()
        )));
    }
    let labels = labels.to_dtype(DType::U32)?;
    let max = labels.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
    if max >= c {
        return Err(invalid(format!("label {max} out of range for {c} classes")));
    }
    let picked = probs.gather(&labels.unsqueeze(1)?.contiguous()?, 1)?;
    Ok(picked.clamp(LOG_CLAMP, 1.0)?.log()?.mean_all()?.neg()?)
}

/// Unweighted loss terms of one forward pass, as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub height: Tensor,
    pub semantic: Tensor,
    pub normals: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<[f64; 3]> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([f(&self.height)?, f(&self.semantic)?, f(&self.normals)?])
    }
}

/// `w1·L_h + w2·L_s + w3·L_n` as a differentiable scalar.
pub fn composite_loss(terms: &LossTerms, w: LossWeights) -> Result<Tensor> {
    Ok(terms
        .height
        .affine(w.w1, 0.0)?
        .add(&terms.semantic.affine(w.w2, 0.0)?)?
        .add(&terms.normals.affine(w.w3, 0.0)?)?)
}

/// Scalar form of [`composite_loss`].
pub fn composite_value(terms: [f64; 3], w: LossWeights) -> f64 {
    w.w1 * terms[0] + w.w2 * terms[1] + w.w3 * terms[2]
}

/// Weights that put the three mean terms on the height term's scale.
pub fn balance_from_means(means: [f64; 3]) -> LossWeights {
    let ratio = |m: f64, name: &str| {
        if m > 0.0 && m.is_finite() && means[0] > 0.0 {
            means[0] / m
        } else {
            log::warn!("mean {name} loss is {m}; using weight 1");
            1.0
        }
    };
    LossWeights {
        w1: 1.0,
        w2: ratio(means[1], "semantic"),
        w3: ratio(means[2], "normal"),
    }
}

pub(crate) fn check_finite(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss: value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn height_examples() {
        let p = t(&[1.0, 2.0, 3.0], &[1, 1, 1, 3]);
        let g = t(&[1.0, 2.0, 5.0], &[1, 1, 1, 3]);
        assert!((scalar(&loss_height(&p, &g).unwrap()) - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(scalar(&loss_height(&p, &p).unwrap()), 0.0);
        let off = p.affine(1.0, 0.25).unwrap();
        assert!((scalar(&loss_height(&off, &p).unwrap()) - 0.0625).abs() < 1e-12);
        assert!(loss_height(&p, &t(&[1.0, 2.0], &[1, 1, 1, 2])).is_err());
    }

    #[test]
    fn normal_offset_on_one_channel() {
        let g = t(&[0.5; 12], &[1, 3, 2, 2]);
        let mut v = vec![0.5; 12];
        for x in v.iter_mut().take(4) {
            *x += 0.1;
        }
        let p = t(&v, &[1, 3, 2, 2]);
        assert!((scalar(&loss_normals(&p, &g).unwrap()) - 0.01 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_closed_forms() {
        let labels = Tensor::from_vec(vec![0u32, 1, 2, 5], (1, 2, 2), &Device::Cpu).unwrap();
        let uniform = t(&[1.0 / 6.0; 24], &[1, 6, 2, 2]);
        let l = scalar(&loss_semantic(&uniform, &labels).unwrap());
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!((l - 1.7918).abs() < 1e-4);

        let mut onehot = vec![0.0; 24];
        for (i, &c) in [0usize, 1, 2, 5].iter().enumerate() {
            onehot[c * 4 + i] = 1.0;
        }
        let l = scalar(&loss_semantic(&t(&onehot, &[1, 6, 2, 2]), &labels).unwrap());
        assert_eq!(l, 0.0);

        // zero probability on the true class is clamped, not infinite
        let wrong = t(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], &[1, 2, 2, 2]);
        let zeros = Tensor::zeros((1, 2, 2), DType::U32, &Device::Cpu).unwrap();
        let l = scalar(&loss_semantic(&wrong, &zeros).unwrap());
        assert!((l + LOG_CLAMP.ln()).abs() < 1e-9);

        let bad = Tensor::from_vec(vec![6u32, 0, 0, 0], (1, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(loss_semantic(&uniform, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn composite_examples() {
        let terms = LossTerms {
            height: t(&[2.0], &[]),
            semantic: t(&[3.0], &[]),
            normals: t(&[5.0], &[]),
        };
        assert_eq!(scalar(&composite_loss(&terms, LossWeights::equal()).unwrap()), 10.0);
        assert_eq!(composite_value([0.0; 3], LossWeights::new(2.0, 3.0, 4.0).unwrap()), 0.0);
        let w = LossWeights::new(1.0, 2.0, 0.5).unwrap();
        let a = scalar(&composite_loss(&terms, w).unwrap());
        let b = scalar(&composite_loss(&terms, w.scaled(3.0)).unwrap());
        assert!((b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(1.0, 0.0, 1.0).is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn balance_examples() {
        let w = balance_from_means([10.0, 1.0, 0.1]);
        assert_eq!((w.w1, w.w2), (1.0, 10.0));
        assert!((w.w3 - 100.0).abs() < 1e-9);
        assert_eq!(balance_from_means([2.0, 2.0, 2.0]), LossWeights::equal());
        assert_eq!(balance_from_means([2.0, 0.0, 2.0]).w2, 1.0);
    }

    proptest! {
        #[test]
        fn normals_loss_matches_scalar_loop(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 2 * 3 * 4 * 5;
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
            let mut sum = 0.0;
            for i in 0..n {
                sum += (a[i] - b[i]) * (a[i] - b[i]);
            }
            let oracle = sum / n as f64;
            let got = scalar(&loss_normals(&t(&a, &[2, 3, 4, 5]), &t(&b, &[2, 3, 4, 5])).unwrap());
            prop_assert!((got - oracle).abs() < 1e-7);
        }

        #[test]
        fn balanced_terms_are_equal(m in prop::array::uniform3(1e-3f64..1e3)) {
            let w = balance_from_means(m);
            let weighted = [w.w1 * m[0], w.w2 * m[1], w.w3 * m[2]];
            prop_assert!((weighted[0] - weighted[1]).abs() <= 1e-6 * weighted[0]);
            prop_assert!((weighted[0] - weighted[2]).abs() <= 1e-6 * weighted[0]);
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let probs = crate::nn::channel_softmax(&t(&logits, &[1, 3, 2, 2])).unwrap();
            let labels: Vec<u32> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let labels = Tensor::from_vec(labels, (1, 2, 2), &Device::Cpu).unwrap();
            let l = scalar(&loss_semantic(&probs, &labels).unwrap());
            prop_assert!(l >= 0.0 && l <= -LOG_CLAMP.ln());
        }
    }
}
