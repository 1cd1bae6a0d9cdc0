use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::raster::{LabelGrid, RasterGrid};

/// Height errors in meters (MSE in square meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Error sums that can be merged across tiles before taking means.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeightErrorSums {
    pub squared: f64,
    pub absolute: f64,
    pub count: u64,
}

impl HeightErrorSums {
    pub fn add(&mut self, pred: &RasterGrid, gt: &RasterGrid) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let d = p as f64 - g as f64;
            self.squared += d * d;
            self.absolute += d.abs();
        }
        self.count += pred.data().len() as u64;
        Ok(())
    }

    pub fn metrics(&self) -> Result<HeightMetrics> {
        if self.count == 0 {
            return Err(invalid("no pixels to evaluate"));
        }
        let n = self.count as f64;
        let mse = self.squared / n;
        Ok(HeightMetrics {
            mse,
            mae: self.absolute / n,
            rmse: mse.sqrt(),
        })
    }
}

pub fn height_metrics(pred: &RasterGrid, gt: &RasterGrid) -> Result<HeightMetrics> {
    let mut sums = HeightErrorSums::default();
    sums.add(pred, gt)?;
    sums.metrics()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    /// Pixel accuracy.
    pub oa: f64,
    /// Mean recall over the classes present in the ground truth.
    pub aa: f64,
    pub kappa: f64,
    /// `confusion[truth][predicted]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    /// Classes with no ground-truth pixels; left out of `aa`.
    pub absent_classes: Vec<usize>,
}

impl SemanticMetrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|row| row.len() != c) {
            return Err(invalid("confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(invalid("no pixels to evaluate"));
        }
        let n = total as f64;
        let diag: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let oa = diag as f64 / n;

        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..c).map(|k| confusion.iter().map(|r| r[k]).sum()).collect();
        let mut absent = Vec::new();
        let mut recall_sum = 0.0;
        for k in 0..c {
            if rows[k] == 0 {
                absent.push(k);
            } else {
                recall_sum += confusion[k][k] as f64 / rows[k] as f64;
            }
        }
        let aa = recall_sum / (c - absent.len()) as f64;

        let pe: f64 = (0..c).map(|k| rows[k] as f64 * cols[k] as f64).sum::<f64>() / (n * n);
        // all mass in one class on both sides: chance agreement is total
        let kappa = if (1.0 - pe).abs() < f64::EPSILON {
            if oa == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(Self {
            oa,
            aa,
            kappa,
            confusion,
            absent_classes: absent,
        })
    }
}

pub fn confusion_matrix(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(shape("prediction and ground-truth label grids differ in size"));
    }
    if pred.labels().is_empty() {
        return Err(invalid("no pixels to evaluate"));
    }
    let mut cm = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(invalid(format!("label {} out of range for {num_classes} classes", p.max(g))));
        }
        cm[g][p] += 1;
    }
    Ok(cm)
}

pub fn semantic_metrics(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<SemanticMetrics> {
    SemanticMetrics::from_confusion(confusion_matrix(pred, gt, num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f32]) -> RasterGrid {
        RasterGrid::new(1, v.len(), 1, 1.0, v.to_vec()).unwrap()
    }

    #[test]
    fn height_closed_forms() {
        let g = row(&[1.0, 2.0, 5.0]);
        let m = height_metrics(&row(&[1.0, 2.0, 3.0]), &g).unwrap();
        assert!((m.mse - 4.0 / 3.0).abs() < 1e-12);
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.rmse - 2.0 / 3f64.sqrt()).abs() < 1e-12);
        let m = height_metrics(&g.map(|v| v + 2.0).unwrap(), &g).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse), (4.0, 2.0, 2.0));
        let m = height_metrics(&g, &g).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse), (0.0, 0.0, 0.0));
        assert!(height_metrics(&g, &row(&[1.0])).is_err());
    }

    #[test]
    fn kappa_on_two_class_matrix() {
        let m = SemanticMetrics::from_confusion(vec![vec![2, 1], vec![1, 2]]).unwrap();
        assert!((m.oa - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.kappa - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let gt = LabelGrid::new(2, 3, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let m = semantic_metrics(&gt, &gt, 4).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        assert!(m.absent_classes.is_empty());
        let total: u64 = m.confusion.iter().flatten().sum();
        assert_eq!(total, 6);
    }

    #[test]
    fn absent_class_flagged_and_skipped() {
        let gt = LabelGrid::new(1, 4, 3, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelGrid::new(1, 4, 3, vec![0, 1, 1, 1]).unwrap();
        let m = semantic_metrics(&pred, &gt, 3).unwrap();
        assert_eq!(m.absent_classes, vec![2]);
        assert!((m.aa - 0.75).abs() < 1e-12);
        assert!((m.oa - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_predictor_has_no_agreement() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let gt: Vec<u16> = (0..n).map(|i| (i % 4) as u16).collect();
        let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let m = semantic_metrics(
            &LabelGrid::new(1, n, 4, pred).unwrap(),
            &LabelGrid::new(1, n, 4, gt).unwrap(),
            4,
        )
        .unwrap();
        assert!(m.kappa.abs() < 0.05, "kappa {}", m.kappa);
    }

    proptest! {
        #[test]
        fn rmse_is_sqrt_mse_and_bounds_mae(
            v in prop::collection::vec((-50f32..50.0, -50f32..50.0), 1..200)
        ) {
            let p: Vec<f32> = v.iter().map(|x| x.0).collect();
            let g: Vec<f32> = v.iter().map(|x| x.1).collect();
            let m = height_metrics(&row(&p), &row(&g)).unwrap();
            prop_assert!((m.rmse - m.mse.sqrt()).abs() <= 1e-9);
            prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12));
        }
    }
}
