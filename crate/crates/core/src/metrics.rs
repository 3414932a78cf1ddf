//! Threshold sweep, precision/recall curves, F-measure and MAE.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLDS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PRPoint {
    pub threshold: u8,
    pub precision: f64,
    pub recall: f64,
}

impl PRPoint {
    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision, self.recall, BETA_SQ)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub max_f: f64,
    pub mae: f64,
    pub curve: Vec<PRPoint>,
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {} and ground truth {} differ", pred.shape(), gt.shape()),
        ));
    }
    Ok(())
}

/// Precision and recall of `pred · 255 ≥ t` against `gt ≥ 0.5` for every
/// integer `t` in `0..=255`.
///
/// Counting goes through a histogram of `floor(255·p)`: for integer `t`,
/// `255·p ≥ t` holds exactly when the floor does.
pub fn threshold_sweep(pred: &Tensor, gt: &Tensor) -> Result<Vec<PRPoint>> {
    check_pair("threshold_sweep", pred, gt)?;
    let mut pos = [0u64; THRESHOLDS];
    let mut neg = [0u64; THRESHOLDS];
    let mut gt_total = 0u64;
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        let scaled = p * 255.0;
        // negative values fall below every threshold
        let bin = if scaled >= 255.0 {
            255
        } else if scaled >= 0.0 {
            scaled.floor() as usize
        } else {
            continue;
        };
        if y >= 0.5 {
            pos[bin] += 1;
        } else {
            neg[bin] += 1;
        }
    }
    for &y in gt.data() {
        if y >= 0.5 {
            gt_total += 1;
        }
    }
    let mut curve = vec![
        PRPoint {
            threshold: 0,
            precision: 0.0,
            recall: 0.0
        };
        THRESHOLDS
    ];
    let (mut tp, mut fp) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        tp += pos[t];
        fp += neg[t];
        curve[t] = PRPoint {
            threshold: t as u8,
            precision: if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            },
            recall: if gt_total == 0 {
                1.0
            } else {
                tp as f64 / gt_total as f64
            },
        };
    }
    Ok(curve)
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let n = pred.shape().numel();
    if n == 0 {
        return Err(Error::shape("mae", "empty map".to_string()));
    }
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(p, y)| (p - y).abs()).sum();
    Ok(sum / n as f64)
}

/// Metrics of a single prediction.
pub fn evaluate_pair(pred: &Tensor, gt: &Tensor) -> Result<MetricsRecord> {
    aggregate([(pred, gt)])
}

/// Averages precision and recall per threshold over all pairs, then takes
/// the best F over the averaged curve. MAE is the mean per-image MAE.
pub fn aggregate<'a, I>(pairs: I) -> Result<MetricsRecord>
where
    I: IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
{
    let mut p_sum = [0.0f64; THRESHOLDS];
    let mut r_sum = [0.0f64; THRESHOLDS];
    let mut mae_sum = 0.0;
    let mut count = 0usize;
    for (pred, gt) in pairs {
        let curve = threshold_sweep(pred, gt)?;
        for (t, pt) in curve.iter().enumerate() {
            p_sum[t] += pt.precision;
            r_sum[t] += pt.recall;
        }
        mae_sum += mae(pred, gt)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Dataset(
            "cannot aggregate metrics over an empty dataset".to_string(),
        ));
    }
    let n = count as f64;
    let curve: Vec<PRPoint> = (0..THRESHOLDS)
        .map(|t| PRPoint {
            threshold: t as u8,
            precision: p_sum[t] / n,
            recall: r_sum[t] / n,
        })
        .collect();
    let max_f = curve.iter().map(PRPoint::f_measure).fold(0.0, f64::max);
    Ok(MetricsRecord {
        max_f,
        mae: mae_sum / n,
        curve,
    })
}

impl MetricsRecord {
    /// Header, one row per threshold, then `summary,<max_f>,<mae>,`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f_measure\n");
        for pt in &self.curve {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                pt.threshold,
                pt.precision,
                pt.recall,
                pt.f_measure()
            );
        }
        let _ = writeln!(out, "summary,{},{},", self.max_f, self.mae);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_binary_prediction() {
        let gt = map(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let curve = threshold_sweep(&gt, &gt).unwrap();
        for pt in &curve[1..] {
            assert_eq!((pt.precision, pt.recall), (1.0, 1.0));
        }
        // at t = 0 everything is predicted positive
        assert_eq!(curve[0].precision, 0.5);
        let rec = evaluate_pair(&gt, &gt).unwrap();
        assert_eq!((rec.max_f, rec.mae), (1.0, 0.0));
    }

    #[test]
    fn all_ones_against_half_foreground() {
        let gt = map(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let pred = Tensor::ones(gt.shape());
        for pt in threshold_sweep(&pred, &gt).unwrap() {
            assert_eq!((pt.precision, pt.recall), (0.5, 1.0));
        }
    }

    #[test]
    fn degenerate_conventions() {
        let gt = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let pred = Tensor::zeros(gt.shape());
        let curve = threshold_sweep(&pred, &gt).unwrap();
        assert_eq!(curve[0].precision, 0.0);
        assert!(curve.iter().all(|pt| pt.recall == 1.0));
        assert!(curve[1..].iter().all(|pt| pt.precision == 1.0));
    }

    #[test]
    fn recall_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Tensor::uniform(Shape::new(1, 1, 9, 9), 0.0, 1.0, &mut rng);
        let gt = pred.map(|v| if v > 0.4 { 1.0 } else { 0.0 });
        let curve = threshold_sweep(&pred, &gt).unwrap();
        assert!(curve.windows(2).all(|w| w[1].recall <= w[0].recall));
    }

    #[test]
    fn f_measure_values() {
        assert_eq!(f_measure(1.0, 1.0, BETA_SQ), 1.0);
        assert!((f_measure(0.8, 0.6, BETA_SQ) - 1.3 * 0.48 / 0.84).abs() < 1e-15);
        assert!((f_measure(0.8, 0.6, BETA_SQ) - 0.742857142857).abs() < 1e-11);
        assert_eq!(f_measure(0.0, 0.7, BETA_SQ), 0.0);
        assert_eq!(f_measure(0.7, 0.0, BETA_SQ), 0.0);
        assert_eq!(f_measure(0.0, 0.0, BETA_SQ), 0.0);
    }

    #[test]
    fn mae_values() {
        let gt = map(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&Tensor::ones(gt.shape()), &Tensor::zeros(gt.shape())).unwrap(), 1.0);
        assert_eq!(mae(&map(2, 2, &[0.5, 0.0, 1.0, 0.25]), &gt).unwrap(), 0.1875);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 2, 3));
        assert!(threshold_sweep(&a, &b).is_err());
        assert!(mae(&a, &b).is_err());
        assert!(aggregate(std::iter::empty()).is_err());
    }

    #[test]
    fn aggregate_is_idempotent_on_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred = Tensor::uniform(Shape::new(1, 1, 8, 8), 0.0, 1.0, &mut rng);
        let gt = Tensor::from_vec(pred.shape(), (0..64).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
        let one = evaluate_pair(&pred, &gt).unwrap();
        let two = aggregate([(&pred, &gt), (&pred, &gt)]).unwrap();
        assert_eq!(one, two);
        assert!((0.0..=1.0).contains(&one.max_f));
    }

    #[test]
    fn csv_layout() {
        let gt = map(1, 2, &[1.0, 0.0]);
        let csv = evaluate_pair(&gt, &gt).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 256 + 1);
        assert_eq!(lines[0], "threshold,precision,recall,f_measure");
        assert_eq!(lines[256], "255,1,1,1");
        assert_eq!(lines[257], "summary,1,0,");
    }
}
