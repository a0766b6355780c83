//! Point-forecast error metrics.
//!
//! MSE and MAE are means over points. SMAPE is
//! `200/T · Σ |X − X̂| / (|X| + |X̂|)`; a point where both values are zero
//! contributes zero. Multivariate results average the per-variable values.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::pairwise_sum;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
}

/// Metrics of one aligned pair of value sequences.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::dim("metrics", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::data("metrics of an empty sequence"));
    }
    let n = pred.len() as f64;
    let sq: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).collect();
    let abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let sym: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let denom = p.abs() + t.abs();
            if denom == 0.0 {
                0.0
            } else {
                (p - t).abs() / denom
            }
        })
        .collect();
    Ok(Metrics {
        mse: pairwise_sum(&sq) / n,
        mae: pairwise_sum(&abs) / n,
        smape: 200.0 * pairwise_sum(&sym) / n,
    })
}

/// Per-variable metrics and their mean over variables.
pub fn metrics_by_variable(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(Metrics, Vec<Metrics>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("metrics_by_variable", &[pred.len()], &[truth.len()]));
    }
    let per: Vec<Metrics> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| metrics(p, t))
        .collect::<Result<_>>()?;
    Ok((mean_metrics(&per), per))
}

/// Componentwise mean with pairwise summation.
pub fn mean_metrics(items: &[Metrics]) -> Metrics {
    let n = items.len() as f64;
    let col = |f: fn(&Metrics) -> f64| pairwise_sum(&items.iter().map(f).collect::<Vec<_>>()) / n;
    Metrics {
        mse: col(|m| m.mse),
        mae: col(|m| m.mae),
        smape: col(|m| m.smape),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_inputs_are_zero() {
        let x = [1.0, -2.0, 0.0, 3.5];
        assert_eq!(metrics(&x, &x).unwrap(), Metrics::default());
    }

    #[test]
    fn unit_offset() {
        let truth = [0.5, -1.0, 2.0];
        let pred: Vec<f64> = truth.iter().map(|x| x + 1.0).collect();
        let m = metrics(&pred, &truth).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
    }

    #[test]
    fn smape_single_point() {
        assert_eq!(metrics(&[3.0], &[1.0]).unwrap().smape, 100.0);
    }

    #[test]
    fn zero_denominator_contributes_zero() {
        assert_eq!(metrics(&[0.0, 1.0], &[0.0, 1.0]).unwrap().smape, 0.0);
        assert_eq!(metrics(&[0.0, 0.0], &[0.0, 2.0]).unwrap().smape, 100.0);
    }

    #[test]
    fn errors() {
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn by_variable_averages() {
        let (avg, per) = metrics_by_variable(&[vec![1.0], vec![3.0]], &[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(per[1].mse, 4.0);
        assert_eq!(avg.mse, 2.0);
        assert_eq!(avg.mae, 1.0);
    }

    proptest! {
        #[test]
        fn smape_is_bounded_and_mse_dominates_mae_squared(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = metrics(&p, &t).unwrap();
            prop_assert!((0.0..=200.0).contains(&m.smape));
            prop_assert!(m.mse >= m.mae * m.mae * (1.0 - 1e-12));
        }
    }
}
