//! Counting error metrics and batched inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{CrowdCounter, LabelStats};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Number of images.
    pub m: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mean_count: f64,
}

/// MAE and RMSE with predictions clamped at zero.
pub fn compute_metrics(preds: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if preds.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            truth.len()
        )));
    }
    let m = preds.len() as f64;
    let (mut abs, mut sq, mut total) = (0.0, 0.0, 0.0);
    for (&p, &t) in preds.iter().zip(truth) {
        let r = p.max(0.0) - t;
        abs += r.abs();
        sq += r * r;
        total += t;
    }
    Ok(MetricsReport {
        m: preds.len(),
        mae: abs / m,
        rmse: (sq / m).sqrt(),
        mean_count: total / m,
    })
}

/// Averages of per-dataset `MAE_i / mean_i` and `RMSE_i / mean_i`.
pub fn normalized_metrics(entries: &[(f64, f64, f64)]) -> Result<(f64, f64)> {
    if entries.is_empty() {
        return Err(Error::invalid("normalized_metrics", "no datasets"));
    }
    let (mut nmae, mut nrmse) = (0.0, 0.0);
    for &(mae, rmse, mean) in entries {
        if !(mean > 0.0) {
            return Err(Error::invalid(
                "normalized_metrics",
                format!("mean count {mean} must be positive"),
            ));
        }
        nmae += mae / mean;
        nrmse += rmse / mean;
    }
    let n = entries.len() as f64;
    Ok((nmae / n, nrmse / n))
}

/// Unclamped count predictions for every sample, in dataset order.
pub fn predict<T: Real>(
    model: &CrowdCounter,
    params: &ParamStore<T>,
    stats: &LabelStats,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T>(chunk, None)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(x);
        let fwd = model.forward(&mut g, &p, x)?;
        out.extend(model.counts(&g, &fwd, stats));
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    model: &CrowdCounter,
    params: &ParamStore<T>,
    stats: &LabelStats,
    data: &Dataset,
    batch_size: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let preds = predict(model, params, stats, data, batch_size)?;
    compute_metrics(&preds, &data.counts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_cases() {
        let r = compute_metrics(&[10.0, 20.0], &[12.0, 18.0]).unwrap();
        assert_eq!((r.mae, r.rmse), (2.0, 2.0));
        let r = compute_metrics(&[10.0, 22.0], &[12.0, 18.0]).unwrap();
        assert_abs_diff_eq!(r.mae, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rmse, 10f64.sqrt(), epsilon = 1e-12);
        let r = compute_metrics(&[5.0, 7.0], &[5.0, 7.0]).unwrap();
        assert_eq!((r.mae, r.rmse), (0.0, 0.0));
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn negative_predictions_are_clamped() {
        let r = compute_metrics(&[-4.0], &[1.0]).unwrap();
        assert_eq!(r.mae, 1.0);
    }

    #[test]
    fn normalized_cases() {
        assert_eq!(normalized_metrics(&[(501.0, 600.0, 501.0)]).unwrap().0, 1.0);
        let (n, _) = normalized_metrics(&[(64.541, 0.0, 501.0)]).unwrap();
        assert_abs_diff_eq!(n, 0.1288, epsilon = 1e-4);
        let (n, _) = normalized_metrics(&[(1.0, 1.0, 10.0), (3.0, 3.0, 10.0)]).unwrap();
        assert_abs_diff_eq!(n, 0.2, epsilon = 1e-12);
        assert!(normalized_metrics(&[(1.0, 1.0, 0.0)]).is_err());
    }
}
