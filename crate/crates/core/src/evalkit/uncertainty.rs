//! Monte Carlo dropout predictions and interval coverage.

use crate::error::{Error, Result};
use crate::model::{GraphMode, Network};
use crate::objective::sigmoid;
use crate::rng::{derive_seed, keys};
use crate::synthcohort::PatientRecord;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted values.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary of `T` sampled risks: mean, population std and 2.5/97.5
/// percentiles.
pub fn summarize_samples(samples: &[f64]) -> McPrediction {
    let t = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / t;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / t;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Identical samples can leave rounding residue in the variance.
    let std = if sorted.first() == sorted.last() { 0.0 } else { var.sqrt() };
    McPrediction { mean, std, lower: percentile_sorted(&sorted, 0.025), upper: percentile_sorted(&sorted, 0.975) }
}

/// `passes` stochastic forward passes of the prediction head with dropout
/// `rate`; fusion and graph attention run once, deterministically.
pub fn mc_dropout_predict(net: &Network, params: &[f64], records: &[PatientRecord], passes: usize, rate: f64, seed: u64) -> Result<Vec<McPrediction>> {
    if passes == 0 {
        return Err(Error::Config("MC dropout needs at least one pass".into()));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let head_in = net.head_inputs(params, records, GraphMode::Knn)?;
    let n = records.len();
    let mut samples = vec![Vec::with_capacity(passes); n];
    for t in 0..passes {
        let mask_seed = derive_seed(seed, &[keys::MC, t as u64]);
        let logits = net.head_logits(params, &head_in, Some((rate, mask_seed)))?;
        for (s, z) in samples.iter_mut().zip(logits) {
            s.push(sigmoid(z));
        }
    }
    Ok(samples.iter().map(|s| summarize_samples(s)).collect())
}

/// Fraction of patients whose true probability lies inside their interval.
pub fn coverage(intervals: &[(f64, f64)], truth: &[f64]) -> Result<f64> {
    if intervals.len() != truth.len() {
        return Err(Error::shape("coverage", format!("{} intervals", intervals.len()), format!("{} truths", truth.len())));
    }
    if intervals.is_empty() {
        return Err(Error::MetricUndefined("coverage of an empty set".into()));
    }
    let hit = intervals.iter().zip(truth).filter(|((lo, hi), t)| lo <= t && *t <= hi).count();
    Ok(hit as f64 / truth.len() as f64)
}

/// Coverage within each decile of predicted risk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileCoverage {
    pub decile: usize,
    pub count: usize,
    pub mean_predicted: f64,
    /// Mean true generative probability.
    pub mean_true: f64,
    /// Observed outcome frequency.
    pub outcome_rate: f64,
    pub coverage: f64,
}

pub fn coverage_by_decile(preds: &[McPrediction], truth: &[f64], outcomes: &[u8]) -> Result<Vec<DecileCoverage>> {
    if preds.len() != truth.len() || preds.len() != outcomes.len() {
        return Err(Error::shape("coverage_by_decile", format!("{} predictions", preds.len()), format!("{} truths", truth.len())));
    }
    let n = preds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| preds[a].mean.total_cmp(&preds[b].mean).then(a.cmp(&b)));
    let mut out = Vec::new();
    for d in 0..10 {
        let rows: Vec<usize> = idx.iter().enumerate().filter(|(rank, _)| rank * 10 / n.max(1) == d).map(|(_, &i)| i).collect();
        if rows.is_empty() {
            continue;
        }
        let c = rows.len() as f64;
        let iv: Vec<(f64, f64)> = rows.iter().map(|&i| (preds[i].lower, preds[i].upper)).collect();
        let tr: Vec<f64> = rows.iter().map(|&i| truth[i]).collect();
        out.push(DecileCoverage {
            decile: d,
            count: rows.len(),
            mean_predicted: rows.iter().map(|&i| preds[i].mean).sum::<f64>() / c,
            mean_true: tr.iter().sum::<f64>() / c,
            outcome_rate: rows.iter().map(|&i| f64::from(outcomes[i])).sum::<f64>() / c,
            coverage: coverage(&iv, &tr)?,
        });
    }
    Ok(out)
}

/// Dropout rate whose 95% intervals reach `target` coverage of the true
/// probabilities on a calibration set, by bisection on `[0, max_rate]`.
/// Coverage grows with the rate, so the smallest adequate rate is returned.
pub fn calibrate_dropout_rate(net: &Network, params: &[f64], calib: &[PatientRecord], passes: usize, target: f64, max_rate: f64, iters: usize, seed: u64) -> Result<f64> {
    let truth: Vec<f64> = calib.iter().map(|r| r.true_risk).collect();
    let cov = |rate: f64| -> Result<f64> {
        let p = mc_dropout_predict(net, params, calib, passes, rate, seed)?;
        coverage(&p.iter().map(|m| (m.lower, m.upper)).collect::<Vec<_>>(), &truth)
    };
    let (mut lo, mut hi) = (0.0, max_rate);
    if cov(hi)? < target {
        return Ok(hi);
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if cov(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&s, 0.5), 3.0);
        assert_eq!(percentile_sorted(&s, 0.0), 1.0);
        assert_eq!(percentile_sorted(&s, 1.0), 5.0);
        assert!((percentile_sorted(&s, 0.025) - 1.1).abs() < 1e-12);
        let one = summarize_samples(&[0.3]);
        assert_eq!((one.mean, one.std, one.lower, one.upper), (0.3, 0.0, 0.3, 0.3));
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&[(0.0, 1.0); 3], &[0.1, 0.5, 0.99]).unwrap(), 1.0);
        assert_eq!(coverage(&[(0.2, 0.2); 3], &[0.1, 0.5, 0.99]).unwrap(), 0.0);
    }
}
