//! Discrimination and calibration metrics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check(risk: &[f64], labels: &[u8]) -> Result<()> {
    if risk.len() != labels.len() {
        return Err(Error::shape("metric", format!("{} risks", risk.len()), format!("{} labels", labels.len())));
    }
    if risk.is_empty() {
        return Err(Error::MetricUndefined("no predictions".into()));
    }
    if let Some(r) = risk.iter().find(|r| !r.is_finite()) {
        return Err(Error::Input(format!("non-finite score {r}")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, kept integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let p = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += p * twice_mid;
        i = j + 1;
    }
    let u2 = rank_sum2 - (pos * (pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Area under the interpolated precision-recall envelope.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, _) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
        i = j;
    }
    // Envelope: best precision at this recall or beyond.
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(area)
}

/// Confusion counts `(tp, fp, tn, fn)` at `risk >= threshold`.
pub fn confusion(risk: &[f64], labels: &[u8], threshold: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&r, &y) in risk.iter().zip(labels) {
        match (r >= threshold, y == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean of the per-class F1 scores at `threshold`.
pub fn f1_macro(risk: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(risk, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (tp, fp, tn, fneg) = confusion(risk, labels, threshold);
    Ok((f1(tp, fp, fneg) + f1(tn, fneg, fp)) / 2.0)
}

/// Threshold maximising macro F1 over the distinct risk values.
pub fn best_f1_threshold(risk: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check(risk, labels)?;
    let mut cands: Vec<f64> = risk.iter().copied().filter(|&r| r > 0.0 && r < 1.0).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (0.5, f1_macro(risk, labels, 0.5)?);
    for t in cands {
        let f = f1_macro(risk, labels, t)?;
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

pub fn brier(risk: &[f64], labels: &[u8]) -> Result<f64> {
    check(risk, labels)?;
    Ok(risk.iter().zip(labels).map(|(&r, &y)| (r - f64::from(y)).powi(2)).sum::<f64>() / risk.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    EqualWidth,
    EqualMass,
}

/// One reliability-diagram bin. Empty bins carry no confidence or accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_center: f64,
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Reliability bins; equal-width bins partition `[0, 1]`, equal-mass bins
/// split the risk-sorted patients into near-equal counts.
pub fn reliability_bins(risk: &[f64], labels: &[u8], bins: usize, binning: Binning) -> Result<Vec<ReliabilityBin>> {
    check(risk, labels)?;
    if bins == 0 {
        return Err(Error::Config("bins must be >= 1".into()));
    }
    if let Some(r) = risk.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Input(format!("risk {r} outside [0, 1]")));
    }
    let n = risk.len();
    let assign: Vec<usize> = match binning {
        Binning::EqualWidth => risk.iter().map(|&r| ((r * bins as f64) as usize).min(bins - 1)).collect(),
        Binning::EqualMass => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| risk[a].total_cmp(&risk[b]).then(a.cmp(&b)));
            let mut out = vec![0; n];
            for (rank, &i) in idx.iter().enumerate() {
                out[i] = rank * bins / n;
            }
            out
        }
    };
    let mut sum_r = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for ((&b, &r), &y) in assign.iter().zip(risk).zip(labels) {
        sum_r[b] += r;
        sum_y[b] += f64::from(y);
        count[b] += 1;
    }
    Ok((0..bins)
        .map(|b| {
            let c = count[b];
            let conf = (c > 0).then(|| sum_r[b] / c as f64);
            let center = match binning {
                Binning::EqualWidth => (b as f64 + 0.5) / bins as f64,
                Binning::EqualMass => conf.unwrap_or((b as f64 + 0.5) / bins as f64),
            };
            ReliabilityBin { bin_center: center, confidence: conf, accuracy: (c > 0).then(|| sum_y[b] / c as f64), count: c }
        })
        .collect())
}

/// `Σ_b (n_b / n) |accuracy_b − confidence_b|`.
pub fn ece(risk: &[f64], labels: &[u8], bins: usize, binning: Binning) -> Result<f64> {
    let n = risk.len() as f64;
    Ok(reliability_bins(risk, labels, bins, binning)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy.unwrap() - b.confidence.unwrap()).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn pr_and_f1_examples() {
        assert_eq!(pr_auc(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(f1_macro(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1], 0.5).unwrap(), 1.0);
        let f = f1_macro(&[0.9; 4], &[0, 1, 0, 1], 0.5).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert!(f1_macro(&[0.9; 4], &[0, 1, 0, 1], 1.0).is_err());
    }

    #[test]
    fn calibration_examples() {
        let y = [0u8, 1, 1, 0];
        let r: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(brier(&r, &y).unwrap(), 0.0);
        assert_eq!(ece(&r, &y, 10, Binning::EqualWidth).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 4], &y).unwrap(), 0.25);
        assert_eq!(ece(&[0.5; 4], &y, 10, Binning::EqualWidth).unwrap(), 0.0);
        assert!((ece(&[0.8; 10], &[1; 10], 1, Binning::EqualWidth).unwrap() - 0.2).abs() < 1e-12);
        assert!((brier(&[0.8; 10], &[1; 10]).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn reliability_has_exactly_bins_rows() {
        let bins = reliability_bins(&[0.05, 0.95, 0.97], &[0, 1, 1], 10, Binning::EqualWidth).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[9].count, 2);
        assert_eq!(bins[4].confidence, None);
        let mass = reliability_bins(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1], 2, Binning::EqualMass).unwrap();
        assert_eq!(mass.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2]);
    }
}
