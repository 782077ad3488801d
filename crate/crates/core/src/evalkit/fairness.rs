//! Group fairness gaps and the group-prevalence sensitivity sweep.

use super::metrics::{confusion, f1_macro, roc_auc};
use crate::error::{Error, Result};
use crate::rng::keyed;
use crate::rng::keys;
use crate::synthcohort::PatientRecord;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Metrics of one demographic group. Metrics needing both classes are
/// `None` for groups lacking one, and such groups are flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub n: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub f1_macro: Option<f64>,
    pub positive_rate: f64,
    pub tpr: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: Vec<GroupMetrics>,
    /// Largest pairwise AUC difference among valid groups.
    pub delta_auc: f64,
    /// Largest difference in positive-prediction rate among valid groups.
    pub parity_gap: f64,
    /// Largest difference in true-positive rate among valid groups.
    pub equal_opportunity_gap: f64,
}

/// Largest pairwise difference, `max − min`.
pub fn max_gap(values: &[f64]) -> f64 {
    spread(values.iter().copied())
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Per-group metrics and gaps at a decision threshold.
pub fn fairness_gaps(risk: &[f64], labels: &[u8], groups: &[usize], threshold: f64) -> Result<FairnessReport> {
    if risk.len() != labels.len() || risk.len() != groups.len() {
        return Err(Error::shape("fairness_gaps", format!("{} risks", risk.len()), format!("{} labels, {} groups", labels.len(), groups.len())));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut table = Vec::with_capacity(ids.len());
    for g in ids {
        let rows: Vec<usize> = (0..risk.len()).filter(|&i| groups[i] == g).collect();
        let r: Vec<f64> = rows.iter().map(|&i| risk[i]).collect();
        let y: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
        let positives = y.iter().filter(|&&v| v == 1).count();
        let valid = positives > 0 && positives < y.len();
        let (tp, fp, _, fneg) = confusion(&r, &y, threshold);
        table.push(GroupMetrics {
            group: g,
            n: rows.len(),
            positives,
            auc: if valid { Some(roc_auc(&r, &y)?) } else { None },
            f1_macro: if valid { Some(f1_macro(&r, &y, threshold)?) } else { None },
            positive_rate: (tp + fp) as f64 / rows.len() as f64,
            tpr: (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64),
            flagged: !valid,
        });
    }
    let valid: Vec<&GroupMetrics> = table.iter().filter(|g| !g.flagged).collect();
    if valid.len() < 2 {
        return Err(Error::MetricUndefined(format!("fairness gaps need 2 groups with both classes, got {}", valid.len())));
    }
    Ok(FairnessReport {
        delta_auc: spread(valid.iter().map(|g| g.auc.unwrap())),
        parity_gap: spread(valid.iter().map(|g| g.positive_rate)),
        equal_opportunity_gap: spread(valid.iter().map(|g| g.tpr.unwrap())),
        groups: table,
    })
}

/// Training subset for a prevalence multiplier `m`: every patient of the
/// reference group is kept, patients of other groups with probability `1/m`.
pub fn reweight_group_prevalence(records: &[PatientRecord], reference_group: usize, multiplier: f64, seed: u64) -> Result<Vec<PatientRecord>> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::Config(format!("prevalence multiplier must be positive, got {multiplier}")));
    }
    if multiplier <= 1.0 {
        // Multipliers below one shrink the reference group instead.
        let keep = multiplier;
        return Ok(records
            .iter()
            .filter(|r| r.group != reference_group || keep_draw(seed, r.id) < keep)
            .cloned()
            .collect());
    }
    let keep = 1.0 / multiplier;
    Ok(records
        .iter()
        .filter(|r| r.group == reference_group || keep_draw(seed, r.id) < keep)
        .cloned()
        .collect())
}

/// Per-patient uniform draw, so nested multipliers keep nested subsets.
fn keep_draw(seed: u64, id: u64) -> f64 {
    keyed(seed, &[keys::SWEEP, id]).random::<f64>()
}

/// One sweep point; `report` is `None` when a group was emptied or gaps were
/// undefined, with the reason in `flag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub multiplier: f64,
    pub train_size: usize,
    pub report: Option<FairnessReport>,
    pub flag: Option<String>,
}

/// For each multiplier, retrain on the reweighted training set through
/// `train_and_score` (which returns risks for `test`) and recompute gaps.
pub fn fairness_sensitivity_sweep<F>(train: &[PatientRecord], test: &[PatientRecord], multipliers: &[f64], reference_group: usize, threshold: f64, seed: u64, mut train_and_score: F) -> Result<Vec<SweepPoint>>
where
    F: FnMut(&[PatientRecord]) -> Result<Vec<f64>>,
{
    let mut groups: Vec<usize> = train.iter().map(|r| r.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let labels: Vec<u8> = test.iter().map(|r| r.outcome).collect();
    let test_groups: Vec<usize> = test.iter().map(|r| r.group).collect();
    let mut out = Vec::with_capacity(multipliers.len());
    for &m in multipliers {
        let subset = reweight_group_prevalence(train, reference_group, m, seed)?;
        let present = groups.iter().all(|g| subset.iter().any(|r| r.group == *g));
        if !present {
            out.push(SweepPoint { multiplier: m, train_size: subset.len(), report: None, flag: Some("a group was emptied by resampling".into()) });
            continue;
        }
        let risk = train_and_score(&subset)?;
        match fairness_gaps(&risk, &labels, &test_groups, threshold) {
            Ok(rep) => out.push(SweepPoint { multiplier: m, train_size: subset.len(), report: Some(rep), flag: None }),
            Err(Error::MetricUndefined(msg)) => out.push(SweepPoint { multiplier: m, train_size: subset.len(), report: None, flag: Some(msg) }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_groups_have_zero_gaps() {
        let r = [0.1, 0.6, 0.4, 0.9, 0.1, 0.6, 0.4, 0.9];
        let y = [0, 1, 0, 1, 0, 1, 0, 1];
        let g = [0, 0, 0, 0, 1, 1, 1, 1];
        let rep = fairness_gaps(&r, &y, &g, 0.5).unwrap();
        assert_eq!((rep.delta_auc, rep.parity_gap, rep.equal_opportunity_gap), (0.0, 0.0, 0.0));
    }

    #[test]
    fn parity_gap_example() {
        // Group 0: 6 of 10 predicted positive; group 1: 5 of 10.
        let mut r = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        for (grp, pos_pred) in [(0usize, 6), (1, 5)] {
            for i in 0..10 {
                r.push(if i < pos_pred { 0.9 } else { 0.1 });
                y.push(u8::from(i % 2 == 0));
                g.push(grp);
            }
        }
        let rep = fairness_gaps(&r, &y, &g, 0.5).unwrap();
        assert!((rep.parity_gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn delta_auc_is_max_minus_min() {
        assert!((max_gap(&[0.9, 0.85, 0.8]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_class_groups_are_flagged() {
        let r = [0.1, 0.9, 0.2, 0.8, 0.7];
        let y = [0, 1, 0, 1, 1];
        let g = [0, 0, 1, 1, 2];
        let rep = fairness_gaps(&r, &y, &g, 0.5).unwrap();
        assert!(rep.groups[2].flagged);
        assert_eq!(rep.groups[2].auc, None);
        assert!(matches!(fairness_gaps(&r[..2], &y[..2], &g[..2], 0.5), Err(Error::MetricUndefined(_))));
    }
}
