//! Task, cross-modal mutual-information, causal-alignment and L2 losses.
//!
//! The combined objective is
//! `total = task - mi_weight * sum_pairs MI + causal_weight * causal + l2_weight * |theta|^2`.
//! `mi_weight` is signed: positive values reward agreement between modality
//! latents, negative values penalise redundancy.

use crate::error::{Error, Result};
use crate::numerics::{cca, Tensor2};
use serde::{Deserialize, Serialize};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-example binary cross-entropy `softplus(z) - y z`.
pub fn bce_terms<'a>(logits: &'a [f64], targets: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    logits.iter().zip(targets).map(|(&z, &y)| softplus(z) - y * z)
}

/// Mean binary cross-entropy of logits against 0/1 labels.
pub fn task_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape("task_loss", format!("{} logits", logits.len()), format!("{} labels", labels.len())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("task_loss received a non-finite logit".into()));
    }
    Ok(bce_terms(logits, labels).sum::<f64>() / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalVariant {
    ProbDiff,
    Vcmi,
    CmiTarget,
}

impl CausalVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "prob_diff" => Ok(Self::ProbDiff),
            "vcmi" => Ok(Self::Vcmi),
            "cmi_target" => Ok(Self::CmiTarget),
            other => Err(Error::Config(format!("unknown causal variant '{other}' (expected prob_diff, vcmi or cmi_target)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ProbDiff => "prob_diff",
            Self::Vcmi => "vcmi",
            Self::CmiTarget => "cmi_target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Signed coefficient of the summed cross-modal MI (subtracted).
    pub mi_weight: f64,
    pub causal_weight: f64,
    pub l2_weight: f64,
    /// Target conditional MI for [`CausalVariant::CmiTarget`].
    pub kappa: f64,
    pub variant: CausalVariant,
    /// Risk bins for [`CausalVariant::ProbDiff`].
    pub prob_diff_bins: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mi_weight: -0.01,
            causal_weight: 0.0,
            l2_weight: 1e-4,
            kappa: 0.0,
            variant: CausalVariant::Vcmi,
            prob_diff_bins: 10,
        }
    }
}

impl LossWeights {
    pub fn task_only() -> Self {
        Self { mi_weight: 0.0, causal_weight: 0.0, l2_weight: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mi_weight", self.mi_weight), ("causal_weight", self.causal_weight), ("l2_weight", self.l2_weight), ("kappa", self.kappa)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.causal_weight < 0.0 || self.l2_weight < 0.0 || self.kappa < 0.0 {
            return Err(Error::Config("causal_weight, l2_weight and kappa must be >= 0".into()));
        }
        if self.prob_diff_bins == 0 {
            return Err(Error::Config("prob_diff_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-component loss values. Components not evaluated are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    /// Summed MI over modality pairs.
    pub mi: Option<f64>,
    pub causal: Option<f64>,
    /// `|theta|^2` over the regularised parameters.
    pub l2: f64,
    pub total: f64,
    /// Set when the causal estimate had no usable cells or strata.
    pub causal_degenerate: bool,
}

/// `task - mi_weight * mi + causal_weight * causal + l2_weight * l2`.
pub fn combine(task: f64, mi: Option<f64>, causal: Option<f64>, l2: f64, w: &LossWeights) -> f64 {
    task - w.mi_weight * mi.unwrap_or(0.0) + w.causal_weight * causal.unwrap_or(0.0) + w.l2_weight * l2
}

/// Smallest batch accepted by [`mi_gaussian`].
pub const MI_MIN_BATCH: usize = 4;

/// Gaussian mutual information `-1/2 sum ln(1 - rho_c^2)` between two
/// row-aligned latent batches.
pub fn mi_gaussian(zm: &Tensor2, zn: &Tensor2) -> Result<f64> {
    if zm.rows() != zn.rows() {
        return Err(Error::shape("mi_gaussian", zm.shape_str(), zn.shape_str()));
    }
    if zm.rows() < MI_MIN_BATCH {
        return Err(Error::Input(format!("mi_gaussian needs a batch of at least {MI_MIN_BATCH}, got {}", zm.rows())));
    }
    Ok(cca::forward(zm.data(), zn.data(), zm.rows(), zm.cols(), zn.cols()).0)
}

/// Minimum samples for a (bin, confounder) cell to contribute.
pub const PROB_DIFF_MIN_CELL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalEstimate {
    pub value: f64,
    /// No cell or stratum was large enough; `value` is 0.
    pub degenerate: bool,
}

/// Bin index per sample by rank of `risk` into `bins` equal-count bins.
pub fn rank_bins(risk: &[f64], bins: usize) -> Vec<usize> {
    let n = risk.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| risk[a].total_cmp(&risk[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n.max(1);
    }
    out
}

/// Cell-count-weighted mean of `(P(Y | bin, C) - P(Y | bin))^2` over
/// `(bin, C)` cells with at least [`PROB_DIFF_MIN_CELL`] samples.
pub fn causal_prob_diff_binned(bins: &[usize], confounder: &[usize], labels: &[f64]) -> Result<CausalEstimate> {
    let n = bins.len();
    if confounder.len() != n || labels.len() != n {
        return Err(Error::shape("causal_prob_diff", format!("{n} bins"), format!("{} confounders, {} labels", confounder.len(), labels.len())));
    }
    use std::collections::BTreeMap;
    let mut bin_stats: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut cell_stats: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for i in 0..n {
        let b = bin_stats.entry(bins[i]).or_default();
        b.0 += labels[i];
        b.1 += 1.0;
        let c = cell_stats.entry((bins[i], confounder[i])).or_default();
        c.0 += labels[i];
        c.1 += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&(b, _), &(pos, cnt)) in &cell_stats {
        if cnt < PROB_DIFF_MIN_CELL as f64 {
            continue;
        }
        let (bpos, bcnt) = bin_stats[&b];
        let diff = pos / cnt - bpos / bcnt;
        num += cnt * diff * diff;
        den += cnt;
    }
    if den == 0.0 {
        return Ok(CausalEstimate { value: 0.0, degenerate: true });
    }
    Ok(CausalEstimate { value: num / den, degenerate: false })
}

/// [`causal_prob_diff_binned`] with bins taken from `bins` risk quantiles.
pub fn causal_prob_diff(risk: &[f64], confounder: &[usize], labels: &[f64], bins: usize) -> Result<CausalEstimate> {
    if bins == 0 {
        return Err(Error::Config("prob_diff needs at least one bin".into()));
    }
    causal_prob_diff_binned(&rank_bins(risk, bins), confounder, labels)
}

/// Batch mean of `ln q(C | Z, Y) - ln q(C | Y)` given the probability each
/// head assigns to the observed confounder.
pub fn causal_vcmi(q_zy: &[f64], q_y: &[f64]) -> Result<f64> {
    if q_zy.len() != q_y.len() || q_zy.is_empty() {
        return Err(Error::shape("causal_vcmi", format!("{} probabilities", q_zy.len()), format!("{} probabilities", q_y.len())));
    }
    if q_zy.iter().chain(q_y).any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Input("head probabilities must lie in (0, 1]".into()));
    }
    Ok(q_zy.iter().zip(q_y).map(|(a, b)| a.ln() - b.ln()).sum::<f64>() / q_zy.len() as f64)
}

/// Row indices of each confounder stratum large enough for a conditional MI
/// estimate between latents of widths `p` and `q`.
pub fn cmi_strata(confounder: &[usize], p: usize, q: usize) -> Vec<Vec<usize>> {
    let levels = confounder.iter().copied().max().map_or(0, |m| m + 1);
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); levels];
    for (i, &c) in confounder.iter().enumerate() {
        strata[c].push(i);
    }
    let min = (p.max(q) + 2).max(MI_MIN_BATCH);
    strata.retain(|s| s.len() >= min);
    strata
}

/// Stratum-size-weighted conditional MI between two latent batches.
pub fn conditional_mi(zm: &Tensor2, zn: &Tensor2, confounder: &[usize]) -> Result<CausalEstimate> {
    if zm.rows() != zn.rows() || confounder.len() != zm.rows() {
        return Err(Error::shape("conditional_mi", zm.shape_str(), format!("{} / {} confounders", zn.shape_str(), confounder.len())));
    }
    let strata = cmi_strata(confounder, zm.cols(), zn.cols());
    if strata.is_empty() {
        return Ok(CausalEstimate { value: 0.0, degenerate: true });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for rows in &strata {
        let take = |z: &Tensor2| {
            let data: Vec<f64> = rows.iter().flat_map(|&i| z.row(i).to_vec()).collect();
            Tensor2::new(rows.len(), z.cols(), data)
        };
        let mi = mi_gaussian(&take(zm)?, &take(zn)?)?;
        num += rows.len() as f64 * mi;
        den += rows.len() as f64;
    }
    Ok(CausalEstimate { value: num / den, degenerate: false })
}

/// `(I(Z_m; Z_n | C) - kappa)^2` for one modality pair.
pub fn causal_cmi_target(zm: &Tensor2, zn: &Tensor2, confounder: &[usize], kappa: f64) -> Result<CausalEstimate> {
    let cmi = conditional_mi(zm, zn, confounder)?;
    if cmi.degenerate {
        return Ok(cmi);
    }
    Ok(CausalEstimate { value: (cmi.value - kappa).powi(2), degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_loss_examples() {
        assert!((task_loss(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((task_loss(&[0.0], &[0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(task_loss(&[20.0], &[1.0]).unwrap() < 1e-8);
        let expect = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((task_loss(&[0.0, 2.0], &[1.0, 0.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 1.4099).abs() < 2e-4);
        assert!(task_loss(&[800.0, -800.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn combine_reductions() {
        let w = LossWeights::task_only();
        assert_eq!(combine(0.7, Some(3.0), Some(2.0), 25.0, &w), 0.7);
        let w = LossWeights { l2_weight: 0.5, ..LossWeights::task_only() };
        assert_eq!(combine(0.7, None, None, 3.0f64.powi(2) + 4.0f64.powi(2), &w), 0.7 + 12.5);
        let w = LossWeights { mi_weight: 1.0, ..LossWeights::task_only() };
        assert!(combine(0.7, Some(2.0), None, 0.0, &w) < combine(0.7, Some(1.0), None, 0.0, &w));
    }

    #[test]
    fn mi_examples() {
        let a = Tensor2::col_vector(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        let e = [1.0, 1.0, -1.0, -1.0];
        let b: Vec<f64> = a.data().iter().zip(e).map(|(x, y)| 0.5 * x + 0.75f64.sqrt() * y).collect();
        let b = Tensor2::col_vector(&b).unwrap();
        assert!((mi_gaussian(&a, &b).unwrap() - 0.1438).abs() < 1e-4);
        assert!((mi_gaussian(&a, &b).unwrap() - mi_gaussian(&b, &a).unwrap()).abs() < 1e-12);
        let z = Tensor2::from_rows(&[[1.0, 0.3], [0.2, -1.0], [-0.7, 0.4], [0.1, 0.9], [0.5, -0.5], [-1.2, 0.1], [0.3, 0.6], [0.8, -0.2]]).unwrap();
        let ceiling = -0.5 * 2.0 * (2e-6f64 - 1e-12).ln();
        assert!((mi_gaussian(&z, &z).unwrap() - ceiling).abs() < 1e-9);
        let small = Tensor2::col_vector(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(mi_gaussian(&small, &small), Err(Error::Input(_))));
    }

    #[test]
    fn prob_diff_examples() {
        let bins = vec![0; 20];
        let conf: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let mut labels = vec![0.0; 20];
        for i in 0..8 {
            labels[i] = 1.0;
        }
        labels[10] = 1.0;
        labels[11] = 1.0;
        let est = causal_prob_diff_binned(&bins, &conf, &labels).unwrap();
        assert!((est.value - 0.09).abs() < 1e-15);
        let flat = causal_prob_diff_binned(&bins, &[0; 20], &labels).unwrap();
        assert_eq!(flat.value, 0.0);
        let tiny = causal_prob_diff_binned(&[0; 4], &[0, 1, 0, 1], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(tiny.degenerate);
    }

    #[test]
    fn vcmi_examples() {
        assert!((causal_vcmi(&[0.8, 0.5], &[0.4, 0.5]).unwrap() - 2f64.ln() / 2.0).abs() < 1e-15);
        assert_eq!(causal_vcmi(&[0.3, 0.9], &[0.3, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn cmi_target_reduces_to_squared_gap() {
        let rows: Vec<[f64; 1]> = (0..12).map(|i| [((i * 7) % 5) as f64]).collect();
        let other: Vec<[f64; 1]> = (0..12).map(|i| [((i * 3) % 4) as f64]).collect();
        let zm = Tensor2::from_rows(&rows).unwrap();
        let zn = Tensor2::from_rows(&other).unwrap();
        let conf: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let cmi = conditional_mi(&zm, &zn, &conf).unwrap().value;
        assert_eq!(causal_cmi_target(&zm, &zn, &conf, cmi).unwrap().value, 0.0);
        let k = cmi - 0.2;
        assert!((causal_cmi_target(&zm, &zn, &conf, k).unwrap().value - 0.04).abs() < 1e-12);
        assert!(causal_cmi_target(&zm, &zn, &[0usize; 12], 0.0).is_ok());
    }
}
