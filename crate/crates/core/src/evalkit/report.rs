//! Metrics report and its JSON, key-value and CSV forms.

use super::fairness::{fairness_gaps, GroupMetrics};
use super::metrics::{brier, ece, f1_macro, pr_auc, reliability_bins, roc_auc, Binning, ReliabilityBin};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEntry {
    pub block: String,
    pub mean_abs: f64,
}

/// Every metric of one evaluation. Metrics that could not be computed are
/// `None` and serialize as explicit nulls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub n: usize,
    pub prevalence: f64,
    pub threshold: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub f1_macro: Option<f64>,
    pub brier: f64,
    pub ece: f64,
    pub ece_bins: usize,
    pub binning: Binning,
    pub reliability: Vec<ReliabilityBin>,
    pub groups: Vec<GroupMetrics>,
    pub delta_auc: Option<f64>,
    pub parity_gap: Option<f64>,
    pub equal_opportunity_gap: Option<f64>,
    pub coverage: Option<f64>,
    pub shapley: Option<Vec<ShapleyEntry>>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MetricUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricsReport {
    /// Discrimination, calibration and fairness metrics of predictions.
    pub fn compute(risk: &[f64], labels: &[u8], groups: &[usize], threshold: f64, bins: usize, binning: Binning) -> Result<Self> {
        let fair = match fairness_gaps(risk, labels, groups, threshold) {
            Ok(f) => Some(f),
            Err(Error::MetricUndefined(_)) => None,
            Err(e) => return Err(e),
        };
        let n = risk.len();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            n,
            prevalence: labels.iter().map(|&y| f64::from(y)).sum::<f64>() / n.max(1) as f64,
            threshold,
            roc_auc: optional(roc_auc(risk, labels))?,
            pr_auc: optional(pr_auc(risk, labels))?,
            f1_macro: optional(f1_macro(risk, labels, threshold))?,
            brier: brier(risk, labels)?,
            ece: ece(risk, labels, bins, binning)?,
            ece_bins: bins,
            binning,
            reliability: reliability_bins(risk, labels, bins, binning)?,
            groups: fair.as_ref().map(|f| f.groups.clone()).unwrap_or_default(),
            delta_auc: fair.as_ref().map(|f| f.delta_auc),
            parity_gap: fair.as_ref().map(|f| f.parity_gap),
            equal_opportunity_gap: fair.as_ref().map(|f| f.equal_opportunity_gap),
            coverage: None,
            shapley: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat `key = value` lines; absent metrics print as `null`.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| format!("{x}"));
        let mut lines = vec![
            format!("schema_version = {}", self.schema_version),
            format!("n = {}", self.n),
            format!("prevalence = {}", self.prevalence),
            format!("threshold = {}", self.threshold),
            format!("roc_auc = {}", opt(self.roc_auc)),
            format!("pr_auc = {}", opt(self.pr_auc)),
            format!("f1_macro = {}", opt(self.f1_macro)),
            format!("brier = {}", self.brier),
            format!("ece = {}", self.ece),
            format!("ece_bins = {}", self.ece_bins),
            format!("delta_auc = {}", opt(self.delta_auc)),
            format!("parity_gap = {}", opt(self.parity_gap)),
            format!("equal_opportunity_gap = {}", opt(self.equal_opportunity_gap)),
            format!("coverage = {}", opt(self.coverage)),
        ];
        for g in &self.groups {
            let k = g.group;
            lines.push(format!("group.{k}.n = {}", g.n));
            lines.push(format!("group.{k}.auc = {}", opt(g.auc)));
            lines.push(format!("group.{k}.f1_macro = {}", opt(g.f1_macro)));
            lines.push(format!("group.{k}.positive_rate = {}", g.positive_rate));
            lines.push(format!("group.{k}.tpr = {}", opt(g.tpr)));
            lines.push(format!("group.{k}.flagged = {}", g.flagged));
        }
        if let Some(sh) = &self.shapley {
            for e in sh {
                lines.push(format!("shapley.{} = {}", e.block, e.mean_abs));
            }
        }
        lines.join("\n") + "\n"
    }

    /// `bin_center,confidence,accuracy,count` with one row per bin; empty
    /// bins leave confidence and accuracy blank.
    pub fn write_reliability_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "bin_center,confidence,accuracy,count")?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for b in &self.reliability {
            writeln!(w, "{},{},{},{}", b.bin_center, opt(b.confidence), opt(b.accuracy), b.count)?;
        }
        Ok(())
    }
}
