//! Discrimination, calibration, fairness, uncertainty and attribution
//! metrics.
//!
//! Metric functions are pure over `(risk, label, group)` slices. Functions
//! needing both classes return [`Error::MetricUndefined`](crate::Error) when
//! one is missing.

mod explain;
mod fairness;
mod metrics;
mod report;
mod uncertainty;

pub use explain::{
    counterfactual_search, exact_shapley, feature_shapley, mean_abs_shapley, model_counterfactual, model_feature_blocks, shapley_from_values, CounterfactualConfig, CounterfactualResult, FeatureBlock,
    TargetSide, MAX_SHAPLEY_BLOCKS,
};
pub use fairness::{fairness_gaps, fairness_sensitivity_sweep, max_gap, reweight_group_prevalence, FairnessReport, GroupMetrics, SweepPoint};
pub use metrics::{best_f1_threshold, brier, confusion, ece, f1_macro, pr_auc, reliability_bins, roc_auc, Binning, ReliabilityBin};
pub use report::{MetricsReport, ShapleyEntry, SCHEMA_VERSION};
pub use uncertainty::{calibrate_dropout_rate, coverage, coverage_by_decile, mc_dropout_predict, percentile_sorted, summarize_samples, DecileCoverage, McPrediction};
