//! Experiment runner: cohort generation, site partitioning, federated
//! training, validation protocols, ablations, fairness sweeps and artifact
//! export.
//!
//! Every random stream derives from the config's master seed through a named
//! subkey, and artifacts land in a directory named by the config hash.

mod config;

pub use config::{hex_digest, parse_modalities, EvalConfig, ExperimentConfig, Protocol, SECTIONS};

use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsReport, ShapleyEntry, SweepPoint};
use crate::fedsim::{self, ClientState, ServerState};
use crate::model::{write_checkpoint, ModelObjective, Network};
use crate::rng::{derive_seed, keyed, keys};
use crate::synthcohort::{assign_sites, drop_one, generate_cohort, generate_environment, partition_non_iid, Cohort, GeneratorConfig, Modality, PatientRecord};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Environment variable naming the artifact root directory.
pub const OUTPUT_ROOT_ENV: &str = "CARDIOFED_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
/// Most records used for the per-round gradient-norm trace.
pub const TRACE_SET_SIZE: usize = 256;

/// Seeds derived from the master seed.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub cohort: u64,
    pub partition: u64,
    pub init: u64,
    pub rounds: u64,
    pub dp_noise: u64,
    pub projection: u64,
    pub split: u64,
    pub mc: u64,
    pub sweep: u64,
    pub ood: u64,
}

impl Seeds {
    pub fn from_master(m: u64) -> Self {
        Self {
            cohort: derive_seed(m, &[keys::COHORT]),
            partition: derive_seed(m, &[keys::PARTITION]),
            init: derive_seed(m, &[keys::INIT]),
            rounds: derive_seed(m, &[keys::SAMPLING]),
            dp_noise: derive_seed(m, &[keys::DP_NOISE]),
            projection: derive_seed(m, &[keys::PROJECTION]),
            split: derive_seed(m, &[keys::SPLIT]),
            mc: derive_seed(m, &[keys::MC]),
            sweep: derive_seed(m, &[keys::SWEEP]),
            ood: derive_seed(m, &[keys::OOD]),
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    /// Generator configuration with the derived cohort seed.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig { seed: self.seeds().cohort, ..self.cohort.clone() }
    }
}

/// The cohort with sites assigned by a Dirichlet partition.
pub fn prepare_cohort(cfg: &ExperimentConfig) -> Result<Cohort> {
    let mut cohort = generate_cohort(&cfg.generator())?;
    let sites = partition_non_iid(&cohort.records, cfg.cohort.n_sites, cfg.dirichlet_alpha, cfg.seeds().partition)?;
    assign_sites(&mut cohort.records, &sites);
    Ok(cohort)
}

/// Stratified fold index per record: each class is shuffled and dealt
/// round-robin into `k` folds.
pub fn stratified_folds(records: &[PatientRecord], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut fold = vec![0; records.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].outcome == class).collect();
        idx.shuffle(&mut keyed(seed, &[keys::SPLIT, u64::from(class)]));
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    Ok(fold)
}

/// Stratified train/test split.
pub fn holdout_split(records: &[PatientRecord], test_fraction: f64, seed: u64) -> (Vec<PatientRecord>, Vec<PatientRecord>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut is_test = vec![false; records.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].outcome == class).collect();
        idx.shuffle(&mut keyed(seed, &[keys::SPLIT, 2 + u64::from(class)]));
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    for (r, t) in records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, test)
}

/// A trained global model.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: Network,
    pub params: Vec<f64>,
    pub server: ServerState,
}

impl TrainedModel {
    pub fn predict(&self, records: &[PatientRecord]) -> Result<Vec<f64>> {
        self.net.predict(&self.params, records)
    }

    pub fn checkpoint_text(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_checkpoint(self.net.layout(), &self.params, &mut buf)?;
        Ok(String::from_utf8(buf).expect("checkpoint is ASCII"))
    }
}

/// One client per site present in `train`, in ascending site order.
pub fn site_clients(train: &[PatientRecord]) -> Result<Vec<ClientState<PatientRecord>>> {
    let sites: BTreeSet<usize> = train.iter().map(|r| r.site).collect();
    sites
        .into_iter()
        .map(|s| ClientState::new(s, train.iter().filter(|r| r.site == s).cloned().collect()))
        .collect()
}

/// Federated training of a fresh network on `train`, one client per site.
pub fn train_federated(cfg: &ExperimentConfig, train: &[PatientRecord]) -> Result<TrainedModel> {
    let seeds = cfg.seeds();
    let net = Network::new(cfg.model.clone(), &cfg.cohort, seeds.projection)?;
    let init = net.init(seeds.init);
    let clients = site_clients(train)?;
    let stride = train.len().div_ceil(TRACE_SET_SIZE).max(1);
    let trace: Vec<&PatientRecord> = train.iter().step_by(stride).collect();
    let rounds = fedsim::RoundConfig { seed: seeds.rounds, ..cfg.rounds.clone() };
    let dp = cfg.dp.map(|d| fedsim::DpConfig { noise_seed: seeds.dp_noise, ..d });
    let obj = ModelObjective { net, weights: cfg.loss };
    let server = fedsim::train(&obj, init, &clients, &rounds, dp.as_ref(), Some(&trace))?;
    Ok(TrainedModel { net: obj.net, params: server.params.clone(), server })
}

/// Metrics of a trained model on `test`, with MC-dropout coverage against the
/// generative probabilities and block Shapley attributions when enabled.
pub fn evaluate(cfg: &ExperimentConfig, model: &TrainedModel, test: &[PatientRecord], reference: &[PatientRecord]) -> Result<(MetricsReport, Vec<f64>)> {
    let risk = model.predict(test)?;
    let labels: Vec<u8> = test.iter().map(|r| r.outcome).collect();
    let groups: Vec<usize> = test.iter().map(|r| r.group).collect();
    let e = &cfg.eval;
    let mut report = MetricsReport::compute(&risk, &labels, &groups, e.threshold, e.ece_bins, e.binning)?;
    if e.mc_passes > 0 {
        let mc = evalkit::mc_dropout_predict(&model.net, &model.params, test, e.mc_passes, e.mc_rate, cfg.seeds().mc)?;
        let intervals: Vec<(f64, f64)> = mc.iter().map(|m| (m.lower, m.upper)).collect();
        let truth: Vec<f64> = test.iter().map(|r| r.true_risk).collect();
        report.coverage = Some(evalkit::coverage(&intervals, &truth)?);
    }
    if e.shapley_patients > 0 && !reference.is_empty() {
        let k = e.shapley_patients.min(test.len());
        let stride = (test.len() / k).max(1);
        let patients: Vec<PatientRecord> = test.iter().step_by(stride).take(k).cloned().collect();
        let sh = evalkit::mean_abs_shapley(&model.net, &model.params, &patients, reference)?;
        report.shapley = Some(sh.into_iter().map(|(block, mean_abs)| ShapleyEntry { block, mean_abs }).collect());
    }
    Ok((report, risk))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub ood_spurious: f64,
    pub shifted: MetricsReport,
    /// In-distribution minus shifted ROC-AUC.
    pub auc_drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub protocol: String,
    /// Metrics over the pooled held-out predictions of every fold.
    pub pooled: MetricsReport,
    pub folds: Vec<FoldReport>,
    pub shift: Option<ShiftReport>,
    pub epsilon: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
}

/// Results of a full run, ready to be written to disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub round_log: String,
    pub checkpoint: String,
}

struct FoldRun {
    name: String,
    train: Vec<PatientRecord>,
    test: Vec<PatientRecord>,
}

fn protocol_folds(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<Vec<FoldRun>> {
    let recs = &cohort.records;
    let seeds = cfg.seeds();
    match cfg.protocol {
        Protocol::Kfold(k) => {
            let fold = stratified_folds(recs, k, seeds.split)?;
            Ok((0..k)
                .map(|f| FoldRun {
                    name: format!("fold_{f}"),
                    train: recs.iter().zip(&fold).filter(|(_, &g)| g != f).map(|(r, _)| r.clone()).collect(),
                    test: recs.iter().zip(&fold).filter(|(_, &g)| g == f).map(|(r, _)| r.clone()).collect(),
                })
                .collect())
        }
        Protocol::LeaveSiteOut => {
            let sites: BTreeSet<usize> = recs.iter().map(|r| r.site).collect();
            if sites.len() < 2 {
                return Err(Error::Config("leave-site-out needs at least two non-empty sites".into()));
            }
            let runs: Vec<FoldRun> = sites
                .into_iter()
                .map(|s| FoldRun {
                    name: format!("site_{s}"),
                    train: recs.iter().filter(|r| r.site != s).cloned().collect(),
                    test: recs.iter().filter(|r| r.site == s).cloned().collect(),
                })
                .collect();
            for run in &runs {
                let train_ids: BTreeSet<u64> = run.train.iter().map(|r| r.id).collect();
                if run.test.iter().any(|r| train_ids.contains(&r.id)) {
                    return Err(Error::Input(format!("{}: test patients overlap training sites", run.name)));
                }
            }
            Ok(runs)
        }
        Protocol::OodShift { .. } | Protocol::Holdout => {
            let (train, test) = holdout_split(recs, cfg.test_fraction, seeds.split);
            Ok(vec![FoldRun { name: "holdout".into(), train, test }])
        }
    }
}

/// Patients of a shifted environment: same generative structure, fresh ids,
/// confounder-outcome strength `spurious`.
pub fn shifted_environment(cfg: &ExperimentConfig, spurious: f64, n: usize) -> Result<Vec<PatientRecord>> {
    let gen = GeneratorConfig { n_patients: n, seed: cfg.seeds().cohort, ..cfg.cohort.clone() };
    Ok(generate_environment(&gen, spurious, cfg.cohort.n_patients as u64)?.records)
}

/// Run the configured protocol end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let cohort = prepare_cohort(cfg)?;
    let folds = protocol_folds(cfg, &cohort)?;
    let mut fold_reports = Vec::new();
    let mut pooled_risk = Vec::new();
    let mut pooled_test: Vec<PatientRecord> = Vec::new();
    let mut round_log = String::new();
    let mut last: Option<(TrainedModel, Vec<PatientRecord>)> = None;
    let mut epsilon: Option<f64> = None;
    for (i, run) in folds.into_iter().enumerate() {
        let model = train_federated(cfg, &run.train)?;
        let (metrics, risk) = evaluate(cfg, &model, &run.test, &run.train)?;
        let mut buf = Vec::new();
        model.server.write_round_log(&mut buf)?;
        let text = String::from_utf8(buf).expect("round log is UTF-8");
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    round_log.push_str(&format!("fold\t{line}\n"));
                }
            } else {
                round_log.push_str(&format!("{}\t{line}\n", run.name));
            }
        }
        epsilon = match (epsilon, model.server.epsilon()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        fold_reports.push(FoldReport { name: run.name, n_train: run.train.len(), n_test: run.test.len(), metrics });
        pooled_risk.extend(risk);
        pooled_test.extend(run.test.iter().cloned());
        last = Some((model, run.train));
    }
    let (model, train) = last.ok_or_else(|| Error::Config("protocol produced no folds".into()))?;
    let labels: Vec<u8> = pooled_test.iter().map(|r| r.outcome).collect();
    let groups: Vec<usize> = pooled_test.iter().map(|r| r.group).collect();
    let e = &cfg.eval;
    let mut pooled = MetricsReport::compute(&pooled_risk, &labels, &groups, e.threshold, e.ece_bins, e.binning)?;
    if fold_reports.len() == 1 {
        pooled = fold_reports[0].metrics.clone();
    } else {
        pooled.coverage = mean_option(fold_reports.iter().map(|f| f.metrics.coverage));
    }
    let shift = match cfg.protocol {
        Protocol::OodShift { spurious } => {
            let n = fold_reports[0].n_test;
            let env = shifted_environment(cfg, spurious, n)?;
            let (shifted, _) = evaluate(cfg, &model, &env, &train)?;
            let auc_drop = match (pooled.roc_auc, shifted.roc_auc) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            Some(ShiftReport { ood_spurious: spurious, shifted, auc_drop })
        }
        _ => None,
    };
    let report = ExperimentReport {
        schema_version: evalkit::SCHEMA_VERSION,
        config_hash: cfg.hash(),
        protocol: cfg.protocol.name().to_string(),
        pooled,
        folds: fold_reports,
        shift,
        epsilon,
        final_grad_norm_sq: model.server.grad_norm_trace.last().copied(),
    };
    Ok(RunOutcome { report, round_log, checkpoint: model.checkpoint_text()? })
}

fn mean_option(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub roc_auc: Option<f64>,
    /// Change from the full model; `None` on the full-model row.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Tab-separated table; the full-model row's delta reads `baseline`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("configuration\troc_auc\tdelta_roc_auc\n");
        for (i, r) in self.rows.iter().enumerate() {
            let auc = r.roc_auc.map_or("null".into(), |v| format!("{v:.4}"));
            let delta = if i == 0 { "baseline".to_string() } else { r.delta.map_or("null".into(), |d| format!("{d:+.4}")) };
            out.push_str(&format!("{}\t{auc}\t{delta}\n", r.configuration));
        }
        out
    }
}

/// Remove a modality from every record.
pub fn without_modality(records: &[PatientRecord], m: Modality) -> Vec<PatientRecord> {
    records.iter().map(|r| drop_one(r, m)).collect()
}

/// Holdout ROC-AUC of the full model and of one model per dropped modality,
/// all with the same seeds and split.
pub fn run_ablation(cfg: &ExperimentConfig, drops: &[Modality]) -> Result<AblationTable> {
    cfg.validate()?;
    let cohort = prepare_cohort(cfg)?;
    let (train, test) = holdout_split(&cohort.records, cfg.test_fraction, cfg.seeds().split);
    let auc = |train: &[PatientRecord], test: &[PatientRecord]| -> Result<Option<f64>> {
        let model = train_federated(cfg, train)?;
        let risk = model.predict(test)?;
        let labels: Vec<u8> = test.iter().map(|r| r.outcome).collect();
        match evalkit::roc_auc(&risk, &labels) {
            Ok(a) => Ok(Some(a)),
            Err(Error::MetricUndefined(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let full = auc(&train, &test)?;
    let mut rows = vec![AblationRow { configuration: "full".into(), roc_auc: full, delta: None }];
    for &m in drops {
        let a = auc(&without_modality(&train, m), &without_modality(&test, m))?;
        let delta = match (a, full) {
            (Some(a), Some(f)) => Some(a - f),
            _ => None,
        };
        rows.push(AblationRow { configuration: format!("without_{}", m.name()), roc_auc: a, delta });
    }
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessSweepReport {
    pub reference_group: usize,
    /// Federated model retrained at each multiplier.
    pub model: Vec<SweepPoint>,
    /// Group-blind oracle scoring patients by their generative probability.
    pub oracle: Vec<SweepPoint>,
}

impl FairnessSweepReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scorer\tmultiplier\ttrain_size\tdelta_auc\tparity_gap\tequal_opportunity_gap\tflag\n");
        for (name, pts) in [("model", &self.model), ("oracle", &self.oracle)] {
            for p in pts {
                let (d, pg, eo) = p.report.as_ref().map_or(("null".into(), "null".into(), "null".into()), |r| {
                    (format!("{}", r.delta_auc), format!("{}", r.parity_gap), format!("{}", r.equal_opportunity_gap))
                });
                out.push_str(&format!("{name}\t{}\t{}\t{d}\t{pg}\t{eo}\t{}\n", p.multiplier, p.train_size, p.flag.as_deref().unwrap_or("-")));
            }
        }
        out
    }
}

/// Retrain under each group-prevalence multiplier and record fairness gaps
/// on a fixed held-out test set, alongside the group-blind oracle.
pub fn run_fairness_sweep(cfg: &ExperimentConfig) -> Result<FairnessSweepReport> {
    cfg.validate()?;
    let cohort = prepare_cohort(cfg)?;
    let seeds = cfg.seeds();
    let (train, test) = holdout_split(&cohort.records, cfg.test_fraction, seeds.split);
    let e = &cfg.eval;
    let model = evalkit::fairness_sensitivity_sweep(&train, &test, &e.fairness_multipliers, e.fairness_reference_group, e.threshold, seeds.sweep, |subset| {
        train_federated(cfg, subset)?.predict(&test)
    })?;
    let truth: Vec<f64> = test.iter().map(|r| r.true_risk).collect();
    let oracle = evalkit::fairness_sensitivity_sweep(&train, &test, &e.fairness_multipliers, e.fairness_reference_group, e.threshold, seeds.sweep, |_| Ok(truth.clone()))?;
    Ok(FairnessSweepReport { reference_group: e.fairness_reference_group, model, oracle })
}

/// `root/<first 16 hex digits of the config hash>`.
pub fn output_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    root.join(&cfg.hash()[..16])
}

/// Artifact root: explicit value, then the environment variable, then
/// [`DEFAULT_OUTPUT_ROOT`].
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub const ARTIFACTS: [&str; 6] = ["config.txt", "metrics.json", "metrics.txt", "reliability.csv", "round_log.tsv", "checkpoint.txt"];

/// Write every artifact of a run into `dir`.
pub fn write_run_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = &out.report;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(r)? + "\n")?;
    let mut kv = format!("protocol = {}\nconfig_hash = {}\n", r.protocol, r.config_hash);
    kv.push_str(&r.pooled.to_kv());
    let opt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| format!("{x}"));
    kv.push_str(&format!("epsilon = {}\nfinal_grad_norm_sq = {}\n", opt(r.epsilon), opt(r.final_grad_norm_sq)));
    for f in &r.folds {
        kv.push_str(&format!("{}.roc_auc = {}\n", f.name, opt(f.metrics.roc_auc)));
    }
    if let Some(s) = &r.shift {
        kv.push_str(&format!("shift.ood_spurious = {}\nshift.roc_auc = {}\nshift.auc_drop = {}\n", s.ood_spurious, opt(s.shifted.roc_auc), opt(s.auc_drop)));
    }
    std::fs::write(dir.join("metrics.txt"), kv)?;
    let mut csv = Vec::new();
    r.pooled.write_reliability_csv(&mut csv)?;
    std::fs::write(dir.join("reliability.csv"), csv)?;
    std::fs::write(dir.join("round_log.tsv"), &out.round_log)?;
    std::fs::write(dir.join("checkpoint.txt"), &out.checkpoint)?;
    Ok(())
}

/// Read a run's `metrics.json`.
pub fn read_report(dir: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(dir.join("metrics.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.cohort.n_patients = 120;
        cfg.cohort.n_sites = 2;
        cfg.rounds.rounds = 2;
        cfg.rounds.local_epochs = 1;
        cfg.eval.mc_passes = 5;
        cfg.eval.shapley_patients = 2;
        cfg
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let cohort = prepare_cohort(&tiny()).unwrap();
        let fold = stratified_folds(&cohort.records, 3, 1).unwrap();
        for f in 0..3 {
            let n = fold.iter().filter(|&&g| g == f).count();
            assert!((39..=41).contains(&n), "fold {f} has {n}");
        }
        assert!(stratified_folds(&cohort.records, 1, 1).is_err());
    }

    #[test]
    fn holdout_is_a_partition() {
        let cohort = prepare_cohort(&tiny()).unwrap();
        let (train, test) = holdout_split(&cohort.records, 0.25, 4);
        assert_eq!(train.len() + test.len(), 120);
        let ids: BTreeSet<u64> = train.iter().map(|r| r.id).collect();
        assert!(test.iter().all(|r| !ids.contains(&r.id)));
    }

    #[test]
    fn holdout_run_produces_complete_report() {
        let mut cfg = tiny();
        cfg.protocol = Protocol::Holdout;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.report.folds.len(), 1);
        assert!(out.report.pooled.coverage.is_some());
        assert!(out.report.pooled.shapley.is_some());
        assert_eq!(out.round_log.lines().count(), 1 + 2);
        let json = serde_json::to_string(&out.report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, out.report);
    }
}
