//! Experiment configuration: a flat `[section]` / `key = value` text format.
//!
//! Every key has a default, unknown sections and keys are rejected, and
//! parse errors carry the 1-based line number. [`ExperimentConfig::to_text`]
//! renders every key, so a rendered config parses back to the same value and
//! doubles as the canonical form hashed into the output directory name.

use crate::error::{Error, Result};
use crate::evalkit::Binning;
use crate::fedsim::{DpConfig, RoundConfig};
use crate::model::ModelConfig;
use crate::objective::{CausalVariant, LossWeights};
use crate::synthcohort::{GeneratorConfig, Modality};
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Protocol {
    /// Stratified k-fold cross-validation, `k >= 2`.
    Kfold(usize),
    LeaveSiteOut,
    /// Train in distribution, evaluate on a held-out split and on a fresh
    /// environment with the given confounder-outcome strength.
    OodShift { spurious: f64 },
    /// One stratified train/test split.
    Holdout,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Kfold(_) => "kfold",
            Protocol::LeaveSiteOut => "leave_site_out",
            Protocol::OodShift { .. } => "ood_shift",
            Protocol::Holdout => "holdout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub ece_bins: usize,
    pub binning: Binning,
    /// MC-dropout passes; 0 skips uncertainty evaluation.
    pub mc_passes: usize,
    pub mc_rate: f64,
    /// Patients attributed with exact Shapley values; 0 skips attribution.
    pub shapley_patients: usize,
    pub fairness_multipliers: Vec<f64>,
    pub fairness_reference_group: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            ece_bins: 10,
            binning: Binning::EqualWidth,
            mc_passes: 50,
            mc_rate: 0.1,
            shapley_patients: 10,
            fairness_multipliers: vec![1.0, 2.0, 4.0],
            fairness_reference_group: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub protocol: Protocol,
    pub folds: usize,
    pub test_fraction: f64,
    pub ood_spurious: f64,
    pub cohort: GeneratorConfig,
    pub dirichlet_alpha: f64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub rounds: RoundConfig,
    pub dp: Option<DpConfig>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            protocol: Protocol::Kfold(5),
            folds: 5,
            test_fraction: 0.25,
            ood_spurious: 0.0,
            cohort: GeneratorConfig::default(),
            dirichlet_alpha: 1.0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            rounds: RoundConfig::default(),
            dp: None,
            eval: EvalConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value '{v}': {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid boolean '{v}'")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|s| parse_num::<f64>(s.trim())).collect()
}

fn list_text(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const DEFAULT_DP: DpConfig = DpConfig { clip_norm: 1.0, noise_multiplier: 1.0, delta: 1e-5, noise_seed: 0 };

impl ExperimentConfig {
    /// Set one key. Returns a message (without line number) on failure.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let c = &mut self.cohort;
        let m = &mut self.model;
        let l = &mut self.loss;
        let r = &mut self.rounds;
        let e = &mut self.eval;
        match (section, key) {
            ("experiment", "seed") => self.seed = parse_num(v)?,
            ("experiment", "protocol") => {
                self.protocol = match v {
                    "kfold" => Protocol::Kfold(self.folds),
                    "leave_site_out" => Protocol::LeaveSiteOut,
                    "ood_shift" => Protocol::OodShift { spurious: self.ood_spurious },
                    "holdout" => Protocol::Holdout,
                    _ => return Err(format!("unknown protocol '{v}' (kfold, leave_site_out, ood_shift, holdout)")),
                }
            }
            ("experiment", "folds") => {
                let k: usize = parse_num(v)?;
                if k < 2 {
                    return Err(format!("folds must be >= 2, got {k}"));
                }
                self.folds = k;
                if let Protocol::Kfold(_) = self.protocol {
                    self.protocol = Protocol::Kfold(k);
                }
            }
            ("experiment", "test_fraction") => self.test_fraction = parse_num(v)?,
            ("experiment", "ood_spurious") => {
                self.ood_spurious = parse_num(v)?;
                if let Protocol::OodShift { .. } = self.protocol {
                    self.protocol = Protocol::OodShift { spurious: self.ood_spurious };
                }
            }
            ("cohort", "n_patients") => c.n_patients = parse_num(v)?,
            ("cohort", "d_ecg") => c.d_ecg = parse_num(v)?,
            ("cohort", "d_mri") => c.d_mri = parse_num(v)?,
            ("cohort", "d_ehr") => c.d_ehr = parse_num(v)?,
            ("cohort", "n_snps") => c.n_snps = parse_num(v)?,
            ("cohort", "n_sites") => c.n_sites = parse_num(v)?,
            ("cohort", "n_groups") => c.n_groups = parse_num(v)?,
            ("cohort", "n_confounder_levels") => c.n_confounder_levels = parse_num(v)?,
            ("cohort", "effect_ecg") => c.effects.ecg = parse_num(v)?,
            ("cohort", "effect_mri") => c.effects.mri = parse_num(v)?,
            ("cohort", "effect_genomics") => c.effects.genomics = parse_num(v)?,
            ("cohort", "effect_ehr") => c.effects.ehr = parse_num(v)?,
            ("cohort", "confounder_strength") => c.confounder_strength = parse_num(v)?,
            ("cohort", "spurious_strength") => c.spurious_strength = parse_num(v)?,
            ("cohort", "rarity_fraction") => c.rarity_fraction = parse_num(v)?,
            ("cohort", "rare_effect") => c.rare_effect = parse_num(v)?,
            ("cohort", "rare_shift") => c.rare_shift = parse_num(v)?,
            ("cohort", "signal_amplitude") => c.signal_amplitude = parse_num(v)?,
            ("cohort", "noise_std") => c.noise_std = parse_num(v)?,
            ("cohort", "group_heterogeneity") => c.group_heterogeneity = parse_num(v)?,
            ("cohort", "dirichlet_alpha") => self.dirichlet_alpha = parse_num(v)?,
            ("model", "latent_dim") => m.latent_dim = parse_num(v)?,
            ("model", "heads") => m.heads = parse_num(v)?,
            ("model", "gat_layers") => m.gat_layers = parse_num(v)?,
            ("model", "gat_dim") => m.gat_dim = parse_num(v)?,
            ("model", "hidden") => m.hidden = parse_num(v)?,
            ("model", "dropout") => m.dropout = parse_num(v)?,
            ("model", "slope") => m.slope = parse_num(v)?,
            ("model", "rare_boost") => m.rare_boost = parse_num(v)?,
            ("model", "genotype_proj_dim") => m.genotype_proj_dim = parse_num(v)?,
            ("model", "aux_hidden") => m.aux_hidden = parse_num(v)?,
            ("model", "aux_steps") => m.aux_steps = parse_num(v)?,
            ("model", "aux_lr") => m.aux_lr = parse_num(v)?,
            ("model", "k_neighbors") => m.k_neighbors = parse_num(v)?,
            ("model", "graph_weight_genotype") => m.graph_weights.genotype = parse_num(v)?,
            ("model", "graph_weight_ehr") => m.graph_weights.ehr = parse_num(v)?,
            ("model", "graph_weight_demographic") => m.graph_weights.demographic = parse_num(v)?,
            ("model", "eval_chunk") => m.eval_chunk = parse_num(v)?,
            ("loss", "mi_weight") => l.mi_weight = parse_num(v)?,
            ("loss", "causal_weight") => l.causal_weight = parse_num(v)?,
            ("loss", "l2_weight") => l.l2_weight = parse_num(v)?,
            ("loss", "kappa") => l.kappa = parse_num(v)?,
            ("loss", "variant") => l.variant = CausalVariant::parse(v).map_err(|e| e.to_string())?,
            ("loss", "prob_diff_bins") => l.prob_diff_bins = parse_num(v)?,
            ("federation", "rounds") => r.rounds = parse_num(v)?,
            ("federation", "local_epochs") => r.local_epochs = parse_num(v)?,
            ("federation", "batch_size") => r.batch_size = parse_num(v)?,
            ("federation", "lr") => r.lr = parse_num(v)?,
            ("federation", "participation") => r.participation = parse_num(v)?,
            ("dp", "enabled") => {
                let on = parse_bool(v)?;
                self.dp = match (on, self.dp) {
                    (true, None) => Some(DEFAULT_DP),
                    (true, d) => d,
                    (false, _) => None,
                };
            }
            ("dp", k @ ("clip_norm" | "noise_multiplier" | "delta")) => {
                let d = self.dp.get_or_insert(DEFAULT_DP);
                let x: f64 = parse_num(v)?;
                match k {
                    "clip_norm" => d.clip_norm = x,
                    "noise_multiplier" => d.noise_multiplier = x,
                    _ => d.delta = x,
                }
            }
            ("eval", "threshold") => e.threshold = parse_num(v)?,
            ("eval", "ece_bins") => e.ece_bins = parse_num(v)?,
            ("eval", "binning") => {
                e.binning = match v {
                    "equal_width" => Binning::EqualWidth,
                    "equal_mass" => Binning::EqualMass,
                    _ => return Err(format!("unknown binning '{v}' (equal_width, equal_mass)")),
                }
            }
            ("eval", "mc_passes") => e.mc_passes = parse_num(v)?,
            ("eval", "mc_rate") => e.mc_rate = parse_num(v)?,
            ("eval", "shapley_patients") => e.shapley_patients = parse_num(v)?,
            ("eval", "fairness_multipliers") => e.fairness_multipliers = parse_list(v)?,
            ("eval", "fairness_reference_group") => e.fairness_reference_group = parse_num(v)?,
            _ => return Err(format!("unknown key '{key}' in section [{section}]")),
        }
        Ok(())
    }

    /// Every key with its current value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let c = &self.cohort;
        let m = &self.model;
        let l = &self.loss;
        let r = &self.rounds;
        let e = &self.eval;
        let s = |x: &dyn Display| x.to_string();
        let mut dp = vec![("enabled", s(&self.dp.is_some()))];
        if let Some(d) = &self.dp {
            dp.extend([("clip_norm", s(&d.clip_norm)), ("noise_multiplier", s(&d.noise_multiplier)), ("delta", s(&d.delta))]);
        }
        vec![
            (
                "experiment",
                vec![
                    ("seed", s(&self.seed)),
                    ("folds", s(&self.folds)),
                    ("test_fraction", s(&self.test_fraction)),
                    ("ood_spurious", s(&self.ood_spurious)),
                    ("protocol", self.protocol.name().to_string()),
                ],
            ),
            (
                "cohort",
                vec![
                    ("n_patients", s(&c.n_patients)),
                    ("d_ecg", s(&c.d_ecg)),
                    ("d_mri", s(&c.d_mri)),
                    ("d_ehr", s(&c.d_ehr)),
                    ("n_snps", s(&c.n_snps)),
                    ("n_sites", s(&c.n_sites)),
                    ("n_groups", s(&c.n_groups)),
                    ("n_confounder_levels", s(&c.n_confounder_levels)),
                    ("effect_ecg", s(&c.effects.ecg)),
                    ("effect_mri", s(&c.effects.mri)),
                    ("effect_genomics", s(&c.effects.genomics)),
                    ("effect_ehr", s(&c.effects.ehr)),
                    ("confounder_strength", s(&c.confounder_strength)),
                    ("spurious_strength", s(&c.spurious_strength)),
                    ("rarity_fraction", s(&c.rarity_fraction)),
                    ("rare_effect", s(&c.rare_effect)),
                    ("rare_shift", s(&c.rare_shift)),
                    ("signal_amplitude", s(&c.signal_amplitude)),
                    ("noise_std", s(&c.noise_std)),
                    ("group_heterogeneity", s(&c.group_heterogeneity)),
                    ("dirichlet_alpha", s(&self.dirichlet_alpha)),
                ],
            ),
            (
                "model",
                vec![
                    ("latent_dim", s(&m.latent_dim)),
                    ("heads", s(&m.heads)),
                    ("gat_layers", s(&m.gat_layers)),
                    ("gat_dim", s(&m.gat_dim)),
                    ("hidden", s(&m.hidden)),
                    ("dropout", s(&m.dropout)),
                    ("slope", s(&m.slope)),
                    ("rare_boost", s(&m.rare_boost)),
                    ("genotype_proj_dim", s(&m.genotype_proj_dim)),
                    ("aux_hidden", s(&m.aux_hidden)),
                    ("aux_steps", s(&m.aux_steps)),
                    ("aux_lr", s(&m.aux_lr)),
                    ("k_neighbors", s(&m.k_neighbors)),
                    ("graph_weight_genotype", s(&m.graph_weights.genotype)),
                    ("graph_weight_ehr", s(&m.graph_weights.ehr)),
                    ("graph_weight_demographic", s(&m.graph_weights.demographic)),
                    ("eval_chunk", s(&m.eval_chunk)),
                ],
            ),
            (
                "loss",
                vec![
                    ("mi_weight", s(&l.mi_weight)),
                    ("causal_weight", s(&l.causal_weight)),
                    ("l2_weight", s(&l.l2_weight)),
                    ("kappa", s(&l.kappa)),
                    ("variant", l.variant.name().to_string()),
                    ("prob_diff_bins", s(&l.prob_diff_bins)),
                ],
            ),
            (
                "federation",
                vec![
                    ("rounds", s(&r.rounds)),
                    ("local_epochs", s(&r.local_epochs)),
                    ("batch_size", s(&r.batch_size)),
                    ("lr", s(&r.lr)),
                    ("participation", s(&r.participation)),
                ],
            ),
            ("dp", dp),
            (
                "eval",
                vec![
                    ("threshold", s(&e.threshold)),
                    ("ece_bins", s(&e.ece_bins)),
                    ("binning", if e.binning == Binning::EqualMass { "equal_mass" } else { "equal_width" }.to_string()),
                    ("mc_passes", s(&e.mc_passes)),
                    ("mc_rate", s(&e.mc_rate)),
                    ("shapley_patients", s(&e.shapley_patients)),
                    ("fairness_multipliers", list_text(&e.fairness_multipliers)),
                    ("fairness_reference_group", s(&e.fairness_reference_group)),
                ],
            ),
        ]
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, keys) in self.entries() {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in keys {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.split(['#', ';']).next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            if let Some(name) = t.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse { line, message: format!("malformed section header '{t}'") })?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Parse { line, message: format!("unknown section [{name}]") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse { line, message: format!("expected 'key = value', got '{t}'") })?;
            let sec = section.as_deref().ok_or_else(|| Error::Parse { line, message: "key outside any [section]".into() })?;
            cfg.set(sec, k.trim(), v.trim()).map_err(|message| Error::Parse { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, v) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override '{spec}' must look like section.key=value")))?;
        let (sec, key) = path.trim().split_once('.').ok_or_else(|| Error::Config(format!("override key '{path}' must look like section.key")))?;
        self.set(sec, key, v.trim()).map_err(|m| Error::Config(format!("override '{spec}': {m}")))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.rounds.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        if self.rounds.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        if !(-1.0..=1.0).contains(&self.ood_spurious) {
            return Err(Error::Config("ood_spurious must lie in [-1, 1]".into()));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("dirichlet_alpha must be > 0".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) || self.eval.ece_bins == 0 {
            return Err(Error::Config("eval threshold must lie in (0, 1) and ece_bins be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval.mc_rate) {
            return Err(Error::Config("mc_rate must lie in [0, 1)".into()));
        }
        if self.eval.fairness_multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) || self.eval.fairness_multipliers.is_empty() {
            return Err(Error::Config("fairness_multipliers must be a nonempty list of positive numbers".into()));
        }
        if self.eval.fairness_reference_group >= self.cohort.n_groups {
            return Err(Error::Config("fairness_reference_group must name an existing group".into()));
        }
        Ok(())
    }
}

pub const SECTIONS: [&str; 7] = ["experiment", "cohort", "model", "loss", "federation", "dp", "eval"];

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a comma-separated modality list.
pub fn parse_modalities(list: &str) -> Result<Vec<Modality>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Modality::parse(name)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no modalities given".into()));
    }
    Ok(out)
}
