//! Synthetic multimodal cohorts with a known generative process.
//!
//! Each patient carries an independent latent signal per modality. ECG, MRI
//! and EHR vectors embed their signal along a fixed direction plus Gaussian
//! noise; the genomics signal is the standardised polygenic risk score. The
//! outcome is `Bernoulli(sigmoid(sum_m w_m s_m + rare_effect * rare))`.
//!
//! The confounder is generated downstream of the outcome: with probability
//! `|spurious_strength|` it copies the outcome (level 0 for negatives, the top
//! level for positives, reversed when the strength is negative), otherwise it
//! is uniform. Every modality is shifted by a per-level offset scaled by
//! `confounder_strength`, so features carry a shortcut to the outcome whose
//! reliability depends on the environment. Regenerating with a different
//! spurious strength gives a ground-truth distribution shift.
//!
//! All draws come from streams keyed by `(seed, patient id)`, so generation is
//! order independent and parallel.

mod graph;
mod io;
mod partition;

pub use graph::{build_similarity_graph, GraphFeatureWeights, PatientGraph};
pub use io::{read_cohort, write_cohort};
pub use partition::partition_non_iid;

use crate::error::{Error, Result};
use crate::rng::{keyed, keys};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// The four input modalities, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ecg,
    Mri,
    Genomics,
    Ehr,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Ecg, Modality::Mri, Modality::Genomics, Modality::Ehr];

    pub fn index(self) -> usize {
        match self {
            Modality::Ecg => 0,
            Modality::Mri => 1,
            Modality::Genomics => 2,
            Modality::Ehr => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ecg => "ecg",
            Modality::Mri => "mri",
            Modality::Genomics => "genomics",
            Modality::Ehr => "ehr",
        }
    }

    pub fn parse(name: &str) -> Result<Modality> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == name.trim())
            .ok_or_else(|| Error::Config(format!("unknown modality '{name}' (expected ecg, mri, genomics or ehr)")))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-modality outcome weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectWeights {
    pub ecg: f64,
    pub mri: f64,
    pub genomics: f64,
    pub ehr: f64,
}

impl EffectWeights {
    pub fn uniform(w: f64) -> Self {
        Self { ecg: w, mri: w, genomics: w, ehr: w }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Ecg => self.ecg,
            Modality::Mri => self.mri,
            Modality::Genomics => self.genomics,
            Modality::Ehr => self.ehr,
        }
    }

    pub fn set(&mut self, m: Modality, w: f64) {
        match m {
            Modality::Ecg => self.ecg = w,
            Modality::Mri => self.mri = w,
            Modality::Genomics => self.genomics = w,
            Modality::Ehr => self.ehr = w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub d_ecg: usize,
    pub d_mri: usize,
    pub d_ehr: usize,
    /// Number of SNPs.
    pub n_snps: usize,
    pub n_sites: usize,
    pub n_groups: usize,
    pub n_confounder_levels: usize,
    pub effects: EffectWeights,
    /// Scale of the per-level feature offset induced by the confounder.
    pub confounder_strength: f64,
    /// Probability in `[-1, 1]` that the confounder copies the outcome.
    pub spurious_strength: f64,
    pub rarity_fraction: f64,
    /// Logit increment for rare-phenotype carriers.
    pub rare_effect: f64,
    /// MRI mean shift for rare-phenotype carriers.
    pub rare_shift: f64,
    pub signal_amplitude: f64,
    pub noise_std: f64,
    /// Rotation of the EHR signal direction across groups, as a fraction of
    /// a half turn between the first and last group.
    pub group_heterogeneity: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            d_ecg: 8,
            d_mri: 8,
            d_ehr: 8,
            n_snps: 32,
            n_sites: 4,
            n_groups: 3,
            n_confounder_levels: 3,
            effects: EffectWeights::uniform(1.0),
            confounder_strength: 1.0,
            spurious_strength: 0.8,
            rarity_fraction: 0.05,
            rare_effect: 1.5,
            rare_shift: 1.0,
            signal_amplitude: 1.0,
            noise_std: 0.5,
            group_heterogeneity: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_patients", self.n_patients),
            ("d_ecg", self.d_ecg),
            ("d_mri", self.d_mri),
            ("d_ehr", self.d_ehr),
            ("n_snps", self.n_snps),
            ("n_sites", self.n_sites),
            ("n_groups", self.n_groups),
            ("n_confounder_levels", self.n_confounder_levels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let reals = [
            ("effects.ecg", self.effects.ecg),
            ("effects.mri", self.effects.mri),
            ("effects.genomics", self.effects.genomics),
            ("effects.ehr", self.effects.ehr),
            ("confounder_strength", self.confounder_strength),
            ("spurious_strength", self.spurious_strength),
            ("rarity_fraction", self.rarity_fraction),
            ("rare_effect", self.rare_effect),
            ("rare_shift", self.rare_shift),
            ("signal_amplitude", self.signal_amplitude),
            ("noise_std", self.noise_std),
            ("group_heterogeneity", self.group_heterogeneity),
        ];
        for (name, v) in reals {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if !(-1.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::Config("spurious_strength must lie in [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.rarity_fraction) {
            return Err(Error::Config("rarity_fraction must lie in [0, 1]".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Ecg => self.d_ecg,
            Modality::Mri => self.d_mri,
            Modality::Ehr => self.d_ehr,
            Modality::Genomics => self.n_snps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: u64,
    pub x_ecg: Vec<f64>,
    pub x_mri: Vec<f64>,
    pub x_ehr: Vec<f64>,
    pub genotype: Vec<u8>,
    pub prs: f64,
    pub confounder: usize,
    pub group: usize,
    pub site: usize,
    pub outcome: u8,
    /// 1 for rare-phenotype carriers, 0 otherwise.
    pub rarity: f64,
    /// Generative outcome probability.
    pub true_risk: f64,
    /// Missing-modality flags in [`Modality::ALL`] order.
    pub missing: [bool; 4],
}

impl PatientRecord {
    pub fn is_missing(&self, m: Modality) -> bool {
        self.missing[m.index()]
    }

    pub fn label(&self) -> f64 {
        f64::from(self.outcome)
    }
}

/// A generated cohort together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub config: GeneratorConfig,
    pub records: Vec<PatientRecord>,
}

/// Cohort-level generative constants derived from the seed.
#[derive(Clone, Debug)]
pub struct GenerativeStructure {
    pub allele_freqs: Vec<f64>,
    pub betas: Vec<f64>,
    pub prs_mean: f64,
    pub prs_sd: f64,
    signal_dirs: [Vec<f64>; 3],
    ehr_orth: Vec<f64>,
    conf_dirs: [Vec<f64>; 3],
    rare_dir: Vec<f64>,
}

const STRUCTURE_KEY: u64 = 0x7374_7275;

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Component of `v` orthogonal to the unit vector `u`, normalised; falls back
/// to `u` itself in one dimension.
fn orthonormal_to(u: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    if u.len() < 2 {
        return u.to_vec();
    }
    loop {
        let v = unit_vector(rng, u.len());
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - dot * b).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return w.into_iter().map(|x| x / n).collect();
        }
    }
}

impl GenerativeStructure {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = keyed(cfg.seed, &[keys::COHORT, STRUCTURE_KEY]);
        let p = cfg.n_snps;
        let allele_freqs: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..0.5)).collect();
        let sd = (1.0 / p as f64).sqrt();
        let betas: Vec<f64> = (0..p).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let prs_mean = betas.iter().zip(&allele_freqs).map(|(b, f)| 2.0 * b * f).sum();
        let prs_var: f64 = betas
            .iter()
            .zip(&allele_freqs)
            .map(|(b, f)| b * b * 2.0 * f * (1.0 - f))
            .sum();
        let signal_dirs = [
            unit_vector(&mut rng, cfg.d_ecg),
            unit_vector(&mut rng, cfg.d_mri),
            unit_vector(&mut rng, cfg.d_ehr),
        ];
        let ehr_orth = orthonormal_to(&signal_dirs[2], &mut rng);
        let conf_dirs = [
            unit_vector(&mut rng, cfg.d_ecg),
            unit_vector(&mut rng, cfg.d_mri),
            unit_vector(&mut rng, cfg.d_ehr),
        ];
        let rare_dir = unit_vector(&mut rng, cfg.d_mri);
        Self {
            allele_freqs,
            betas,
            prs_mean,
            prs_sd: prs_var.sqrt().max(1e-12),
            signal_dirs,
            ehr_orth,
            conf_dirs,
            rare_dir,
        }
    }

    /// Standardised genomics signal for a PRS value.
    pub fn genomics_signal(&self, prs: f64) -> f64 {
        (prs - self.prs_mean) / self.prs_sd
    }
}

/// `PRS = sum_j beta_j * genotype_j`.
pub fn compute_prs(genotype: &[u8], betas: &[f64]) -> Result<f64> {
    if genotype.len() != betas.len() {
        return Err(Error::shape(
            "compute_prs",
            format!("genotype len {}", genotype.len()),
            format!("betas len {}", betas.len()),
        ));
    }
    Ok(genotype.iter().zip(betas).map(|(&g, b)| f64::from(g) * b).sum())
}

pub fn sigmoid(x: f64) -> f64 {
    crate::objective::sigmoid(x)
}

/// Confounder level offsets: evenly spaced on `[-1, 1]`, zero for one level.
fn confounder_offset(level: usize, levels: usize) -> f64 {
    if levels <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * level as f64 / (levels - 1) as f64
    }
}

pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<Cohort> {
    generate_environment(cfg, cfg.spurious_strength, 0)
}

/// Generate patients `id_offset..id_offset + n` from the same generative
/// structure as `cfg`, with the confounder-outcome link set to `spurious`.
pub fn generate_environment(cfg: &GeneratorConfig, spurious: f64, id_offset: u64) -> Result<Cohort> {
    cfg.validate()?;
    if !(-1.0..=1.0).contains(&spurious) {
        return Err(Error::Config("spurious strength must lie in [-1, 1]".into()));
    }
    let structure = GenerativeStructure::new(cfg);
    let records = (0..cfg.n_patients as u64)
        .into_par_iter()
        .map(|i| generate_patient(cfg, &structure, spurious, id_offset + i))
        .collect::<Vec<_>>();
    let mut config = cfg.clone();
    config.spurious_strength = spurious;
    Ok(Cohort { config, records })
}

fn generate_patient(cfg: &GeneratorConfig, st: &GenerativeStructure, spurious: f64, id: u64) -> PatientRecord {
    let mut rng = keyed(cfg.seed, &[keys::COHORT, id]);
    let s: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let genotype: Vec<u8> = st
        .allele_freqs
        .iter()
        .map(|&f| u8::from(rng.random_bool(f)) + u8::from(rng.random_bool(f)))
        .collect();
    let prs = compute_prs(&genotype, &st.betas).expect("genotype and betas share length");
    let rare = cfg.rarity_fraction > 0.0 && rng.random_bool(cfg.rarity_fraction);
    let group = rng.random_range(0..cfg.n_groups);

    let e = &cfg.effects;
    let logit = e.ecg * s[0] + e.mri * s[1] + e.ehr * s[2]
        + e.genomics * st.genomics_signal(prs)
        + if rare { cfg.rare_effect } else { 0.0 };
    let true_risk = sigmoid(logit);
    let outcome = u8::from(rng.random_bool(true_risk));

    let levels = cfg.n_confounder_levels;
    let copy = rng.random_bool(spurious.abs());
    let uniform_level = rng.random_range(0..levels);
    let confounder = if copy {
        let top = levels - 1;
        match (outcome == 1, spurious >= 0.0) {
            (true, true) | (false, false) => top,
            _ => 0,
        }
    } else {
        uniform_level
    };
    let offset = cfg.confounder_strength * confounder_offset(confounder, levels);

    let phi = if cfg.n_groups > 1 {
        cfg.group_heterogeneity * std::f64::consts::PI * group as f64 / (cfg.n_groups - 1) as f64
    } else {
        0.0
    };
    let ehr_dir: Vec<f64> = st.signal_dirs[2]
        .iter()
        .zip(&st.ehr_orth)
        .map(|(u, w)| phi.cos() * u + phi.sin() * w)
        .collect();

    let amp = cfg.signal_amplitude;
    let mut make = |signal: f64, dir: &[f64], conf: &[f64]| -> Vec<f64> {
        dir.iter()
            .zip(conf)
            .map(|(u, v)| {
                let noise: f64 = rng.sample(StandardNormal);
                amp * signal * u + offset * v + cfg.noise_std * noise
            })
            .collect()
    };
    let x_ecg = make(s[0], &st.signal_dirs[0], &st.conf_dirs[0]);
    let mut x_mri = make(s[1], &st.signal_dirs[1], &st.conf_dirs[1]);
    let x_ehr = make(s[2], &ehr_dir, &st.conf_dirs[2]);
    if rare {
        for (x, r) in x_mri.iter_mut().zip(&st.rare_dir) {
            *x += cfg.rare_shift * r;
        }
    }

    PatientRecord {
        id,
        x_ecg,
        x_mri,
        x_ehr,
        genotype,
        prs,
        confounder,
        group,
        site: 0,
        outcome,
        rarity: if rare { 1.0 } else { 0.0 },
        true_risk,
        missing: [false; 4],
    }
}

/// Zero one modality and set its missing flag. Idempotent.
pub fn drop_modality(records: &[PatientRecord], modality: &str) -> Result<Vec<PatientRecord>> {
    let m = Modality::parse(modality)?;
    Ok(records.iter().map(|r| drop_one(r, m)).collect())
}

pub fn drop_one(r: &PatientRecord, m: Modality) -> PatientRecord {
    let mut r = r.clone();
    match m {
        Modality::Ecg => r.x_ecg.iter_mut().for_each(|v| *v = 0.0),
        Modality::Mri => r.x_mri.iter_mut().for_each(|v| *v = 0.0),
        Modality::Ehr => r.x_ehr.iter_mut().for_each(|v| *v = 0.0),
        Modality::Genomics => {
            r.genotype.iter_mut().for_each(|g| *g = 0);
            r.prs = 0.0;
        }
    }
    r.missing[m.index()] = true;
    r
}

/// Assign each record's `site` field from a partition.
pub fn assign_sites(records: &mut [PatientRecord], sites: &[usize]) {
    for (r, &s) in records.iter_mut().zip(sites) {
        r.site = s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig { n_patients: n, seed, ..Default::default() }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small(100, 7)).unwrap();
        let b = generate_cohort(&small(100, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(100, 8)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn prs_matches_additive_formula() {
        let cfg = small(50, 3);
        let cohort = generate_cohort(&cfg).unwrap();
        let st = GenerativeStructure::new(&cfg);
        for r in &cohort.records {
            assert!(r.genotype.iter().all(|&g| g <= 2));
            assert_eq!(r.prs, compute_prs(&r.genotype, &st.betas).unwrap());
        }
    }

    #[test]
    fn prs_examples() {
        assert_eq!(compute_prs(&[0, 0, 0], &[0.3, -1.0, 2.0]).unwrap(), 0.0);
        assert!((compute_prs(&[2, 1], &[0.5, -0.2]).unwrap() - 0.8).abs() < 1e-15);
        let g = [2, 1, 0, 1];
        let b = [0.25, -0.5, 3.0, 0.125];
        let b2: Vec<f64> = b.iter().map(|x| 2.0 * x).collect();
        assert_eq!(compute_prs(&g, &b2).unwrap(), 2.0 * compute_prs(&g, &b).unwrap());
        assert!(matches!(compute_prs(&[1], &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_spurious_strength_decorrelates_confounder() {
        let cfg = GeneratorConfig { spurious_strength: 0.0, ..small(10_000, 11) };
        let c = generate_cohort(&cfg).unwrap();
        let n = c.records.len() as f64;
        let ys: Vec<f64> = c.records.iter().map(|r| r.label()).collect();
        let cs: Vec<f64> = c.records.iter().map(|r| r.confounder as f64).collect();
        let corr = pearson(&ys, &cs);
        assert!(corr.abs() < 3.0 / n.sqrt(), "{corr}");
    }

    #[test]
    fn null_effects_give_balanced_prevalence() {
        let cfg = GeneratorConfig {
            effects: EffectWeights::uniform(0.0),
            confounder_strength: 0.0,
            rare_effect: 0.0,
            ..small(10_000, 5)
        };
        let c = generate_cohort(&cfg).unwrap();
        let n = c.records.len() as f64;
        let prev = c.records.iter().map(|r| r.label()).sum::<f64>() / n;
        assert!((prev - 0.5).abs() < 3.0 / n.sqrt(), "{prev}");
    }

    #[test]
    fn rare_fraction_is_respected() {
        let cfg = GeneratorConfig { rarity_fraction: 0.1, ..small(5000, 2) };
        let c = generate_cohort(&cfg).unwrap();
        let frac = c.records.iter().map(|r| r.rarity).sum::<f64>() / 5000.0;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
        assert!(c.records.iter().all(|r| r.rarity == 0.0 || r.rarity == 1.0));
    }

    #[test]
    fn drop_modality_contract() {
        let c = generate_cohort(&small(20, 1)).unwrap();
        let d = drop_modality(&c.records, "mri").unwrap();
        assert!(d.iter().all(|r| r.x_mri.iter().all(|&v| v == 0.0) && r.is_missing(Modality::Mri)));
        assert_eq!(drop_modality(&d, "mri").unwrap(), d);
        let e = drop_modality(&c.records, "ecg").unwrap();
        for (a, b) in e.iter().zip(&c.records) {
            assert_eq!(a.prs, b.prs);
            assert_eq!(a.x_mri, b.x_mri);
        }
        assert!(matches!(drop_modality(&c.records, "pet"), Err(Error::Config(_))));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }
}
