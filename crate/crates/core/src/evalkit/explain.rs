//! Exact block Shapley attributions and counterfactual search.

use crate::error::{Error, Result};
use crate::fedsim::l2_norm;
use crate::model::Network;
use crate::synthcohort::{Modality, PatientRecord};
use serde::{Deserialize, Serialize};

/// Largest block count enumerated exactly (`2^12` coalitions).
pub const MAX_SHAPLEY_BLOCKS: usize = 12;

/// Named group of input coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Shapley values from coalition values. `values[mask]` is the value of the
/// coalition whose members are the set bits of `mask`.
pub fn shapley_from_values(n_blocks: usize, values: &[f64]) -> Result<Vec<f64>> {
    if n_blocks > MAX_SHAPLEY_BLOCKS {
        return Err(Error::Scale(format!("{n_blocks} blocks exceed the exact limit of {MAX_SHAPLEY_BLOCKS}; use a sampling estimator")));
    }
    if values.len() != 1 << n_blocks {
        return Err(Error::shape("shapley", format!("{} coalition values", values.len()), format!("2^{n_blocks}")));
    }
    // weight[s] = s! (B - s - 1)! / B!
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let weight: Vec<f64> = (0..n_blocks).map(|s| fact(s) * fact(n_blocks - s - 1) / fact(n_blocks)).collect();
    let mut phi = vec![0.0; n_blocks];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..values.len() {
            if mask & bit == 0 {
                *p += weight[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
            }
        }
    }
    Ok(phi)
}

/// Exact Shapley values of `value` over `n_blocks` players. `value` receives
/// every coalition mask at once so it can batch evaluations.
pub fn exact_shapley<F>(n_blocks: usize, value: F) -> Result<Vec<f64>>
where
    F: FnOnce(&[usize]) -> Result<Vec<f64>>,
{
    if n_blocks > MAX_SHAPLEY_BLOCKS {
        return Err(Error::Scale(format!("{n_blocks} blocks exceed the exact limit of {MAX_SHAPLEY_BLOCKS}; use a sampling estimator")));
    }
    let masks: Vec<usize> = (0..1usize << n_blocks).collect();
    let values = value(&masks)?;
    shapley_from_values(n_blocks, &values)
}

/// Shapley values of a risk function over feature blocks: coalition members
/// take the patient's values, the rest the baseline's.
pub fn feature_shapley<F>(risk: F, x: &[f64], baseline: &[f64], blocks: &[FeatureBlock]) -> Result<Vec<f64>>
where
    F: FnOnce(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    if x.len() != baseline.len() {
        return Err(Error::shape("feature_shapley", format!("{} features", x.len()), format!("baseline of {}", baseline.len())));
    }
    if let Some(b) = blocks.iter().find(|b| b.indices.iter().any(|&i| i >= x.len())) {
        return Err(Error::Input(format!("block '{}' indexes past {} features", b.name, x.len())));
    }
    exact_shapley(blocks.len(), |masks| {
        let inputs: Vec<Vec<f64>> = masks
            .iter()
            .map(|&mask| {
                let mut v = baseline.to_vec();
                for (b, block) in blocks.iter().enumerate() {
                    if mask & (1 << b) != 0 {
                        for &i in &block.indices {
                            v[i] = x[i];
                        }
                    }
                }
                v
            })
            .collect();
        risk(&inputs)
    })
}

/// Blocks over the model input: ECG, MRI and genomics whole, then the first
/// eight EHR covariates individually and any remaining ones together.
pub fn model_feature_blocks(net: &Network) -> Vec<FeatureBlock> {
    let ranges = net.modality_ranges();
    let mut blocks: Vec<FeatureBlock> = [Modality::Ecg, Modality::Mri, Modality::Genomics]
        .iter()
        .map(|&m| FeatureBlock { name: m.name().to_string(), indices: ranges[m.index()].clone().collect() })
        .collect();
    let ehr: Vec<usize> = ranges[Modality::Ehr.index()].clone().collect();
    for (k, &i) in ehr.iter().take(8).enumerate() {
        blocks.push(FeatureBlock { name: format!("ehr_{k}"), indices: vec![i] });
    }
    if ehr.len() > 8 {
        blocks.push(FeatureBlock { name: "ehr_rest".into(), indices: ehr[8..].to_vec() });
    }
    blocks
}

/// Mean absolute Shapley value per block over patients, against the mean
/// input vector of `reference` as baseline.
pub fn mean_abs_shapley(net: &Network, params: &[f64], patients: &[PatientRecord], reference: &[PatientRecord]) -> Result<Vec<(String, f64)>> {
    if reference.is_empty() || patients.is_empty() {
        return Err(Error::Input("Shapley summary needs patients and a reference set".into()));
    }
    let blocks = model_feature_blocks(net);
    let len = net.input_len();
    let mut baseline = vec![0.0; len];
    for r in reference {
        baseline.iter_mut().zip(net.input_vector(r)).for_each(|(b, v)| *b += v / reference.len() as f64);
    }
    let mut total = vec![0.0; blocks.len()];
    for p in patients {
        let phi = feature_shapley(|rows| net.risk_from_inputs(params, rows), &net.input_vector(p), &baseline, &blocks)?;
        total.iter_mut().zip(phi).for_each(|(t, f)| *t += f.abs() / patients.len() as f64);
    }
    Ok(blocks.into_iter().map(|b| b.name).zip(total).collect())
}

/// Which side of the 0.5 risk threshold to reach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSide {
    /// Risk above 0.5 (logit > 0).
    High,
    /// Risk below 0.5 (logit < 0).
    Low,
}

impl TargetSide {
    fn sign(self) -> f64 {
        match self {
            TargetSide::High => 1.0,
            TargetSide::Low => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualConfig {
    pub target: TargetSide,
    /// Logit margin the hinge term pushes past.
    pub margin: f64,
    /// Weight of `‖δ‖²`.
    pub penalty: f64,
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the objective gradient norm falls below this.
    pub tol: f64,
    /// Optional per-coordinate box `[lo, hi]` for the perturbed input.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self { target: TargetSide::Low, margin: 0.1, penalty: 0.01, step: 0.05, max_iters: 2000, tol: 1e-8, bounds: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    /// Smallest-norm target-side perturbation found, or the final iterate
    /// when none reached the target side.
    pub perturbation: Vec<f64>,
    pub point: Vec<f64>,
    /// Perturbation at the last iterate.
    pub final_perturbation: Vec<f64>,
    /// `(margin − s·logit)₊²` at the last iterate.
    pub final_residual: f64,
    /// Full objective at the last iterate.
    pub final_objective: f64,
    pub iterations: usize,
    /// False when no iterate reached the target side.
    pub converged: bool,
}

/// Projected gradient descent on `(margin − s·logit(x+δ))₊² + penalty‖δ‖²`.
/// `logit_grad` returns the logit and its input gradient.
pub fn counterfactual_search<F>(mut logit_grad: F, x: &[f64], cfg: &CounterfactualConfig) -> Result<CounterfactualResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(cfg.step > 0.0 && cfg.penalty >= 0.0) {
        return Err(Error::Config("counterfactual step must be > 0 and penalty >= 0".into()));
    }
    if let Some(b) = &cfg.bounds {
        if b.len() != x.len() {
            return Err(Error::shape("counterfactual bounds", format!("{} features", x.len()), format!("{} bounds", b.len())));
        }
    }
    let s = cfg.target.sign();
    let d = x.len();
    let (logit0, _) = logit_grad(x)?;
    if s * logit0 > 0.0 {
        let zero = vec![0.0; d];
        return Ok(CounterfactualResult {
            perturbation: zero.clone(),
            point: x.to_vec(),
            final_perturbation: zero,
            final_residual: 0.0,
            final_objective: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let project = |p: &mut [f64]| {
        if let Some(b) = &cfg.bounds {
            for (v, (lo, hi)) in p.iter_mut().zip(b) {
                *v = v.clamp(*lo, *hi);
            }
        }
    };
    let mut point = x.to_vec();
    project(&mut point);
    let mut best: Option<Vec<f64>> = None;
    let mut iterations = 0;
    let (mut residual, mut objective);
    loop {
        let (logit, g) = logit_grad(&point)?;
        let delta: Vec<f64> = point.iter().zip(x).map(|(p, x)| p - x).collect();
        let hinge = (cfg.margin - s * logit).max(0.0);
        residual = hinge * hinge;
        objective = residual + cfg.penalty * delta.iter().map(|v| v * v).sum::<f64>();
        if s * logit > 0.0 && best.as_ref().is_none_or(|b| l2_norm(&delta) < l2_norm(b)) {
            best = Some(delta.clone());
        }
        let grad: Vec<f64> = g.iter().zip(&delta).map(|(gi, di)| -2.0 * hinge * s * gi + 2.0 * cfg.penalty * di).collect();
        if iterations == cfg.max_iters || l2_norm(&grad) < cfg.tol {
            break;
        }
        point.iter_mut().zip(&grad).for_each(|(p, gi)| *p -= cfg.step * gi);
        project(&mut point);
        iterations += 1;
    }
    let final_perturbation: Vec<f64> = point.iter().zip(x).map(|(p, x)| p - x).collect();
    let converged = best.is_some();
    let perturbation = best.unwrap_or_else(|| final_perturbation.clone());
    Ok(CounterfactualResult {
        point: x.iter().zip(&perturbation).map(|(a, b)| a + b).collect(),
        perturbation,
        final_perturbation,
        final_residual: residual,
        final_objective: objective,
        iterations,
        converged,
    })
}

/// Counterfactual for one patient under the network's single-patient risk.
pub fn model_counterfactual(net: &Network, params: &[f64], patient: &PatientRecord, cfg: &CounterfactualConfig) -> Result<CounterfactualResult> {
    counterfactual_search(|x| net.logit_input_grad(params, x), &net.input_vector(patient), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn and_game_splits_evenly() {
        let phi = shapley_from_values(2, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(phi, vec![0.5, 0.5]);
    }

    #[test]
    fn additive_model_recovers_terms() {
        let w = [0.5, -2.0, 3.0];
        let x = [1.0, 2.0, -1.0];
        let blocks: Vec<FeatureBlock> = (0..3).map(|i| FeatureBlock { name: format!("b{i}"), indices: vec![i] }).collect();
        let f = |rows: &[Vec<f64>]| Ok(rows.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect());
        let phi = feature_shapley(f, &x, &[0.0; 3], &blocks).unwrap();
        for i in 0..3 {
            assert!((phi[i] - w[i] * x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_blocks_is_a_scale_error() {
        assert!(matches!(exact_shapley(13, |_| Ok(vec![])), Err(Error::Scale(_))));
    }

    #[test]
    fn already_on_target_side_is_a_no_op() {
        let cfg = CounterfactualConfig { target: TargetSide::High, ..Default::default() };
        let r = counterfactual_search(|x| Ok((x[0], vec![1.0])), &[0.5], &cfg).unwrap();
        assert_eq!(r.perturbation, vec![0.0]);
        assert!(r.converged);
    }

    #[test]
    fn box_constraint_is_respected() {
        let cfg = CounterfactualConfig { target: TargetSide::High, bounds: Some(vec![(-1.0, 0.2)]), max_iters: 200, ..Default::default() };
        let r = counterfactual_search(|x| Ok((x[0] - 1.0, vec![1.0])), &[0.0], &cfg).unwrap();
        assert!(!r.converged);
        assert!(r.final_perturbation[0] <= 0.2 + 1e-15);
    }
}
