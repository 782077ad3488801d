//! DP-SGD configuration and a closed-form privacy ledger.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    /// Per-example clip norm; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    /// Keys the Gaussian noise stream independently of the training seed.
    pub noise_seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || self.noise_multiplier.is_infinite() {
            return Err(Error::Config(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// `ε = q √(2 T ln(1/δ)) / σ`.
///
/// This is one concrete instantiation of the `O(q √(T log(1/δ)) / σ)` scaling
/// of the moments accountant, not a proven bound.
pub fn epsilon(q: f64, steps: u64, delta: f64, sigma: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Accounting(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Accounting(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Accounting(format!("epsilon is undefined for noise multiplier {sigma}")));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    Ok(q * (2.0 * steps as f64 * (1.0 / delta).ln()).sqrt() / sigma)
}

/// Cumulative step count and current ε for one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyLedger {
    pub q: f64,
    pub delta: f64,
    pub sigma: f64,
    pub steps: u64,
    pub epsilon: f64,
}

impl PrivacyLedger {
    pub fn new(q: f64, dp: &DpConfig) -> Self {
        Self { q, delta: dp.delta, sigma: dp.noise_multiplier, steps: 0, epsilon: 0.0 }
    }

    /// Add `steps` and recompute ε.
    pub fn account(&mut self, steps: usize) -> Result<f64> {
        let total = self.steps + steps as u64;
        self.epsilon = epsilon(self.q, total, self.delta, self.sigma)?;
        self.steps = total;
        Ok(self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_examples() {
        let e = epsilon(0.01, 10_000, 1e-5, 1.0).unwrap();
        let oracle = 0.01 * (2.0 * 1e4 * 1e5f64.ln()).sqrt();
        assert!((e - oracle).abs() < 1e-12);
        assert!((e - 4.80).abs() < 0.01);
        assert_eq!(epsilon(0.01, 0, 1e-5, 1.0).unwrap(), 0.0);
        let ratio = epsilon(0.2, 2000, 1e-6, 0.7).unwrap() / epsilon(0.2, 1000, 1e-6, 0.7).unwrap();
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(epsilon(0.01, 10, 1e-5, 0.0), Err(Error::Accounting(_))));
    }

    #[test]
    fn ledger_accumulates_steps() {
        let dp = DpConfig { clip_norm: 1.0, noise_multiplier: 1.0, delta: 1e-5, noise_seed: 0 };
        let mut l = PrivacyLedger::new(0.01, &dp);
        l.account(4000).unwrap();
        l.account(6000).unwrap();
        assert_eq!(l.steps, 10_000);
        assert!((l.epsilon - epsilon(0.01, 10_000, 1e-5, 1.0).unwrap()).abs() < 1e-15);
        let mut zero = PrivacyLedger::new(0.01, &DpConfig { noise_multiplier: 0.0, ..dp });
        assert!(matches!(zero.account(1), Err(Error::Accounting(_))));
    }
}
