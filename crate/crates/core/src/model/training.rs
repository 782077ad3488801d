//! The network as a federated objective.

use super::{LossPart, Network, StepContext};
use crate::error::Result;
use crate::fedsim::{DpParts, FederatedObjective};
use crate::objective::{CausalVariant, LossWeights};
use crate::synthcohort::PatientRecord;

#[derive(Clone, Debug)]
pub struct ModelObjective {
    pub net: Network,
    pub weights: LossWeights,
}

impl ModelObjective {
    fn has_batch_terms(&self) -> bool {
        let w = &self.weights;
        w.mi_weight != 0.0 || (w.causal_weight > 0.0 && w.variant != CausalVariant::ProbDiff)
    }

    fn trains_aux(&self) -> bool {
        self.weights.variant == CausalVariant::Vcmi && self.weights.causal_weight > 0.0 && self.net.cfg.aux_steps > 0
    }
}

impl FederatedObjective for ModelObjective {
    type Example = PatientRecord;

    fn dim(&self) -> usize {
        self.net.n_params()
    }

    fn loss_grad(&self, params: &[f64], batch: &[&PatientRecord], ctx: StepContext) -> Result<(f64, Vec<f64>)> {
        let (b, g) = self.net.loss_grad(params, batch, &self.weights, ctx, LossPart::All)?;
        Ok((b.total, g))
    }

    /// Per-example gradients of the task loss plus the L2 term; MI and causal
    /// terms form one batch-level gradient.
    fn dp_parts(&self, params: &[f64], batch: &[&PatientRecord], ctx: StepContext) -> Result<DpParts> {
        let (all, _) = self.net.loss_grad(params, batch, &self.weights, ctx, LossPart::All)?;
        let (_, reg) = self.net.loss_grad(params, batch, &self.weights, ctx, LossPart::Regularizer)?;
        let mut per_example = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (_, mut g) = self.net.loss_grad(params, batch, &self.weights, ctx, LossPart::TaskRow(i))?;
            g.iter_mut().zip(&reg).for_each(|(a, r)| *a += r);
            per_example.push(g);
        }
        let batch_level = if self.has_batch_terms() {
            Some(self.net.loss_grad(params, batch, &self.weights, ctx, LossPart::BatchTerms)?.1)
        } else {
            None
        };
        Ok(DpParts { loss: all.total, per_example, batch_level })
    }

    fn after_step(&self, params: &mut [f64], batch: &[&PatientRecord], _ctx: StepContext) -> Result<()> {
        if self.trains_aux() {
            self.net.train_aux(params, batch)?;
        }
        Ok(())
    }

    /// Chunk-size-weighted mean of the loss and gradient over evaluation
    /// chunks.
    fn trace_loss_grad(&self, params: &[f64], set: &[&PatientRecord]) -> Result<(f64, Vec<f64>)> {
        let n = set.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for chunk in set.chunks(self.net.cfg.eval_chunk) {
            let w = chunk.len() as f64 / n;
            let (b, g) = self.net.loss_grad(params, chunk, &self.weights, StepContext::eval(), LossPart::All)?;
            loss += w * b.total;
            grad.iter_mut().zip(&g).for_each(|(a, x)| *a += w * x);
        }
        Ok((loss, grad))
    }
}
