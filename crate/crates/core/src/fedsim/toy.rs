//! Small closed-form objectives for exercising the round engine.

use super::FederatedObjective;
use crate::error::{Error, Result};
use crate::model::StepContext;
use crate::objective::{sigmoid, softplus};
use crate::rng::keyed;
use rand::Rng;
use rand_distr::StandardNormal;

/// Mean of `½‖θ − c_i‖²` over example centres `c_i`.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticToy {
    pub dim: usize,
}

impl FederatedObjective for QuadraticToy {
    type Example = Vec<f64>;

    fn dim(&self) -> usize {
        self.dim
    }

    fn loss_grad(&self, params: &[f64], batch: &[&Vec<f64>], _ctx: StepContext) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.dim];
        for c in batch {
            if c.len() != self.dim {
                return Err(Error::shape("QuadraticToy", format!("dim {}", self.dim), format!("centre of {}", c.len())));
            }
            for j in 0..self.dim {
                let r = params[j] - c[j];
                loss += 0.5 * r * r / n;
                grad[j] += r / n;
            }
        }
        Ok((loss, grad))
    }
}

/// Mean logistic loss plus `l2/2 ‖w‖²`; examples are `(features, label)`.
/// Callers append a constant feature for an intercept.
#[derive(Clone, Copy, Debug)]
pub struct LogisticToy {
    pub dim: usize,
    pub l2: f64,
}

fn logistic_loss_grad(params: &[f64], batch: &[&(Vec<f64>, f64)], l2: f64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let d = params.len();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for (x, y) in batch {
        if x.len() != d {
            return Err(Error::shape("logistic", format!("dim {d}"), format!("features of {}", x.len())));
        }
        let z: f64 = x.iter().zip(params).map(|(a, b)| a * b).sum();
        loss += (softplus(z) - y * z) / n;
        let r = (sigmoid(z) - y) / n;
        grad.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
    }
    for (g, p) in grad.iter_mut().zip(params) {
        *g += l2 * p;
    }
    loss += 0.5 * l2 * params.iter().map(|p| p * p).sum::<f64>();
    Ok((loss, grad))
}

impl FederatedObjective for LogisticToy {
    type Example = (Vec<f64>, f64);

    fn dim(&self) -> usize {
        self.dim
    }

    fn loss_grad(&self, params: &[f64], batch: &[&(Vec<f64>, f64)], _ctx: StepContext) -> Result<(f64, Vec<f64>)> {
        logistic_loss_grad(params, batch, self.l2)
    }
}

/// Seeded logistic data: standard-normal features (last one fixed to 1),
/// labels drawn from a logistic model with the given true weights.
pub fn logistic_data(n: usize, true_w: &[f64], seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = keyed(seed, &[0x6c6f_6769]);
    let d = true_w.len();
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if d > 0 {
                x[d - 1] = 1.0;
            }
            let z: f64 = x.iter().zip(true_w).map(|(a, b)| a * b).sum();
            let y = if rng.random::<f64>() < sigmoid(z) { 1.0 } else { 0.0 };
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let data = logistic_data(50, &[1.0, -2.0, 0.5], 4);
        let batch: Vec<&(Vec<f64>, f64)> = data.iter().collect();
        let obj = LogisticToy { dim: 3, l2: 0.1 };
        let p = [0.3, -0.2, 0.1];
        let (_, g) = obj.loss_grad(&p, &batch, StepContext::eval()).unwrap();
        let err = finite_diff_check(|q| Ok(obj.loss_grad(q, &batch, StepContext::eval())?.0), &g, &p, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
