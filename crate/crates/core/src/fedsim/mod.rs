//! Federated round engine: local updates, FedAvg aggregation, DP-SGD and
//! convergence diagnostics.
//!
//! Rounds are synchronous. Participating clients train in parallel, each with
//! its own keyed random streams, and the server aggregates in ascending
//! client-id order, so results never depend on worker count or completion
//! order.

mod privacy;
pub mod toy;

pub use privacy::{epsilon, DpConfig, PrivacyLedger};

use crate::error::{Error, Result};
use crate::model::StepContext;
use crate::rng::{derive_seed, keyed, keys};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;

/// Gradient pieces needed by DP-SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct DpParts {
    pub loss: f64,
    /// One gradient per example, each clipped separately.
    pub per_example: Vec<Vec<f64>>,
    /// Gradient of batch-statistic terms, clipped as a whole.
    pub batch_level: Option<Vec<f64>>,
}

/// A differentiable objective over examples of one type.
pub trait FederatedObjective: Sync {
    type Example: Sync;

    fn dim(&self) -> usize;

    /// Mean loss over the batch and its gradient.
    fn loss_grad(&self, params: &[f64], batch: &[&Self::Example], ctx: StepContext) -> Result<(f64, Vec<f64>)>;

    /// Per-example decomposition; by default each example is evaluated alone.
    fn dp_parts(&self, params: &[f64], batch: &[&Self::Example], ctx: StepContext) -> Result<DpParts> {
        let mut loss = 0.0;
        let mut per_example = Vec::with_capacity(batch.len());
        for ex in batch {
            let (l, g) = self.loss_grad(params, std::slice::from_ref(ex), ctx)?;
            loss += l;
            per_example.push(g);
        }
        Ok(DpParts { loss: loss / batch.len() as f64, per_example, batch_level: None })
    }

    /// Hook run after every local gradient step.
    fn after_step(&self, _params: &mut [f64], _batch: &[&Self::Example], _ctx: StepContext) -> Result<()> {
        Ok(())
    }

    /// Loss and gradient on a diagnostic set in evaluation mode.
    fn trace_loss_grad(&self, params: &[f64], set: &[&Self::Example]) -> Result<(f64, Vec<f64>)> {
        self.loss_grad(params, set, StepContext::eval())
    }
}

#[derive(Clone, Debug)]
pub struct ClientState<E> {
    pub id: usize,
    pub data: Vec<E>,
    /// Keys this client's shuffle and dropout streams; defaults to the id.
    pub stream: u64,
}

impl<E> ClientState<E> {
    pub fn new(id: usize, data: Vec<E>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input(format!("client {id} has no data")));
        }
        Ok(Self { id, data, stream: id as u64 })
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub lr: f64,
    pub participation: f64,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { rounds: 10, local_epochs: 20, batch_size: 32, lr: 0.05, participation: 1.0, seed: 0 }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!("participation must lie in (0, 1], got {}", self.participation)));
        }
        Ok(())
    }
}

/// Diagnostics of one completed round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub failed: Vec<(usize, String)>,
    /// Loss on the trace set, when one is given.
    pub loss: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    pub drift: f64,
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub params: Vec<f64>,
    pub round: usize,
    pub n_total: usize,
    pub grad_norm_trace: Vec<f64>,
    pub drift_trace: Vec<f64>,
    pub log: Vec<RoundRecord>,
    pub ledgers: BTreeMap<usize, PrivacyLedger>,
}

impl ServerState {
    pub fn new<E>(params: Vec<f64>, clients: &[ClientState<E>]) -> Result<Self> {
        let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate client ids".into()));
        }
        Ok(Self {
            params,
            round: 0,
            n_total: clients.iter().map(ClientState::n).sum(),
            grad_norm_trace: Vec::new(),
            drift_trace: Vec::new(),
            log: Vec::new(),
            ledgers: BTreeMap::new(),
        })
    }

    /// Largest ε over client ledgers.
    pub fn epsilon(&self) -> Option<f64> {
        self.ledgers.values().map(|l| l.epsilon).fold(None, |acc, e| Some(acc.map_or(e, |a: f64| a.max(e))))
    }

    /// Tab-separated round log with a header line.
    pub fn write_round_log(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "round\tloss\tgrad_norm_sq\tdrift\tepsilon\tparticipants\tfailed")?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        for r in &self.log {
            let ids: Vec<String> = r.participants.iter().map(usize::to_string).collect();
            let failed: Vec<String> = r.failed.iter().map(|(id, _)| id.to_string()).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.round,
                opt(r.loss),
                opt(r.grad_norm_sq),
                r.drift,
                opt(r.epsilon),
                ids.join(","),
                if failed.is_empty() { "-".to_string() } else { failed.join(",") }
            )?;
        }
        Ok(())
    }
}

/// Result of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub params: Vec<f64>,
    pub steps: usize,
    pub last_loss: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale `g` in place so its norm is at most `clip`.
pub fn clip_in_place(g: &mut [f64], clip: f64) {
    let norm = l2_norm(g);
    if clip.is_finite() && norm > clip {
        let s = clip / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// DP-SGD gradient: clipped per-example sum plus noise of std `σS`, divided by
/// the batch size, plus the batch-level gradient clipped to `S`.
pub fn dp_gradient(parts: DpParts, dp: &DpConfig, noise_seed: u64) -> Result<Vec<f64>> {
    let b = parts.per_example.len();
    if b == 0 {
        return Err(Error::Input("DP step on an empty batch".into()));
    }
    let dim = parts.per_example[0].len();
    let mut sum = vec![0.0; dim];
    for mut g in parts.per_example {
        clip_in_place(&mut g, dp.clip_norm);
        sum.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
    }
    if dp.noise_multiplier > 0.0 {
        let std = dp.noise_multiplier * dp.clip_norm;
        if !std.is_finite() {
            return Err(Error::Config("noise std sigma * clip_norm must be finite".into()));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
        let mut rng = keyed(noise_seed, &[keys::DP_NOISE]);
        sum.iter_mut().for_each(|s| *s += normal.sample(&mut rng));
    }
    let mut out: Vec<f64> = sum.into_iter().map(|s| s / b as f64).collect();
    if let Some(mut g) = parts.batch_level {
        clip_in_place(&mut g, dp.clip_norm);
        out.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
    }
    Ok(out)
}

/// `E` epochs of minibatch gradient steps on one client, starting from
/// `global`.
pub fn local_update<O: FederatedObjective>(obj: &O, client: &ClientState<O::Example>, global: &[f64], cfg: &RoundConfig, round: usize, dp: Option<&DpConfig>) -> Result<LocalResult> {
    if global.len() != obj.dim() {
        return Err(Error::shape("local_update", format!("{} params", global.len()), format!("objective dim {}", obj.dim())));
    }
    let mut params = global.to_vec();
    let n = client.n();
    let bs = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    let mut last_loss = f64::NAN;
    let (r, c) = (round as u64, client.stream);
    for epoch in 0..cfg.local_epochs {
        if bs < n {
            order.sort_unstable();
            order.shuffle(&mut keyed(cfg.seed, &[keys::SHUFFLE, r, c, epoch as u64]));
        }
        for chunk in order.chunks(bs) {
            let batch: Vec<&O::Example> = chunk.iter().map(|&i| &client.data[i]).collect();
            let ctx = StepContext { seed: derive_seed(cfg.seed, &[keys::DROPOUT, r, c, steps as u64]), train: true };
            let (loss, grad) = match dp {
                None => obj.loss_grad(&params, &batch, ctx)?,
                Some(dp) => {
                    let parts = obj.dp_parts(&params, &batch, ctx)?;
                    let loss = parts.loss;
                    let seed = derive_seed(dp.noise_seed, &[r, c, steps as u64]);
                    (loss, dp_gradient(parts, dp, seed)?)
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("client {} round {round} epoch {epoch} step {steps}: non-finite loss {loss}", client.id)));
            }
            if cfg.lr != 0.0 {
                params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.lr * g);
            }
            obj.after_step(&mut params, &batch, ctx)?;
            last_loss = loss;
            steps += 1;
        }
    }
    Ok(LocalResult { params, steps, last_loss })
}

/// Sample-size-weighted mean of `(client id, n_k, θ_k)` updates, summed in
/// ascending client-id order and clamped to the per-coordinate hull.
pub fn fedavg_aggregate(updates: &[(usize, usize, &[f64])]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Round("no client updates to aggregate".into()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].0);
    let dim = updates[0].2.len();
    if let Some(bad) = updates.iter().find(|u| u.2.len() != dim) {
        return Err(Error::shape("fedavg_aggregate", format!("{dim} params"), format!("client {} has {}", bad.0, bad.2.len())));
    }
    let total: usize = updates.iter().map(|u| u.1).sum();
    if total == 0 {
        return Err(Error::Round("aggregate sample count is zero".into()));
    }
    let mut out = vec![0.0; dim];
    for &i in &order {
        let (_, n, theta) = updates[i];
        let w = n as f64 / total as f64;
        out.iter_mut().zip(theta).for_each(|(o, t)| *o += w * t);
    }
    for (j, o) in out.iter_mut().enumerate() {
        let (lo, hi) = updates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u.2[j]), hi.max(u.2[j])));
        *o = o.clamp(lo, hi);
    }
    Ok(out)
}

/// Mean squared distance of client updates from the new global parameters.
pub fn client_drift(updates: &[&[f64]], global: &[f64]) -> f64 {
    if updates.is_empty() {
        return 0.0;
    }
    let total: f64 = updates
        .iter()
        .map(|u| u.iter().zip(global).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    total / updates.len() as f64
}

/// Participating client indices (into `clients`) for a round, sorted by id.
pub fn select_participants(ids: &[usize], participation: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = ids.len();
    let m = ((participation * k as f64).ceil() as usize).clamp(1, k.max(1));
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by_key(|&i| ids[i]);
    if m < k {
        idx.shuffle(&mut keyed(seed, &[keys::SAMPLING, round as u64]));
        idx.truncate(m);
        idx.sort_by_key(|&i| ids[i]);
    }
    idx
}

/// Full-batch squared gradient norm and loss on a diagnostic set.
pub fn grad_norm_sq<O: FederatedObjective>(obj: &O, params: &[f64], set: &[&O::Example]) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Input("empty gradient-trace set".into()));
    }
    let (loss, g) = obj.trace_loss_grad(params, set)?;
    Ok((loss, g.iter().map(|x| x * x).sum()))
}

/// One synchronous round: select, train locally in parallel, aggregate,
/// account privacy and append diagnostics.
pub fn run_round<O: FederatedObjective>(obj: &O, server: &mut ServerState, clients: &[ClientState<O::Example>], cfg: &RoundConfig, dp: Option<&DpConfig>, trace_set: Option<&[&O::Example]>) -> Result<RoundRecord>
where
    O::Example: Send,
{
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Round("no clients registered".into()));
    }
    if let Some(dp) = dp {
        dp.validate()?;
    }
    let ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    let selected = select_participants(&ids, cfg.participation, cfg.seed, server.round);
    let results: Vec<Result<LocalResult>> = selected
        .par_iter()
        .map(|&i| local_update(obj, &clients[i], &server.params, cfg, server.round, dp))
        .collect();
    let mut survivors = Vec::new();
    let mut failed = Vec::new();
    for (&i, res) in selected.iter().zip(results) {
        match res {
            Ok(r) => survivors.push((i, r)),
            Err(e) => failed.push((clients[i].id, e.to_string())),
        }
    }
    if survivors.is_empty() {
        let why: Vec<String> = failed.iter().map(|(id, e)| format!("client {id}: {e}")).collect();
        return Err(Error::Round(format!("every participating client failed in round {}: {}", server.round, why.join("; "))));
    }
    let updates: Vec<(usize, usize, &[f64])> = survivors.iter().map(|(i, r)| (clients[*i].id, clients[*i].n(), r.params.as_slice())).collect();
    let next = fedavg_aggregate(&updates)?;
    let drift = client_drift(&updates.iter().map(|u| u.2).collect::<Vec<_>>(), &next);

    if let Some(dp) = dp {
        for (i, r) in &survivors {
            let c = &clients[*i];
            let bs = if cfg.batch_size == 0 { c.n() } else { cfg.batch_size.min(c.n()) };
            let q = bs as f64 / c.n() as f64;
            let ledger = server.ledgers.entry(c.id).or_insert_with(|| PrivacyLedger::new(q, dp));
            ledger.q = ledger.q.max(q);
            ledger.account(r.steps)?;
        }
    }
    server.params = next;
    server.round += 1;
    server.drift_trace.push(drift);
    let (loss, gn) = match trace_set {
        Some(set) => {
            let (l, g) = grad_norm_sq(obj, &server.params, set)?;
            server.grad_norm_trace.push(g);
            (Some(l), Some(g))
        }
        None => (None, None),
    };
    let record = RoundRecord {
        round: server.round,
        participants: survivors.iter().map(|(i, _)| clients[*i].id).collect(),
        failed,
        loss,
        grad_norm_sq: gn,
        drift,
        epsilon: if dp.is_some() { server.epsilon() } else { None },
    };
    server.log.push(record.clone());
    Ok(record)
}

/// Run `cfg.rounds` rounds from `init`.
pub fn train<O: FederatedObjective>(obj: &O, init: Vec<f64>, clients: &[ClientState<O::Example>], cfg: &RoundConfig, dp: Option<&DpConfig>, trace_set: Option<&[&O::Example]>) -> Result<ServerState>
where
    O::Example: Send,
{
    let mut server = ServerState::new(init, clients)?;
    for _ in 0..cfg.rounds {
        run_round(obj, &mut server, clients, cfg, dp, trace_set)?;
    }
    Ok(server)
}

/// Running minimum of a trace.
pub fn running_min(trace: &[f64]) -> Vec<f64> {
    trace
        .iter()
        .scan(f64::INFINITY, |m, &v| {
            *m = m.min(v);
            Some(*m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::toy::{LogisticToy, QuadraticToy};
    use super::*;

    fn quad_client(id: usize, centres: &[f64]) -> ClientState<Vec<f64>> {
        ClientState::new(id, centres.iter().map(|&c| vec![c]).collect()).unwrap()
    }

    fn one_step() -> RoundConfig {
        RoundConfig { rounds: 1, local_epochs: 1, batch_size: 0, lr: 0.5, participation: 1.0, seed: 3 }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let obj = QuadraticToy { dim: 1 };
        let c = quad_client(0, &[2.0, -1.0]);
        let cfg = RoundConfig { lr: 0.0, ..one_step() };
        assert_eq!(local_update(&obj, &c, &[0.7], &cfg, 0, None).unwrap().params, vec![0.7]);
    }

    #[test]
    fn quadratic_hand_step() {
        let obj = QuadraticToy { dim: 1 };
        let c = quad_client(0, &[2.0]);
        assert_eq!(local_update(&obj, &c, &[0.0], &one_step(), 0, None).unwrap().params, vec![1.0]);
    }

    #[test]
    fn dp_without_noise_or_clipping_matches_plain_update() {
        let obj = QuadraticToy { dim: 2 };
        let c = ClientState::new(0, vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.25, 4.0]]).unwrap();
        let cfg = RoundConfig { local_epochs: 3, batch_size: 2, lr: 0.3, ..one_step() };
        let dp = DpConfig { clip_norm: f64::INFINITY, noise_multiplier: 0.0, delta: 1e-5, noise_seed: 1 };
        let a = local_update(&obj, &c, &[0.1, 0.2], &cfg, 0, None).unwrap().params;
        let b = local_update(&obj, &c, &[0.1, 0.2], &cfg, 0, Some(&dp)).unwrap().params;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_noise_seed_controls_reproducibility() {
        let obj = QuadraticToy { dim: 2 };
        let c = ClientState::new(0, vec![vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let cfg = one_step();
        let dp = DpConfig { clip_norm: 1.0, noise_multiplier: 1.0, delta: 1e-5, noise_seed: 1 };
        let a = local_update(&obj, &c, &[0.0, 0.0], &cfg, 0, Some(&dp)).unwrap().params;
        let b = local_update(&obj, &c, &[0.0, 0.0], &cfg, 0, Some(&dp)).unwrap().params;
        let other = DpConfig { noise_seed: 2, ..dp };
        let d = local_update(&obj, &c, &[0.0, 0.0], &cfg, 0, Some(&other)).unwrap().params;
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        clip_in_place(&mut g, 1.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![0.3, 0.4];
        clip_in_place(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn fedavg_examples() {
        let a = [0.25, -1.5];
        assert_eq!(fedavg_aggregate(&[(4, 10, &a)]).unwrap(), a.to_vec());
        assert_eq!(fedavg_aggregate(&[(0, 5, &[1.0]), (1, 5, &[3.0])]).unwrap(), vec![2.0]);
        assert_eq!(fedavg_aggregate(&[(0, 1, &[0.0]), (1, 3, &[4.0])]).unwrap(), vec![3.0]);
        assert!(matches!(fedavg_aggregate(&[]), Err(Error::Round(_))));
        let same = [0.1, 0.7, -0.3];
        assert_eq!(fedavg_aggregate(&[(0, 3, &same), (1, 7, &same), (2, 11, &same)]).unwrap(), same.to_vec());
    }

    #[test]
    fn fedavg_ignores_completion_order() {
        let u: Vec<(usize, usize, Vec<f64>)> = (0..5).map(|k| (k, k + 1, vec![0.1 * k as f64, 1.0 / (k + 1) as f64])).collect();
        let fwd: Vec<(usize, usize, &[f64])> = u.iter().map(|(a, b, c)| (*a, *b, c.as_slice())).collect();
        let rev: Vec<(usize, usize, &[f64])> = fwd.iter().rev().copied().collect();
        assert_eq!(fedavg_aggregate(&fwd).unwrap(), fedavg_aggregate(&rev).unwrap());
    }

    #[test]
    fn single_client_round_returns_its_update() {
        let obj = QuadraticToy { dim: 1 };
        let clients = vec![quad_client(0, &[2.0, 4.0])];
        let cfg = RoundConfig { local_epochs: 2, ..one_step() };
        let local = local_update(&obj, &clients[0], &[0.0], &cfg, 0, None).unwrap();
        let mut server = ServerState::new(vec![0.0], &clients).unwrap();
        let rec = run_round(&obj, &mut server, &clients, &cfg, None, None).unwrap();
        assert_eq!(server.params, local.params);
        assert_eq!(rec.drift, 0.0);
        assert_eq!(server.round, 1);
    }

    #[test]
    fn identical_clients_have_zero_drift() {
        let obj = QuadraticToy { dim: 1 };
        let clients = vec![quad_client(0, &[1.0, 3.0]), quad_client(1, &[1.0, 3.0]).with_stream(0)];
        let cfg = RoundConfig { local_epochs: 3, batch_size: 1, ..one_step() };
        let mut server = ServerState::new(vec![0.0], &clients).unwrap();
        let rec = run_round(&obj, &mut server, &clients, &cfg, None, None).unwrap();
        assert!(rec.drift.abs() < 1e-12);
    }

    #[test]
    fn trace_is_zero_at_stationary_point_and_one_entry_per_round() {
        let obj = QuadraticToy { dim: 2 };
        let clients = vec![ClientState::new(0, vec![vec![1.0, -1.0], vec![3.0, 1.0]]).unwrap()];
        let set: Vec<&Vec<f64>> = clients[0].data.iter().collect();
        let (_, g) = grad_norm_sq(&obj, &[2.0, 0.0], &set).unwrap();
        assert_eq!(g, 0.0);
        let cfg = RoundConfig { rounds: 4, ..one_step() };
        let server = train(&obj, vec![0.0, 0.0], &clients, &cfg, None, Some(&set)).unwrap();
        assert_eq!(server.grad_norm_trace.len(), 4);
        assert_eq!(server.log.len(), 4);
    }

    #[test]
    fn failed_clients_are_dropped_and_logged() {
        let obj = LogisticToy { dim: 1, l2: 0.0 };
        let good = ClientState::new(0, vec![(vec![1.0], 1.0), (vec![-1.0], 0.0)]).unwrap();
        let bad = ClientState::new(1, vec![(vec![f64::NAN], 1.0)]).unwrap();
        let clients = vec![good.clone(), bad];
        let cfg = one_step();
        let mut server = ServerState::new(vec![0.0], &clients).unwrap();
        let rec = run_round(&obj, &mut server, &clients, &cfg, None, None).unwrap();
        assert_eq!(rec.participants, vec![0]);
        assert_eq!(rec.failed.len(), 1);
        let solo = local_update(&obj, &good, &[0.0], &cfg, 0, None).unwrap().params;
        assert_eq!(server.params, solo);
        let only_bad = vec![clients[1].clone()];
        let mut s2 = ServerState::new(vec![0.0], &only_bad).unwrap();
        assert!(matches!(run_round(&obj, &mut s2, &only_bad, &cfg, None, None), Err(Error::Round(_))));
    }

    #[test]
    fn participation_selects_ceiling_fraction_deterministically() {
        let ids: Vec<usize> = (0..7).collect();
        let a = select_participants(&ids, 0.3, 9, 2);
        assert_eq!(a.len(), 3);
        assert_eq!(a, select_participants(&ids, 0.3, 9, 2));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_participants(&ids, 1.0, 9, 2), ids);
    }

    #[test]
    fn round_log_has_header_and_one_line_per_round() {
        let obj = QuadraticToy { dim: 1 };
        let clients = vec![quad_client(0, &[1.0]), quad_client(1, &[2.0])];
        let set: Vec<&Vec<f64>> = clients.iter().flat_map(|c| c.data.iter()).collect();
        let server = train(&obj, vec![0.0], &clients, &RoundConfig { rounds: 3, ..one_step() }, None, Some(&set)).unwrap();
        let mut buf = Vec::new();
        server.write_round_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("round\tloss"));
    }

    #[test]
    fn running_min_is_nonincreasing() {
        assert_eq!(running_min(&[3.0, 4.0, 1.0, 2.0]), vec![3.0, 3.0, 1.0, 1.0]);
    }
}
