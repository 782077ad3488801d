//! The full network: fusion, graph attention, prediction head and the
//! auxiliary confounder heads, all stored in one flat parameter vector.
//!
//! Graph attention runs over a k-nearest-neighbour graph built inside each
//! batch. Evaluation processes records in fixed-order chunks, each with its
//! own graph; single-patient queries use a self-loop graph.

mod layout;
mod training;

pub use layout::{read_checkpoint, write_checkpoint, ParamBlock, ParamLayout};
pub use training::ModelObjective;

use crate::error::{Error, Result};
use crate::gat::{gat_layer_tape, GatLayerParams, DEFAULT_SLOPE};
use crate::numerics::{GradTape, Gradients, Tensor2, Var};
use crate::objective::{self, CausalVariant, LossBreakdown, LossWeights};
use crate::rng::{keyed, keys};
use crate::synthcohort::{build_similarity_graph, GeneratorConfig, GraphFeatureWeights, Modality, PatientGraph, PatientRecord};
use crate::xmt::{fuse_tape, ModalityInput, Presence, XmtParams};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub gat_dim: usize,
    pub hidden: usize,
    /// Dropout rate in the prediction head during training.
    pub dropout: f64,
    pub slope: f64,
    pub rare_boost: f64,
    pub genotype_proj_dim: usize,
    pub aux_hidden: usize,
    /// Auxiliary-head steps per main step.
    pub aux_steps: usize,
    pub aux_lr: f64,
    pub k_neighbors: usize,
    pub graph_weights: GraphFeatureWeights,
    /// Records per evaluation chunk.
    pub eval_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            heads: 2,
            gat_layers: 1,
            gat_dim: 8,
            hidden: 16,
            dropout: 0.1,
            slope: DEFAULT_SLOPE,
            rare_boost: 0.5,
            genotype_proj_dim: 7,
            aux_hidden: 8,
            aux_steps: 5,
            aux_lr: 0.1,
            k_neighbors: 5,
            graph_weights: GraphFeatureWeights::default(),
            eval_chunk: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("latent_dim {} must be a positive multiple of heads {}", self.latent_dim, self.heads)));
        }
        if self.gat_layers > 2 {
            return Err(Error::Config("at most 2 graph attention layers are supported".into()));
        }
        if self.gat_layers > 0 && self.gat_dim == 0 {
            return Err(Error::Config("gat_dim must be >= 1".into()));
        }
        if self.hidden == 0 || self.aux_hidden == 0 || self.eval_chunk == 0 {
            return Err(Error::Config("hidden, aux_hidden and eval_chunk must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config("slope must lie in (0, 1)".into()));
        }
        if !(self.rare_boost >= 0.0) || !self.aux_lr.is_finite() || self.aux_lr < 0.0 {
            return Err(Error::Config("rare_boost and aux_lr must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

/// `q(C | Z, Y)` (two-layer) and `q(C | Y)` (linear) classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryHeads {
    pub zy_w1: Tensor2,
    pub zy_b1: Tensor2,
    pub zy_w2: Tensor2,
    pub zy_b2: Tensor2,
    pub y_w: Tensor2,
    pub y_b: Tensor2,
}

impl AuxiliaryHeads {
    fn tensors(&self) -> Vec<(String, &Tensor2)> {
        vec![
            ("aux.zy_w1".into(), &self.zy_w1),
            ("aux.zy_b1".into(), &self.zy_b1),
            ("aux.zy_w2".into(), &self.zy_w2),
            ("aux.zy_b2".into(), &self.zy_b2),
            ("aux.y_w".into(), &self.y_w),
            ("aux.y_b".into(), &self.y_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.zy_w1, &mut self.zy_b1, &mut self.zy_w2, &mut self.zy_b2, &mut self.y_w, &mut self.y_b]
    }
}

/// Structured view of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub xmt: XmtParams,
    pub gat: Vec<GatLayerParams>,
    pub head: HeadParams,
    pub aux: AuxiliaryHeads,
}

impl ModelParams {
    fn main_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = self.xmt.tensors();
        for (l, g) in self.gat.iter().enumerate() {
            out.push((format!("gat.{l}.w"), &g.w));
            out.push((format!("gat.{l}.a"), &g.a));
            out.push((format!("gat.{l}.b"), &g.b));
        }
        out.push(("head.w1".into(), &self.head.w1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.w2".into(), &self.head.w2));
        out.push(("head.b2".into(), &self.head.b2));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = self.xmt.tensors_mut();
        for g in self.gat.iter_mut() {
            out.push(&mut g.w);
            out.push(&mut g.a);
            out.push(&mut g.b);
        }
        out.push(&mut self.head.w1);
        out.push(&mut self.head.b1);
        out.push(&mut self.head.w2);
        out.push(&mut self.head.b2);
        out.extend(self.aux.tensors_mut());
        out
    }
}

/// Which part of the combined loss to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPart {
    /// Task, MI and causal terms plus L2.
    All,
    /// The task loss of one batch row (not averaged).
    TaskRow(usize),
    /// MI and causal terms only.
    BatchTerms,
    /// L2 only.
    Regularizer,
}

/// Randomness and mode for one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub train: bool,
}

impl StepContext {
    pub fn eval() -> Self {
        Self { seed: 0, train: false }
    }
}

#[derive(Clone, Debug)]
enum PresencePlan {
    All,
    Absent,
    Rows(Vec<f64>),
}

/// Featurised batch.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    x: [Tensor2; 4],
    presence: [PresencePlan; 4],
    pub labels: Vec<f64>,
    pub confounder: Vec<usize>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Forward {
    logits: Var,
    z: Var,
    latents: [Option<Var>; 4],
    main_vars: Vec<Var>,
}

/// How the graph over a batch is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    Knn,
    SelfLoops,
}

/// Network definition: configuration, input featurisation and layout.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    input_dims: [usize; 4],
    n_snps: usize,
    n_levels: usize,
    /// `n_snps x genotype_proj_dim` fixed genotype projection.
    projection: Tensor2,
    template: ModelParams,
    layout: ParamLayout,
}

fn onehot(labels: &[f64]) -> Tensor2 {
    let mut data = vec![0.0; labels.len() * 2];
    for (i, &y) in labels.iter().enumerate() {
        data[i * 2 + usize::from(y > 0.5)] = 1.0;
    }
    Tensor2::from_raw(labels.len(), 2, data)
}

impl Network {
    /// `seed` fixes the genotype projection.
    pub fn new(cfg: ModelConfig, gen: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let input_dims = [gen.d_ecg, gen.d_mri, 1 + cfg.genotype_proj_dim, gen.d_ehr];
        let mut rng = keyed(seed, &[keys::PROJECTION]);
        let scale = 1.0 / (gen.n_snps as f64).sqrt();
        let proj: Vec<f64> = (0..gen.n_snps * cfg.genotype_proj_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let projection = Tensor2::new(gen.n_snps, cfg.genotype_proj_dim, proj)?;
        let mut xmt = XmtParams::zeros(input_dims, d, cfg.heads)?;
        xmt.ln_gain = Tensor2::filled(1, d, 1.0);
        let mut gat = Vec::new();
        let mut width = d;
        for _ in 0..cfg.gat_layers {
            let mut g = GatLayerParams::zeros(width, cfg.gat_dim);
            g.slope = cfg.slope;
            g.rare_boost = cfg.rare_boost;
            gat.push(g);
            width = cfg.gat_dim;
        }
        let head_in = d + if cfg.gat_layers > 0 { cfg.gat_dim } else { 0 };
        let c = gen.n_confounder_levels;
        let template = ModelParams {
            xmt,
            gat,
            head: HeadParams {
                w1: Tensor2::zeros(head_in, cfg.hidden),
                b1: Tensor2::zeros(1, cfg.hidden),
                w2: Tensor2::zeros(cfg.hidden, 1),
                b2: Tensor2::zeros(1, 1),
            },
            aux: AuxiliaryHeads {
                zy_w1: Tensor2::zeros(d + 2, cfg.aux_hidden),
                zy_b1: Tensor2::zeros(1, cfg.aux_hidden),
                zy_w2: Tensor2::zeros(cfg.aux_hidden, c),
                zy_b2: Tensor2::zeros(1, c),
                y_w: Tensor2::zeros(2, c),
                y_b: Tensor2::zeros(1, c),
            },
        };
        let layout = ParamLayout::from_tensors(&template.main_tensors(), &template.aux.tensors());
        Ok(Self { cfg, input_dims, n_snps: gen.n_snps, n_levels: c, projection, template, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.total_len
    }

    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }

    /// Seeded initial parameters: scaled normal weights, zero biases, unit
    /// layer-norm gain.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = keyed(seed, &[keys::INIT]);
        let mut out = vec![0.0; self.layout.total_len];
        for b in &self.layout.blocks {
            let vals = &mut out[b.range()];
            let name = b.name.as_str();
            if name.ends_with("ln_gain") {
                vals.iter_mut().for_each(|v| *v = 1.0);
            } else if name.ends_with(".tag") {
                vals.iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
            } else if b.rows > 1 || name.ends_with("w2") || name.ends_with(".a") {
                let sd = (1.0 / b.rows as f64).sqrt();
                vals.iter_mut().for_each(|v| *v = sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.layout.total_len {
            return Err(Error::shape("Network::unflatten", format!("{} values", flat.len()), format!("layout of {}", self.layout.total_len)));
        }
        let mut p = self.template.clone();
        for (t, b) in p.tensors_mut().into_iter().zip(&self.layout.blocks) {
            t.data_mut().copy_from_slice(&flat[b.range()]);
        }
        Ok(p)
    }

    pub fn flatten(&self, p: &ModelParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.total_len);
        for (_, t) in p.main_tensors().into_iter().chain(p.aux.tensors()) {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Model input vector of one modality.
    pub fn modality_features(&self, r: &PatientRecord, m: Modality) -> Vec<f64> {
        match m {
            Modality::Ecg => r.x_ecg.clone(),
            Modality::Mri => r.x_mri.clone(),
            Modality::Ehr => r.x_ehr.clone(),
            Modality::Genomics => {
                let k = self.projection.cols();
                let mut out = Vec::with_capacity(1 + k);
                out.push(r.prs);
                for c in 0..k {
                    let v: f64 = r
                        .genotype
                        .iter()
                        .enumerate()
                        .map(|(j, &g)| (f64::from(g) - 1.0) * self.projection.get(j, c))
                        .sum();
                    out.push(v);
                }
                out
            }
        }
    }

    fn check_record(&self, r: &PatientRecord) -> Result<()> {
        let ok = r.x_ecg.len() == self.input_dims[0]
            && r.x_mri.len() == self.input_dims[1]
            && r.x_ehr.len() == self.input_dims[3]
            && r.genotype.len() == self.n_snps
            && r.confounder < self.n_levels;
        if !ok {
            return Err(Error::Input(format!("patient {} does not match the network's input dimensions", r.id)));
        }
        Ok(())
    }

    pub fn featurize(&self, records: &[&PatientRecord]) -> Result<BatchInputs> {
        if records.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let n = records.len();
        let mut x: Vec<Tensor2> = Vec::with_capacity(4);
        let mut presence = Vec::with_capacity(4);
        for m in Modality::ALL {
            let dm = self.input_dims[m.index()];
            let mut data = Vec::with_capacity(n * dm);
            let mut flags = Vec::with_capacity(n);
            for r in records {
                self.check_record(r)?;
                data.extend(self.modality_features(r, m));
                flags.push(if r.is_missing(m) { 0.0 } else { 1.0 });
            }
            x.push(Tensor2::new(n, dm, data)?);
            let present = flags.iter().filter(|&&f| f > 0.0).count();
            presence.push(if present == n {
                PresencePlan::All
            } else if present == 0 {
                PresencePlan::Absent
            } else {
                PresencePlan::Rows(flags)
            });
        }
        let x: [Tensor2; 4] = x.try_into().expect("four modalities");
        let presence: [PresencePlan; 4] = presence.try_into().expect("four modalities");
        Ok(BatchInputs {
            x,
            presence,
            labels: records.iter().map(|r| r.label()).collect(),
            confounder: records.iter().map(|r| r.confounder).collect(),
        })
    }

    /// Graph over a batch: kNN within the batch, or self-loops only.
    pub fn batch_graph(&self, records: &[&PatientRecord], mode: GraphMode) -> Result<PatientGraph> {
        let rarity: Vec<f64> = records.iter().map(|r| r.rarity).collect();
        if mode == GraphMode::SelfLoops || self.cfg.gat_layers == 0 {
            return Ok(PatientGraph::self_loops(rarity));
        }
        let owned: Vec<PatientRecord> = records.iter().map(|&r| r.clone()).collect();
        let k = self.cfg.k_neighbors.min(owned.len() - 1);
        build_similarity_graph(&owned, k, &self.cfg.graph_weights)
    }

    fn dropout_mask(&self, rows: usize, rate: f64, seed: u64) -> Option<Tensor2> {
        if rate <= 0.0 {
            return None;
        }
        let mut rng = keyed(seed, &[keys::DROPOUT]);
        let keep = 1.0 / (1.0 - rate);
        let data = (0..rows * self.cfg.hidden)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Some(Tensor2::from_raw(rows, self.cfg.hidden, data))
    }

    /// Head input `[z | gat(z)]` on the tape.
    fn trunk(&self, tape: &mut GradTape, mp: &ModelParams, inputs: &BatchInputs, graph: &PatientGraph, trainable: bool, main_vars: &mut Vec<Var>) -> Result<(Var, Var, [Option<Var>; 4])> {
        let xv = mp.xmt.register(tape, trainable);
        main_vars.extend(xv.leaves());
        let mut mods = [ModalityInput { x: xv.wo, presence: Presence::Absent }; 4];
        for m in Modality::ALL {
            let i = m.index();
            let presence = match &inputs.presence[i] {
                PresencePlan::All => Presence::All,
                PresencePlan::Absent => Presence::Absent,
                PresencePlan::Rows(f) => Presence::Rows(tape.constant(Tensor2::col_vector(f)?)),
            };
            mods[i] = ModalityInput { x: tape.constant(inputs.x[i].clone()), presence };
        }
        let out = fuse_tape(tape, &xv, &mods)?;
        let mut h = out.z;
        for g in &mp.gat {
            let gv = g.register(tape, trainable);
            main_vars.extend([gv.w, gv.a, gv.b]);
            h = gat_layer_tape(tape, &gv, graph, h)?.0;
        }
        let head_in = if mp.gat.is_empty() { out.z } else { tape.concat_cols(&[out.z, h])? };
        Ok((head_in, out.z, out.latents))
    }

    fn head(&self, tape: &mut GradTape, mp: &ModelParams, head_in: Var, mask: Option<Tensor2>, trainable: bool, main_vars: &mut Vec<Var>) -> Result<Var> {
        let mut put = |t: &Tensor2| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let (w1, b1, w2, b2) = (put(&mp.head.w1), put(&mp.head.b1), put(&mp.head.w2), put(&mp.head.b2));
        main_vars.extend([w1, b1, w2, b2]);
        let hdn = tape.matmul(head_in, w1)?;
        let hdn = tape.add_row(hdn, b1)?;
        let mut hdn = tape.leaky_relu(hdn, self.cfg.slope);
        if let Some(m) = mask {
            let m = tape.constant(m);
            hdn = tape.mul(hdn, m)?;
        }
        let logits = tape.matmul(hdn, w2)?;
        tape.add_row(logits, b2)
    }

    fn forward(&self, tape: &mut GradTape, mp: &ModelParams, inputs: &BatchInputs, graph: &PatientGraph, mask: Option<Tensor2>, trainable: bool) -> Result<Forward> {
        let mut main_vars = Vec::new();
        let (head_in, z, latents) = self.trunk(tape, mp, inputs, graph, trainable, &mut main_vars)?;
        let logits = self.head(tape, mp, head_in, mask, trainable, &mut main_vars)?;
        Ok(Forward { logits, z, latents, main_vars })
    }

    /// `(log q(C|Z,Y), log q(C|Y))` picked at the observed confounder, as
    /// `B x 1` columns.
    fn aux_log_probs(&self, tape: &mut GradTape, aux: &AuxiliaryHeads, z: Var, inputs: &BatchInputs, trainable: bool) -> Result<(Var, Var, Vec<Var>)> {
        let mut put = |t: &Tensor2| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let vars: Vec<Var> = aux.tensors().into_iter().map(|(_, t)| put(t)).collect();
        let y = tape.constant(onehot(&inputs.labels));
        let zy = tape.concat_cols(&[z, y])?;
        let h = tape.matmul(zy, vars[0])?;
        let h = tape.add_row(h, vars[1])?;
        let h = tape.leaky_relu(h, self.cfg.slope);
        let lz = tape.matmul(h, vars[2])?;
        let lz = tape.add_row(lz, vars[3])?;
        let ly = tape.matmul(y, vars[4])?;
        let ly = tape.add_row(ly, vars[5])?;
        let pz = tape.log_softmax_pick(lz, &inputs.confounder)?;
        let py = tape.log_softmax_pick(ly, &inputs.confounder)?;
        Ok((pz, py, vars))
    }

    /// Rows where both modalities are present, or `None` when all are.
    fn pair_rows(&self, inputs: &BatchInputs, m: Modality, n: Modality) -> Option<Option<Vec<usize>>> {
        use PresencePlan::*;
        match (&inputs.presence[m.index()], &inputs.presence[n.index()]) {
            (Absent, _) | (_, Absent) => None,
            (All, All) => Some(None),
            (a, b) => {
                let flag = |p: &PresencePlan, i: usize| match p {
                    Rows(f) => f[i] > 0.0,
                    _ => true,
                };
                Some(Some((0..inputs.len()).filter(|&i| flag(a, i) && flag(b, i)).collect()))
            }
        }
    }

    /// Sum of Gaussian MI over present modality pairs.
    fn mi_term(&self, tape: &mut GradTape, fwd: &Forward, inputs: &BatchInputs) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (a, &m) in Modality::ALL.iter().enumerate() {
            for &n in &Modality::ALL[a + 1..] {
                let Some(rows) = self.pair_rows(inputs, m, n) else { continue };
                let (lm, ln) = (fwd.latents[m.index()].expect("present"), fwd.latents[n.index()].expect("present"));
                let (lm, ln) = match rows {
                    None => (lm, ln),
                    Some(r) => {
                        if r.len() < objective::MI_MIN_BATCH {
                            continue;
                        }
                        let idx: Arc<[usize]> = r.into();
                        (tape.gather_rows(lm, idx.clone())?, tape.gather_rows(ln, idx)?)
                    }
                };
                if tape.value(lm).rows() < objective::MI_MIN_BATCH {
                    continue;
                }
                let mi = tape.gaussian_mi(lm, ln)?;
                acc = Some(match acc {
                    None => mi,
                    Some(s) => tape.add(s, mi)?,
                });
            }
        }
        Ok(acc)
    }

    /// `sum_pairs (I(Z_m; Z_n | C) - kappa)^2` on the tape.
    fn cmi_target_term(&self, tape: &mut GradTape, fwd: &Forward, inputs: &BatchInputs, kappa: f64) -> Result<Option<Var>> {
        let d = self.cfg.latent_dim;
        let mut acc: Option<Var> = None;
        for (a, &m) in Modality::ALL.iter().enumerate() {
            for &n in &Modality::ALL[a + 1..] {
                let Some(rows) = self.pair_rows(inputs, m, n) else { continue };
                let rows: Vec<usize> = rows.unwrap_or_else(|| (0..inputs.len()).collect());
                let conf: Vec<usize> = rows.iter().map(|&i| inputs.confounder[i]).collect();
                let strata = objective::cmi_strata(&conf, d, d);
                if strata.is_empty() {
                    continue;
                }
                let total: usize = strata.iter().map(Vec::len).sum();
                let (lm, ln) = (fwd.latents[m.index()].expect("present"), fwd.latents[n.index()].expect("present"));
                let mut cmi: Option<Var> = None;
                for s in strata {
                    let w = s.len() as f64 / total as f64;
                    let idx: Arc<[usize]> = s.iter().map(|&k| rows[k]).collect();
                    let zm = tape.gather_rows(lm, idx.clone())?;
                    let zn = tape.gather_rows(ln, idx)?;
                    let mi = tape.gaussian_mi(zm, zn)?;
                    let mi = tape.scale(mi, w);
                    cmi = Some(match cmi {
                        None => mi,
                        Some(c) => tape.add(c, mi)?,
                    });
                }
                let k = tape.constant(Tensor2::from_raw(1, 1, vec![kappa]));
                let gap = tape.sub(cmi.expect("nonempty strata"), k)?;
                let sq = tape.mul(gap, gap)?;
                acc = Some(match acc {
                    None => sq,
                    Some(s) => tape.add(s, sq)?,
                });
            }
        }
        Ok(acc)
    }

    fn scatter(&self, grads: &Gradients, vars: &[Var], out: &mut [f64], start_block: usize) {
        for (v, b) in vars.iter().zip(&self.layout.blocks[start_block..]) {
            if let Some(g) = grads.get(*v) {
                for (o, x) in out[b.range()].iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
        }
    }

    /// Loss breakdown and gradient (aux region zero) of one loss part.
    pub fn loss_grad(&self, flat: &[f64], records: &[&PatientRecord], weights: &LossWeights, ctx: StepContext, part: LossPart) -> Result<(LossBreakdown, Vec<f64>)> {
        let mp = self.unflatten(flat)?;
        let mut grad = vec![0.0; self.layout.total_len];
        let main = &flat[..self.layout.main_len];
        let l2: f64 = main.iter().map(|v| v * v).sum();
        if part == LossPart::Regularizer {
            for (g, v) in grad[..self.layout.main_len].iter_mut().zip(main) {
                *g = 2.0 * weights.l2_weight * v;
            }
            let total = weights.l2_weight * l2;
            return Ok((LossBreakdown { l2, total, ..Default::default() }, grad));
        }
        let inputs = self.featurize(records)?;
        let graph = self.batch_graph(records, GraphMode::Knn)?;
        let mask = if ctx.train { self.dropout_mask(records.len(), self.cfg.dropout, ctx.seed) } else { None };
        let mut tape = GradTape::new();
        let fwd = self.forward(&mut tape, &mp, &inputs, &graph, mask, true)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        let task = objective::task_loss(&logits, &inputs.labels)?;

        let mut terms: Vec<Var> = Vec::new();
        match part {
            LossPart::TaskRow(i) => {
                if i >= records.len() {
                    return Err(Error::Input(format!("row {i} outside batch of {}", records.len())));
                }
                let row = tape.slice_rows(fwd.logits, i, 1)?;
                terms.push(tape.bce_with_logits(row, &inputs.labels[i..=i])?);
            }
            LossPart::All => terms.push(tape.bce_with_logits(fwd.logits, &inputs.labels)?),
            LossPart::BatchTerms | LossPart::Regularizer => {}
        }

        let with_batch_terms = matches!(part, LossPart::All | LossPart::BatchTerms);
        let mut breakdown = LossBreakdown { task, l2, ..Default::default() };
        if with_batch_terms && weights.mi_weight != 0.0 {
            if let Some(mi) = self.mi_term(&mut tape, &fwd, &inputs)? {
                breakdown.mi = Some(tape.value(mi).item());
                terms.push(tape.scale(mi, -weights.mi_weight));
            }
        }
        let mut aux_vars = Vec::new();
        if with_batch_terms && weights.causal_weight > 0.0 {
            match weights.variant {
                CausalVariant::Vcmi => {
                    let (pz, py, vars) = self.aux_log_probs(&mut tape, &mp.aux, fwd.z, &inputs, false)?;
                    aux_vars = vars;
                    let diff = tape.sub(pz, py)?;
                    let vcmi = tape.mean(diff);
                    breakdown.causal = Some(tape.value(vcmi).item());
                    terms.push(tape.scale(vcmi, weights.causal_weight));
                }
                CausalVariant::CmiTarget => match self.cmi_target_term(&mut tape, &fwd, &inputs, weights.kappa)? {
                    Some(c) => {
                        breakdown.causal = Some(tape.value(c).item());
                        terms.push(tape.scale(c, weights.causal_weight));
                    }
                    None => {
                        breakdown.causal = Some(0.0);
                        breakdown.causal_degenerate = true;
                    }
                },
                CausalVariant::ProbDiff => {
                    // Enters the scalar loss only; no gradient.
                    let risk: Vec<f64> = logits.iter().map(|&z| objective::sigmoid(z)).collect();
                    let est = objective::causal_prob_diff(&risk, &inputs.confounder, &inputs.labels, weights.prob_diff_bins)?;
                    breakdown.causal = Some(est.value);
                    breakdown.causal_degenerate = est.degenerate;
                }
            }
        }
        let _ = aux_vars;

        let with_task = matches!(part, LossPart::All);
        let with_l2 = matches!(part, LossPart::All);
        breakdown.total = objective::combine(
            if with_task { task } else { 0.0 },
            if with_batch_terms { breakdown.mi } else { None },
            if with_batch_terms { breakdown.causal } else { None },
            if with_l2 { l2 } else { 0.0 },
            weights,
        );
        if let LossPart::TaskRow(_) = part {
            breakdown.total = tape.value(terms[0]).item();
        }
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", breakdown.total)));
        }
        if terms.is_empty() {
            return Ok((breakdown, grad));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let main_vars = fwd.main_vars;
        let grads = tape.backward(total)?;
        self.scatter(&grads, &main_vars, &mut grad, 0);
        if with_l2 {
            for (g, v) in grad[..self.layout.main_len].iter_mut().zip(main) {
                *g += 2.0 * weights.l2_weight * v;
            }
        }
        Ok((breakdown, grad))
    }

    /// Negative mean log-likelihood of both auxiliary heads and its gradient
    /// with respect to the auxiliary region, at fixed latents.
    fn aux_loss_grad(&self, mp: &ModelParams, z: &Tensor2, inputs: &BatchInputs) -> Result<(f64, Vec<f64>)> {
        let mut tape = GradTape::new();
        let zc = tape.constant(z.clone());
        let (pz, py, vars) = self.aux_log_probs(&mut tape, &mp.aux, zc, inputs, true)?;
        let both = tape.add(pz, py)?;
        let mean = tape.mean(both);
        let loss = tape.scale(mean, -1.0);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut g = vec![0.0; self.layout.total_len];
        let first_aux = self.layout.blocks.len() - vars.len();
        self.scatter(&grads, &vars, &mut g, first_aux);
        Ok((value, g))
    }

    /// Fused latents for a batch, evaluated without gradients.
    pub fn latents(&self, flat: &[f64], records: &[&PatientRecord]) -> Result<Tensor2> {
        let mp = self.unflatten(flat)?;
        let inputs = self.featurize(records)?;
        let graph = self.batch_graph(records, GraphMode::SelfLoops)?;
        let mut tape = GradTape::new();
        let fwd = self.forward(&mut tape, &mp, &inputs, &graph, None, false)?;
        Ok(tape.value(fwd.z).clone())
    }

    /// Train the auxiliary heads for `cfg.aux_steps` steps on a batch with the
    /// main parameters held fixed. Returns the final auxiliary loss.
    pub fn train_aux(&self, flat: &mut [f64], records: &[&PatientRecord]) -> Result<f64> {
        let z = self.latents(flat, records)?;
        let inputs = self.featurize(records)?;
        let mut last = f64::NAN;
        for _ in 0..self.cfg.aux_steps {
            let mp = self.unflatten(flat)?;
            let (loss, g) = self.aux_loss_grad(&mp, &z, &inputs)?;
            for (p, gi) in flat[self.layout.main_len..].iter_mut().zip(&g[self.layout.main_len..]) {
                *p -= self.cfg.aux_lr * gi;
            }
            last = loss;
        }
        Ok(last)
    }

    /// Probabilities each auxiliary head assigns to the observed confounder.
    pub fn aux_probabilities(&self, flat: &[f64], records: &[&PatientRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mp = self.unflatten(flat)?;
        let z = self.latents(flat, records)?;
        let inputs = self.featurize(records)?;
        let mut tape = GradTape::new();
        let zc = tape.constant(z);
        let (pz, py, _) = self.aux_log_probs(&mut tape, &mp.aux, zc, &inputs, false)?;
        let exp = |v: Var| tape.value(v).data().iter().map(|x| x.exp()).collect::<Vec<f64>>();
        Ok((exp(pz), exp(py)))
    }

    /// Head inputs `[z | gat(z)]` for records in fixed chunks.
    pub fn head_inputs(&self, flat: &[f64], records: &[PatientRecord], mode: GraphMode) -> Result<Tensor2> {
        let mp = self.unflatten(flat)?;
        let mut rows = 0;
        let mut cols = 0;
        let mut data = Vec::new();
        for chunk in records.chunks(self.cfg.eval_chunk) {
            let refs: Vec<&PatientRecord> = chunk.iter().collect();
            let inputs = self.featurize(&refs)?;
            let graph = self.batch_graph(&refs, mode)?;
            let mut tape = GradTape::new();
            let mut sink = Vec::new();
            let (h, _, _) = self.trunk(&mut tape, &mp, &inputs, &graph, false, &mut sink)?;
            let hv = tape.value(h);
            rows += hv.rows();
            cols = hv.cols();
            data.extend_from_slice(hv.data());
        }
        Tensor2::new(rows, cols, data)
    }

    /// Head logits for precomputed head inputs with an optional dropout
    /// `(rate, seed)`.
    pub fn head_logits(&self, flat: &[f64], head_in: &Tensor2, dropout: Option<(f64, u64)>) -> Result<Vec<f64>> {
        let mp = self.unflatten(flat)?;
        let mask = dropout.and_then(|(rate, seed)| self.dropout_mask(head_in.rows(), rate, seed));
        let mut tape = GradTape::new();
        let h = tape.constant(head_in.clone());
        let mut sink = Vec::new();
        let logits = self.head(&mut tape, &mp, h, mask, false, &mut sink)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Deterministic risks in record order.
    pub fn predict(&self, flat: &[f64], records: &[PatientRecord]) -> Result<Vec<f64>> {
        let h = self.head_inputs(flat, records, GraphMode::Knn)?;
        Ok(self.head_logits(flat, &h, None)?.into_iter().map(objective::sigmoid).collect())
    }

    /// Concatenated model input of one record: ecg, mri, genomics, ehr.
    pub fn input_vector(&self, r: &PatientRecord) -> Vec<f64> {
        Modality::ALL.iter().flat_map(|&m| self.modality_features(r, m)).collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().sum()
    }

    fn split_inputs(&self, rows: &[Vec<f64>]) -> Result<BatchInputs> {
        let n = rows.len();
        let mut x = Vec::with_capacity(4);
        let mut start = 0;
        for &dm in &self.input_dims {
            let mut data = Vec::with_capacity(n * dm);
            for r in rows {
                if r.len() != self.input_len() {
                    return Err(Error::shape("model input", format!("len {}", r.len()), format!("expected {}", self.input_len())));
                }
                data.extend_from_slice(&r[start..start + dm]);
            }
            x.push(Tensor2::new(n, dm, data)?);
            start += dm;
        }
        Ok(BatchInputs {
            x: x.try_into().expect("four modalities"),
            presence: [PresencePlan::All, PresencePlan::All, PresencePlan::All, PresencePlan::All],
            labels: vec![0.0; n],
            confounder: vec![0; n],
        })
    }

    /// Risks for raw model-input vectors, each scored alone (self-loop graph,
    /// no dropout, rarity 0).
    pub fn risk_from_inputs(&self, flat: &[f64], rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mp = self.unflatten(flat)?;
        let inputs = self.split_inputs(rows)?;
        let graph = PatientGraph::self_loops(vec![0.0; rows.len()]);
        let mut tape = GradTape::new();
        let fwd = self.forward(&mut tape, &mp, &inputs, &graph, None, false)?;
        Ok(tape.value(fwd.logits).data().iter().map(|&z| objective::sigmoid(z)).collect())
    }

    /// Logit of one raw input vector and its gradient with respect to the input.
    pub fn logit_input_grad(&self, flat: &[f64], input: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mp = self.unflatten(flat)?;
        let inputs = self.split_inputs(&[input.to_vec()])?;
        let graph = PatientGraph::self_loops(vec![0.0]);
        let mut tape = GradTape::new();
        let mut main_vars = Vec::new();
        let xv = mp.xmt.register(&mut tape, false);
        let mut mods = [ModalityInput { x: xv.wo, presence: Presence::All }; 4];
        let mut leaves = Vec::new();
        for (i, t) in inputs.x.iter().enumerate() {
            let v = tape.leaf(t.clone());
            leaves.push(v);
            mods[i].x = v;
        }
        let out = fuse_tape(&mut tape, &xv, &mods)?;
        let mut h = out.z;
        for g in &mp.gat {
            let gv = g.register(&mut tape, false);
            h = gat_layer_tape(&mut tape, &gv, &graph, h)?.0;
        }
        let head_in = if mp.gat.is_empty() { out.z } else { tape.concat_cols(&[out.z, h])? };
        let logit = self.head(&mut tape, &mp, head_in, None, false, &mut main_vars)?;
        let value = tape.value(logit).item();
        let grads = tape.backward(logit)?;
        let mut g = Vec::with_capacity(self.input_len());
        for (v, &dm) in leaves.iter().zip(&self.input_dims) {
            g.extend(grads.wrt(*v, 1, dm).into_data());
        }
        Ok((value, g))
    }

    pub fn n_confounder_levels(&self) -> usize {
        self.n_levels
    }

    /// Blocks of the input vector, one per modality, as index ranges.
    pub fn modality_ranges(&self) -> [std::ops::Range<usize>; 4] {
        let mut start = 0;
        self.input_dims.map(|d| {
            let r = start..start + d;
            start += d;
            r
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::generate_cohort;

    fn setup() -> (Network, Vec<PatientRecord>) {
        let gen = GeneratorConfig { n_patients: 24, ..Default::default() };
        let cohort = generate_cohort(&gen).unwrap();
        (Network::new(ModelConfig::default(), &gen, 1).unwrap(), cohort.records)
    }

    #[test]
    fn flatten_round_trip() {
        let (net, _) = setup();
        let flat = net.init(3);
        let mp = net.unflatten(&flat).unwrap();
        assert_eq!(net.flatten(&mp), flat);
        assert_eq!(net.layout().blocks.last().unwrap().range().end, flat.len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (net, _) = setup();
        let flat = net.init(5);
        let mut buf = Vec::new();
        write_checkpoint(net.layout(), &flat, &mut buf).unwrap();
        let (layout, back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(&layout, net.layout());
        assert_eq!(flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), back.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn task_only_total_equals_task() {
        let (net, recs) = setup();
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let flat = net.init(2);
        let (b, _) = net.loss_grad(&flat, &refs, &LossWeights::task_only(), StepContext::eval(), LossPart::All).unwrap();
        assert_eq!(b.total, b.task);
    }

    #[test]
    fn predictions_are_deterministic_probabilities() {
        let (net, recs) = setup();
        let flat = net.init(2);
        let a = net.predict(&flat, &recs).unwrap();
        assert_eq!(a, net.predict(&flat, &recs).unwrap());
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn aux_training_lowers_aux_loss() {
        let (net, recs) = setup();
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let mut flat = net.init(2);
        let first = net.train_aux(&mut flat, &refs).unwrap();
        for _ in 0..20 {
            net.train_aux(&mut flat, &refs).unwrap();
        }
        assert!(net.train_aux(&mut flat, &refs).unwrap() < first);
    }

    fn grad_error(weights: LossWeights, ctx: StepContext, part: LossPart) -> f64 {
        let (net, recs) = setup();
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let flat = net.init(7);
        let (_, g) = net.loss_grad(&flat, &refs, &weights, ctx, part).unwrap();
        let main = net.layout().main_len;
        let coords: Vec<usize> = (0..main).step_by(7).collect();
        crate::numerics::finite_diff_check_coords(|p| Ok(net.loss_grad(p, &refs, &weights, ctx, part)?.0.total), &g, &flat, 1e-5, &coords).unwrap()
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let w = LossWeights { mi_weight: -0.05, causal_weight: 0.3, ..LossWeights::default() };
        let ctx = StepContext { seed: 11, train: true };
        let err = grad_error(w, ctx, LossPart::All);
        assert!(err < 1e-3, "relative error {err}");
        let w = LossWeights { causal_weight: 0.3, variant: CausalVariant::CmiTarget, kappa: 0.1, ..LossWeights::default() };
        let err = grad_error(w, StepContext::eval(), LossPart::All);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn task_row_gradient_matches_finite_differences() {
        let err = grad_error(LossWeights::task_only(), StepContext::eval(), LossPart::TaskRow(3));
        assert!(err < 1e-4, "relative error {err}");
    }
}
