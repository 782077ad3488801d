//! Per-modality encoders and cross-modal attention fusion.
//!
//! Each modality of a patient is a single token. The encoder is affine plus a
//! learned modality tag. For every ordered pair `(m, n)` of present
//! modalities, queries from `m` attend over keys and values from `n`, per
//! head; heads are concatenated and projected by a shared output matrix. The
//! fused latent is the layer norm of the sum of all present embeddings and all
//! pairwise attention outputs.

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor2, Var};
use crate::synthcohort::Modality;
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `d_m x d`.
    pub w: Tensor2,
    /// `1 x d`.
    pub b: Tensor2,
    /// `1 x d` modality tag.
    pub tag: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XmtParams {
    pub d: usize,
    pub heads: usize,
    pub encoders: [EncoderParams; 4],
    pub projections: [AttentionProjections; 4],
    /// `d x d` head-mixing output projection.
    pub wo: Tensor2,
    pub ln_gain: Tensor2,
    pub ln_bias: Tensor2,
    pub ln_eps: f64,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl XmtParams {
    /// All-zero weights with unit layer-norm gain.
    pub fn zeros(input_dims: [usize; 4], d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("latent dim {d} must be a positive multiple of heads {heads}")));
        }
        let enc = |dm: usize| EncoderParams {
            w: Tensor2::zeros(dm, d),
            b: Tensor2::zeros(1, d),
            tag: Tensor2::zeros(1, d),
        };
        let proj = || AttentionProjections {
            wq: Tensor2::zeros(d, d),
            wk: Tensor2::zeros(d, d),
            wv: Tensor2::zeros(d, d),
        };
        Ok(Self {
            d,
            heads,
            encoders: [enc(input_dims[0]), enc(input_dims[1]), enc(input_dims[2]), enc(input_dims[3])],
            projections: [proj(), proj(), proj(), proj()],
            wo: Tensor2::zeros(d, d),
            ln_gain: Tensor2::filled(1, d, 1.0),
            ln_bias: Tensor2::zeros(1, d),
            ln_eps: DEFAULT_LN_EPS,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        self.encoders[m.index()].w.rows()
    }

    /// Named tensors in flattening order.
    pub fn tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            let e = &self.encoders[m.index()];
            out.push((format!("xmt.{m}.enc_w"), &e.w));
            out.push((format!("xmt.{m}.enc_b"), &e.b));
            out.push((format!("xmt.{m}.tag"), &e.tag));
        }
        for m in Modality::ALL {
            let p = &self.projections[m.index()];
            out.push((format!("xmt.{m}.wq"), &p.wq));
            out.push((format!("xmt.{m}.wk"), &p.wk));
            out.push((format!("xmt.{m}.wv"), &p.wv));
        }
        out.push(("xmt.wo".into(), &self.wo));
        out.push(("xmt.ln_gain".into(), &self.ln_gain));
        out.push(("xmt.ln_bias".into(), &self.ln_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        for e in self.encoders.iter_mut() {
            out.push(&mut e.w);
            out.push(&mut e.b);
            out.push(&mut e.tag);
        }
        for p in self.projections.iter_mut() {
            out.push(&mut p.wq);
            out.push(&mut p.wk);
            out.push(&mut p.wv);
        }
        out.push(&mut self.wo);
        out.push(&mut self.ln_gain);
        out.push(&mut self.ln_bias);
        out
    }

    /// Record every tensor on `tape`, as leaves when `trainable`.
    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> XmtVars {
        let mut put = |t: &Tensor2| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let enc = |i: usize, put: &mut dyn FnMut(&Tensor2) -> Var| {
            let e = &self.encoders[i];
            (put(&e.w), put(&e.b), put(&e.tag))
        };
        let encoders = [enc(0, &mut put), enc(1, &mut put), enc(2, &mut put), enc(3, &mut put)];
        let proj = |i: usize, put: &mut dyn FnMut(&Tensor2) -> Var| {
            let p = &self.projections[i];
            (put(&p.wq), put(&p.wk), put(&p.wv))
        };
        let projections = [proj(0, &mut put), proj(1, &mut put), proj(2, &mut put), proj(3, &mut put)];
        XmtVars {
            d: self.d,
            heads: self.heads,
            encoders,
            projections,
            wo: put(&self.wo),
            ln_gain: put(&self.ln_gain),
            ln_bias: put(&self.ln_bias),
            ln_eps: self.ln_eps,
        }
    }
}

/// Tape handles for [`XmtParams`].
#[derive(Clone, Debug)]
pub struct XmtVars {
    pub d: usize,
    pub heads: usize,
    /// `(w, b, tag)` per modality.
    pub encoders: [(Var, Var, Var); 4],
    /// `(wq, wk, wv)` per modality.
    pub projections: [(Var, Var, Var); 4],
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub ln_eps: f64,
}

impl XmtVars {
    /// Leaves in the same order as [`XmtParams::tensors`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b, t) in &self.encoders {
            out.extend([w, b, t]);
        }
        for &(q, k, v) in &self.projections {
            out.extend([q, k, v]);
        }
        out.extend([self.wo, self.ln_gain, self.ln_bias]);
        out
    }
}

/// Which rows of a batch carry a modality.
#[derive(Clone, Copy, Debug)]
pub enum Presence {
    All,
    Absent,
    /// `B x 1` column of 0/1 flags.
    Rows(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityInput {
    /// `B x d_m` input features.
    pub x: Var,
    pub presence: Presence,
}

/// Output of a batched fusion pass.
#[derive(Clone, Debug)]
pub struct XmtOutput {
    /// `B x d` fused latent.
    pub z: Var,
    /// Per-modality embeddings (unmasked) for present modalities.
    pub latents: [Option<Var>; 4],
    /// Attention output node per ordered pair and head.
    pub attention_nodes: BTreeMap<(Modality, Modality), Vec<Var>>,
}

pub fn encode_tape(tape: &mut GradTape, p: &XmtVars, m: Modality, x: Var) -> Result<Var> {
    let (w, b, tag) = p.encoders[m.index()];
    let h = tape.matmul(x, w)?;
    let h = tape.add_row(h, b)?;
    tape.add_row(h, tag)
}

/// Multi-head attention of modality-`m` queries over modality-`n` keys and
/// values for one token per patient, followed by the output projection.
pub fn cross_attention_tape(
    tape: &mut GradTape,
    p: &XmtVars,
    m: Modality,
    n: Modality,
    hm: Var,
    hn: Var,
) -> Result<(Var, Vec<Var>)> {
    let (wq, _, _) = p.projections[m.index()];
    let (_, wk, wv) = p.projections[n.index()];
    let q = tape.matmul(hm, wq)?;
    let k = tape.matmul(hn, wk)?;
    let v = tape.matmul(hn, wv)?;
    let dk = p.d / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        heads.push(tape.attention(qh, kh, vh, 1, 1, scale)?);
    }
    let cat = tape.concat_cols(&heads)?;
    Ok((tape.matmul(cat, p.wo)?, heads))
}

fn mask_rows(tape: &mut GradTape, x: Var, a: Presence, b: Presence) -> Result<Var> {
    match (a, b) {
        (Presence::Rows(ma), Presence::Rows(mb)) => {
            let both = tape.mul(ma, mb)?;
            tape.mul_col(x, both)
        }
        (Presence::Rows(mk), _) | (_, Presence::Rows(mk)) => tape.mul_col(x, mk),
        _ => Ok(x),
    }
}

/// Batched encode, pairwise cross-attention and residual fusion.
pub fn fuse_tape(tape: &mut GradTape, p: &XmtVars, inputs: &[ModalityInput; 4]) -> Result<XmtOutput> {
    let mut latents = [None; 4];
    for m in Modality::ALL {
        let inp = inputs[m.index()];
        if !matches!(inp.presence, Presence::Absent) {
            latents[m.index()] = Some(encode_tape(tape, p, m, inp.x)?);
        }
    }
    let mut terms = Vec::new();
    for m in Modality::ALL {
        if let Some(h) = latents[m.index()] {
            terms.push(mask_rows(tape, h, inputs[m.index()].presence, Presence::All)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Input("every modality is missing".into()));
    }
    let mut attention_nodes = BTreeMap::new();
    for m in Modality::ALL {
        for n in Modality::ALL {
            if m == n {
                continue;
            }
            if let (Some(hm), Some(hn)) = (latents[m.index()], latents[n.index()]) {
                let (attn, heads) = cross_attention_tape(tape, p, m, n, hm, hn)?;
                terms.push(mask_rows(tape, attn, inputs[m.index()].presence, inputs[n.index()].presence)?);
                attention_nodes.insert((m, n), heads);
            }
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let z = tape.layer_norm_rows(acc, p.ln_gain, p.ln_bias, p.ln_eps)?;
    Ok(XmtOutput { z, latents, attention_nodes })
}

/// Fused latent for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLatent {
    pub z: Vec<f64>,
    /// Per-modality embeddings for present modalities.
    pub latents: [Option<Vec<f64>>; 4],
    /// Per-head attention weights for each ordered pair of present modalities.
    pub attention: BTreeMap<(Modality, Modality), Vec<f64>>,
}

fn check_input(x: &[f64], m: Modality, params: &XmtParams) -> Result<()> {
    if x.len() != params.input_dim(m) {
        return Err(Error::shape(
            "encode_modality",
            format!("{m} input len {}", x.len()),
            format!("encoder expects {}", params.input_dim(m)),
        ));
    }
    Ok(())
}

/// `x W + b + tag` for one modality vector.
pub fn encode_modality(x: &[f64], m: Modality, params: &XmtParams) -> Result<Vec<f64>> {
    check_input(x, m, params)?;
    let mut tape = GradTape::new();
    let p = params.register(&mut tape, false);
    let xv = tape.constant(Tensor2::row_vector(x)?);
    let h = encode_tape(&mut tape, &p, m, xv)?;
    Ok(tape.value(h).data().to_vec())
}

/// `softmax(Q K^T / sqrt(d_k)) V` with `d_k = Q.cols`.
pub fn scaled_dot_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<Tensor2> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("Q {} K {}", q.shape_str(), k.shape_str()),
            format!("V {}", v.shape_str()),
        ));
    }
    if q.rows() == 0 {
        return Ok(Tensor2::zeros(0, v.cols()));
    }
    let mut tape = GradTape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let scale = 1.0 / (q.cols() as f64).sqrt();
    // Every query row attends over all key rows.
    let tq = q.rows();
    let out = tape.attention(qv, kv, vv, tq, k.rows(), scale)?;
    Ok(tape.value(out).clone())
}

/// `Attn_mn` for one patient: a `1 x d` row.
pub fn cross_modal_attention(
    m: Modality,
    n: Modality,
    embeddings: &[Option<Vec<f64>>; 4],
    params: &XmtParams,
) -> Result<Tensor2> {
    let (em, en) = match (&embeddings[m.index()], &embeddings[n.index()]) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Input(format!("attention {m}->{n} needs both modalities present"))),
    };
    let mut tape = GradTape::new();
    let p = params.register(&mut tape, false);
    let hm = tape.constant(Tensor2::row_vector(em)?);
    let hn = tape.constant(Tensor2::row_vector(en)?);
    let (out, _) = cross_attention_tape(&mut tape, &p, m, n, hm, hn)?;
    Ok(tape.value(out).clone())
}

/// `LayerNorm(sum of present embeddings + sum of attention outputs)`; pairs
/// involving a missing modality are ignored.
pub fn residual_fuse(
    embeddings: &[Option<Vec<f64>>; 4],
    attn_outputs: &BTreeMap<(Modality, Modality), Vec<f64>>,
    params: &XmtParams,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; params.d];
    let mut any = false;
    for e in embeddings.iter().flatten() {
        any = true;
        for (a, x) in acc.iter_mut().zip(e) {
            *a += x;
        }
    }
    if !any {
        return Err(Error::Input("every modality is missing".into()));
    }
    for ((m, n), out) in attn_outputs {
        if m != n && embeddings[m.index()].is_some() && embeddings[n.index()].is_some() {
            for (a, x) in acc.iter_mut().zip(out) {
                *a += x;
            }
        }
    }
    crate::numerics::layer_norm(&acc, params.ln_gain.data(), params.ln_bias.data(), params.ln_eps)
}

/// Full fusion for one patient; `None` marks a missing modality.
pub fn xmt_forward(inputs: &[Option<Vec<f64>>; 4], params: &XmtParams) -> Result<FusedLatent> {
    let mut tape = GradTape::new();
    let p = params.register(&mut tape, false);
    let mut mods = [ModalityInput { x: p.wo, presence: Presence::Absent }; 4];
    for m in Modality::ALL {
        if let Some(x) = &inputs[m.index()] {
            check_input(x, m, params)?;
            mods[m.index()] = ModalityInput { x: tape.constant(Tensor2::row_vector(x)?), presence: Presence::All };
        }
    }
    let out = fuse_tape(&mut tape, &p, &mods)?;
    let latents = out.latents.map(|v| v.map(|v| tape.value(v).data().to_vec()));
    let attention = out
        .attention_nodes
        .iter()
        .map(|(&pair, heads)| {
            let w: Vec<f64> = heads.iter().flat_map(|&h| tape.attention_probs(h).unwrap_or(&[]).to_vec()).collect();
            (pair, w)
        })
        .collect();
    Ok(FusedLatent { z: tape.value(out.z).data().to_vec(), latents, attention })
}
