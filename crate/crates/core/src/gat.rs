//! Graph attention over the patient-similarity graph.
//!
//! For node `i` with neighbourhood `N(i)` (self included):
//! `e_ij = leaky(a_src . W h_i + a_dst . W h_j)`, `alpha_i = softmax_j(e_ij)`,
//! optionally reweighted by `(1 + boost * r_j)` and renormalised, then
//! `h'_i = leaky(sum_j alpha_ij W h_j + b)`. Neighbours are summed in
//! ascending index order.

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor2, Var};
use crate::synthcohort::PatientGraph;
use std::sync::Arc;

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    /// `d_in x d_out`.
    pub w: Tensor2,
    /// `2 d_out x 1`: source half then neighbour half.
    pub a: Tensor2,
    /// `1 x d_out`.
    pub b: Tensor2,
    pub slope: f64,
    /// Rare-phenotype boost; 0 disables reweighting.
    pub rare_boost: f64,
}

impl GatLayerParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Tensor2::zeros(d_in, d_out),
            a: Tensor2::zeros(2 * d_out, 1),
            b: Tensor2::zeros(1, d_out),
            slope: DEFAULT_SLOPE,
            rare_boost: 0.0,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_out();
        if self.a.shape() != (2 * d, 1) || self.b.shape() != (1, d) {
            return Err(Error::shape(
                "GatLayerParams",
                format!("W {}", self.w.shape_str()),
                format!("a {}, b {}", self.a.shape_str(), self.b.shape_str()),
            ));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("leaky slope must lie in (0, 1), got {}", self.slope)));
        }
        if !(self.rare_boost >= 0.0) || !self.rare_boost.is_finite() {
            return Err(Error::Config(format!("rare boost must be finite and >= 0, got {}", self.rare_boost)));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> GatVars {
        let mut put = |t: &Tensor2| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        GatVars {
            w: put(&self.w),
            a: put(&self.a),
            b: put(&self.b),
            d_out: self.d_out(),
            slope: self.slope,
            rare_boost: self.rare_boost,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub w: Var,
    pub a: Var,
    pub b: Var,
    pub d_out: usize,
    pub slope: f64,
    pub rare_boost: f64,
}

fn edge_targets(graph: &PatientGraph) -> Arc<[usize]> {
    let off = graph.offsets();
    (0..graph.n_nodes()).flat_map(|i| std::iter::repeat_n(i, off[i + 1] - off[i])).collect()
}

fn check_rows(graph: &PatientGraph, rows: usize) -> Result<()> {
    if rows != graph.n_nodes() {
        return Err(Error::shape("gat", format!("{rows} feature rows"), format!("{} graph nodes", graph.n_nodes())));
    }
    Ok(())
}

/// Attention logits and coefficients for every edge. Returns `(Wh, alpha)`
/// with `alpha` an `E x 1` column in CSR order.
fn coefficients_tape(tape: &mut GradTape, p: &GatVars, graph: &PatientGraph, h: Var) -> Result<(Var, Var)> {
    check_rows(graph, tape.value(h).rows())?;
    let wh = tape.matmul(h, p.w)?;
    let a_src = tape.slice_rows(p.a, 0, p.d_out)?;
    let a_dst = tape.slice_rows(p.a, p.d_out, p.d_out)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let src = tape.gather_rows(s_src, edge_targets(graph))?;
    let dst = tape.gather_rows(s_dst, graph.neighbor_index().clone())?;
    let e = tape.add(src, dst)?;
    let mut e = tape.leaky_relu(e, p.slope);
    if p.rare_boost > 0.0 {
        // softmax(e + ln(1 + boost r_j)) equals alpha_ij (1 + boost r_j) renormalised.
        let offs: Vec<f64> = graph
            .neighbor_index()
            .iter()
            .map(|&j| (p.rare_boost * graph.rarity()[j]).ln_1p())
            .collect();
        let offs = tape.constant(Tensor2::col_vector(&offs)?);
        e = tape.add(e, offs)?;
    }
    let alpha = tape.segment_softmax(e, graph.offsets().clone())?;
    Ok((wh, alpha))
}

/// One graph attention layer on the tape; returns `(H', alpha)`.
pub fn gat_layer_tape(tape: &mut GradTape, p: &GatVars, graph: &PatientGraph, h: Var) -> Result<(Var, Var)> {
    let (wh, alpha) = coefficients_tape(tape, p, graph, h)?;
    let msgs = tape.gather_rows(wh, graph.neighbor_index().clone())?;
    let weighted = tape.mul_col(msgs, alpha)?;
    let agg = tape.segment_sum(weighted, graph.offsets().clone())?;
    let pre = tape.add_row(agg, p.b)?;
    Ok((tape.leaky_relu(pre, p.slope), alpha))
}

/// Per-edge attention coefficients in CSR order, before rare reweighting.
pub fn gat_coefficients(graph: &PatientGraph, h: &Tensor2, params: &GatLayerParams) -> Result<Vec<f64>> {
    params.validate()?;
    let mut tape = GradTape::new();
    let mut p = params.register(&mut tape, false);
    p.rare_boost = 0.0;
    let hv = tape.constant(h.clone());
    let (_, alpha) = coefficients_tape(&mut tape, &p, graph, hv)?;
    Ok(tape.value(alpha).data().to_vec())
}

/// `alpha'_ij = alpha_ij (1 + boost r_j)` renormalised over each node's
/// neighbourhood.
pub fn reweight_rare(alpha: &[f64], graph: &PatientGraph, boost: f64) -> Result<Vec<f64>> {
    if alpha.len() != graph.n_edges() {
        return Err(Error::shape("reweight_rare", format!("{} coefficients", alpha.len()), format!("{} edges", graph.n_edges())));
    }
    if !(boost >= 0.0) {
        return Err(Error::Config(format!("rare boost must be >= 0, got {boost}")));
    }
    if boost == 0.0 {
        return Ok(alpha.to_vec());
    }
    let off = graph.offsets();
    let nb = graph.neighbor_index();
    let r = graph.rarity();
    let mut out = vec![0.0; alpha.len()];
    for i in 0..graph.n_nodes() {
        let span = off[i]..off[i + 1];
        let mut total = 0.0;
        for e in span.clone() {
            out[e] = alpha[e] * (1.0 + boost * r[nb[e]]);
            total += out[e];
        }
        for e in span {
            out[e] /= total;
        }
    }
    Ok(out)
}

pub fn gat_layer(graph: &PatientGraph, h: &Tensor2, params: &GatLayerParams) -> Result<Tensor2> {
    params.validate()?;
    let mut tape = GradTape::new();
    let p = params.register(&mut tape, false);
    let hv = tape.constant(h.clone());
    let (out, _) = gat_layer_tape(&mut tape, &p, graph, hv)?;
    Ok(tape.value(out).clone())
}

/// Mean of the rows listed in `subset`.
pub fn readout(h: &Tensor2, subset: &[usize]) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::Input("readout over an empty node subset".into()));
    }
    let mut acc = vec![0.0; h.cols()];
    for &i in subset {
        if i >= h.rows() {
            return Err(Error::Input(format!("node {i} outside {} rows", h.rows())));
        }
        for (a, x) in acc.iter_mut().zip(h.row(i)) {
            *a += x;
        }
    }
    let n = subset.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn self_loop_only_node_gets_full_weight() {
        let g = PatientGraph::self_loops(vec![0.0; 3]);
        let mut p = GatLayerParams::zeros(2, 2);
        p.w = Tensor2::identity(2);
        p.a = t(&[&[0.3], &[-1.0], &[2.0], &[0.5]]);
        let h = t(&[&[1.0, 2.0], &[0.5, 0.25], &[3.0, 1.0]]);
        assert_eq!(gat_coefficients(&g, &h, &p).unwrap(), vec![1.0; 3]);
        assert_eq!(gat_layer(&g, &h, &p).unwrap(), h);
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let g = PatientGraph::from_edges(3, &[(0, 1, 1.0), (0, 2, 1.0)], vec![0.0; 3]).unwrap();
        // Node 0 sees itself, 1 and 2; make all three identical.
        let h = t(&[&[1.0, -1.0], &[1.0, -1.0], &[1.0, -1.0]]);
        let mut p = GatLayerParams::zeros(2, 2);
        p.w = Tensor2::identity(2);
        p.a = t(&[&[0.4], &[0.1], &[-0.7], &[0.2]]);
        let alpha = gat_coefficients(&g, &h, &p).unwrap();
        for a in &alpha[..3] {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let g = PatientGraph::from_edges(2, &[(0, 1, 0.3), (1, 0, 0.3)], vec![0.0, 1.0]).unwrap();
        let out = gat_layer(&g, &t(&[&[1.0, 2.0], &[3.0, 4.0]]), &GatLayerParams::zeros(2, 3)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reweight_examples() {
        let g = PatientGraph::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)], vec![0.0, 1.0]).unwrap();
        let alpha = [0.5, 0.5, 0.25, 0.75];
        assert_eq!(reweight_rare(&alpha, &g, 0.0).unwrap(), alpha.to_vec());
        let out = reweight_rare(&alpha, &g, 1.0).unwrap();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15 && (out[1] - 2.0 / 3.0).abs() < 1e-15);
        let flat = PatientGraph::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)], vec![1.0, 1.0]).unwrap();
        let same = reweight_rare(&alpha, &flat, 3.0).unwrap();
        for (a, b) in same.iter().zip(alpha) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn boost_inside_layer_matches_post_hoc_reweight() {
        let g = PatientGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 1, 1.0), (1, 0, 1.0)], vec![0.0, 1.0, 1.0]).unwrap();
        let h = t(&[&[0.2, -0.4], &[1.0, 0.3], &[-0.5, 0.8]]);
        let mut p = GatLayerParams::zeros(2, 2);
        p.w = t(&[&[0.5, -0.2], &[0.1, 0.9]]);
        p.a = t(&[&[0.3], &[-0.6], &[0.8], &[0.4]]);
        let base = gat_coefficients(&g, &h, &p).unwrap();
        let expect = reweight_rare(&base, &g, 2.0).unwrap();
        p.rare_boost = 2.0;
        let mut tape = GradTape::new();
        let v = p.register(&mut tape, false);
        let hv = tape.constant(h.clone());
        let (_, alpha) = gat_layer_tape(&mut tape, &v, &g, hv).unwrap();
        for (a, b) in tape.value(alpha).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn readout_examples() {
        let h = t(&[&[1.0, 3.0], &[3.0, 5.0], &[9.0, 9.0]]);
        assert_eq!(readout(&h, &[0, 1]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(readout(&h, &[2]).unwrap(), vec![9.0, 9.0]);
        assert!(matches!(readout(&h, &[]), Err(Error::Input(_))));
    }
}
