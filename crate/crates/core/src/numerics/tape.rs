//! Reverse-mode gradient tape scoped to a single forward pass.
//!
//! A [`GradTape`] records every primitive applied during one forward pass.
//! [`GradTape::backward`] consumes the tape, so each recorded pass is replayed
//! backward exactly once, in exact reverse order of recording.

use super::cca;
use super::tensor::{layer_norm_stats, matmul_raw, softmax_in_place, Tensor2};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// CSR segment boundaries: segment `i` spans `offsets[i]..offsets[i + 1]`.
pub type Segments = Arc<[usize]>;

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Segments),
    SegmentSum(Var, Segments),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tq: usize,
        tk: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    BceWithLogits(Var, Vec<f64>),
    LogSoftmaxPick(Var, Vec<usize>, Vec<f64>),
    GaussianMi(Var, Var, Box<cca::CcaCache>),
}

struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Per-pass operation record.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var, rows: usize, cols: usize) -> Tensor2 {
        self.get(v).cloned().unwrap_or_else(|| Tensor2::zeros(rows, cols))
    }
}

fn check_same(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape_str(), b.shape_str()));
    }
    Ok(())
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (parameter or input feature).
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape_str(), bv.shape_str()));
        }
        let out = Tensor2::from_raw(
            av.rows(),
            bv.cols(),
            matmul_raw(av.data(), av.rows(), av.cols(), bv.data(), bv.cols()),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor2::from_raw(av.rows(), av.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `a + 1 r` for a `1 x cols` row vector `r`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape_str(), rv.shape_str()));
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(rv.data()) {
                    *x += y;
                }
            }
        }
        let out = Tensor2::from_raw(av.rows(), c, data);
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(out, Op::AddRow(a, r), ng))
    }

    /// Scales row `i` of `a` by `s[i]` for an `rows x 1` column `s`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != av.rows() {
            return Err(Error::shape("mul_col", av.shape_str(), sv.shape_str()));
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for (i, &w) in sv.data().iter().enumerate() {
            for x in &mut data[i * c..(i + 1) * c] {
                *x *= w;
            }
        }
        let out = Tensor2::from_raw(av.rows(), c, data);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::MulCol(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let av = self.value(a);
        let out = Tensor2::from_raw(av.rows(), av.cols(), av.data().iter().map(|x| x * k).collect());
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::tensor::softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise layer norm with `1 x cols` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(Error::shape(
                "layer_norm_rows",
                xv.shape_str(),
                format!("gain {}, bias {}", gv.shape_str(), bv.shape_str()),
            ));
        }
        let mut out = Vec::with_capacity(xv.data().len());
        let mut xhat_all = Vec::with_capacity(xv.data().len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (_, is, xh) = layer_norm_stats(xv.row(r), eps);
            for j in 0..c {
                out.push(xh[j] * gv.data()[j] + bv.data()[j]);
            }
            xhat_all.extend_from_slice(&xh);
            inv_std.push(is);
        }
        let out = Tensor2::from_raw(xv.rows(), c, out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm { x, gain, bias, xhat: xhat_all, inv_std },
            ng,
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value(a);
        let out = Tensor2::from_raw(
            av.rows(),
            av.cols(),
            av.data().iter().map(|&x| super::tensor::leaky_relu(x, slope)).collect(),
        );
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor2::from_raw(av.rows(), av.cols(), av.data().iter().map(|x| x.exp()).collect());
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor2::from_raw(av.rows(), av.cols(), av.data().iter().map(|x| x.ln()).collect());
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor2::from_raw(1, 1, vec![s]), Op::Sum(a), ng)
    }

    /// Mean of all entries as a `1 x 1` value.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.data().len() as f64;
        let ng = self.ng(a);
        self.push(Tensor2::from_raw(1, 1, vec![s]), Op::Mean(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), pv.shape_str()));
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor2::from_raw(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::shape("slice_cols", av.shape_str(), format!("cols {start}..{}", start + len)));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor2::from_raw(av.rows(), len, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::shape("slice_rows", av.shape_str(), format!("rows {start}..{}", start + len)));
        }
        let c = av.cols();
        let out = Tensor2::from_raw(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Row `e` of the output is row `idx[e]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape("gather_rows", av.shape_str(), format!("row index {bad}")));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor2::from_raw(idx.len(), c, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, idx), ng))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &Segments) -> Result<()> {
        let av = self.value(a);
        let ok = seg.first() == Some(&0)
            && seg.last() == Some(&av.rows())
            && seg.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::shape(op, av.shape_str(), format!("{} segment offsets", seg.len())));
        }
        Ok(())
    }

    /// Softmax of an `E x 1` column within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: Segments) -> Result<Var> {
        self.check_segments("segment_softmax", a, &seg)?;
        let av = self.value(a);
        if av.cols() != 1 {
            return Err(Error::shape("segment_softmax", av.shape_str(), "E x 1"));
        }
        let mut data = av.data().to_vec();
        for w in seg.windows(2) {
            if w[1] > w[0] {
                softmax_in_place(&mut data[w[0]..w[1]]);
            }
        }
        let out = Tensor2::from_raw(av.rows(), 1, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, seg), ng))
    }

    /// Row sums within each segment, in ascending row order.
    pub fn segment_sum(&mut self, a: Var, seg: Segments) -> Result<Var> {
        self.check_segments("segment_sum", a, &seg)?;
        let av = self.value(a);
        let c = av.cols();
        let n = seg.len() - 1;
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let out = &mut data[i * c..(i + 1) * c];
            for e in seg[i]..seg[i + 1] {
                for (o, x) in out.iter_mut().zip(av.row(e)) {
                    *o += x;
                }
            }
        }
        let out = Tensor2::from_raw(n, c, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentSum(a, seg), ng))
    }

    /// Grouped scaled dot-product attention.
    ///
    /// Rows of `q` form groups of `tq` queries and rows of `k`/`v` groups of
    /// `tk` keys; group `g` computes `softmax(Q_g K_g^T * scale) V_g`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tq: usize, tk: usize, scale: f64) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let bad = qv.cols() != kv.cols()
            || kv.rows() != vv.rows()
            || tq == 0
            || tk == 0
            || qv.rows() % tq != 0
            || kv.rows() % tk != 0
            || qv.rows() / tq != kv.rows() / tk;
        if bad {
            return Err(Error::shape(
                "attention",
                format!("Q {} (tq {tq})", qv.shape_str()),
                format!("K {}, V {} (tk {tk})", kv.shape_str(), vv.shape_str()),
            ));
        }
        let groups = qv.rows() / tq;
        let dv = vv.cols();
        let mut probs = vec![0.0; groups * tq * tk];
        let mut out = vec![0.0; groups * tq * dv];
        for g in 0..groups {
            for i in 0..tq {
                let qi = qv.row(g * tq + i);
                let prow = &mut probs[(g * tq + i) * tk..(g * tq + i + 1) * tk];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = kv.row(g * tk + j);
                    *p = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(g * tq + i) * dv..(g * tq + i + 1) * dv];
                for (j, &p) in prow.iter().enumerate() {
                    for (o, x) in orow.iter_mut().zip(vv.row(g * tk + j)) {
                        *o += p * x;
                    }
                }
            }
        }
        let out = Tensor2::from_raw(groups * tq, dv, out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, tq, tk, scale, probs }, ng))
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// row-major `(groups * tq) x tk`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean binary cross-entropy of `n x 1` logits against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 1 || lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce_with_logits", lv.shape_str(), format!("{} targets", targets.len())));
        }
        let loss = crate::objective::bce_terms(lv.data(), targets).sum::<f64>() / targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(Tensor2::from_raw(1, 1, vec![loss]), Op::BceWithLogits(logits, targets.to_vec()), ng))
    }

    /// `out[i] = log_softmax(logits[i])[labels[i]]`, an `n x 1` column.
    pub fn log_softmax_pick(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.rows() != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("log_softmax_pick", lv.shape_str(), format!("{} labels", labels.len())));
        }
        let mut soft = lv.data().to_vec();
        let mut out = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(row[l] - lse);
            softmax_in_place(&mut soft[i * c..(i + 1) * c]);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor2::from_raw(labels.len(), 1, out),
            Op::LogSoftmaxPick(logits, labels.to_vec(), soft),
            ng,
        ))
    }

    /// Gaussian mutual information between two row-aligned batches (`1 x 1`).
    pub fn gaussian_mi(&mut self, zm: Var, zn: Var) -> Result<Var> {
        let (a, b) = (self.value(zm), self.value(zn));
        if a.rows() != b.rows() || a.rows() < 2 {
            return Err(Error::shape("gaussian_mi", a.shape_str(), b.shape_str()));
        }
        let (mi, cache) = cca::forward(a.data(), b.data(), a.rows(), a.cols(), b.cols());
        let ng = self.ng(zm) || self.ng(zn);
        Ok(self.push(Tensor2::from_raw(1, 1, vec![mi]), Op::GaussianMi(zm, zn, Box::new(cache)), ng))
    }

    /// Replay the tape backward from the scalar `output`.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::shape("backward", format!("{}x{}", out_shape.0, out_shape.1), "1x1"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor2::from_raw(node.value.rows(), node.value.cols(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.data().len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, |ga| {
                    // dA = dC B^T
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = bv.row(kk);
                            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    // dB = A^T dC
                    for i in 0..m {
                        let arow = av.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        for (kk, &aik) in arow.iter().enumerate() {
                            if aik == 0.0 {
                                continue;
                            }
                            for (o, &x) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += aik * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += x * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let c = out.cols();
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *r, |gr| {
                    if c > 0 {
                        for row in g.chunks(c) {
                            add_into(gr, row);
                        }
                    }
                });
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let c = av.cols();
                self.acc(grads, *a, |ga| {
                    for (i, &w) in sv.data().iter().enumerate() {
                        for j in i * c..(i + 1) * c {
                            ga[j] += g[j] * w;
                        }
                    }
                });
                self.acc(grads, *s, |gs| {
                    for (i, o) in gs.iter_mut().enumerate() {
                        *o += (i * c..(i + 1) * c).map(|j| g[j] * av.data()[j]).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += k * x;
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = out.cols();
                let gv = self.value(*gain).data().to_vec();
                self.acc(grads, *gain, |gg| {
                    for r in 0..out.rows() {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    if c > 0 {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    let cf = c as f64;
                    for r in 0..out.rows() {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[r * c + j] * gv[j]).collect();
                        let xh = &xhat[r * c..(r + 1) * c];
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] / cf * (cf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, x), &inp) in ga.iter_mut().zip(g).zip(av.data()) {
                        *o += if inp >= 0.0 { *x } else { slope * x };
                    }
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(av.data()) {
                        *o += x / y;
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                self.acc(grads, *a, |ga| {
                    let k = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += k);
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for r in 0..out.rows() {
                            add_into(&mut gp[r * pc..(r + 1) * pc], &g[r * total + offset..r * total + offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols();
                let len = out.cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..out.rows() {
                        add_into(&mut ga[r * ac + start..r * ac + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                self.acc(grads, *a, |ga| add_into(&mut ga[start * c..start * c + g.len()], g));
            }
            Op::Transpose(a) => {
                let (r, c) = out.shape();
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                self.acc(grads, *a, |ga| {
                    for (e, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[e * c..(e + 1) * c]);
                    }
                });
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for w in seg.windows(2) {
                        let dot: f64 = (w[0]..w[1]).map(|e| y[e] * g[e]).sum();
                        for e in w[0]..w[1] {
                            ga[e] += y[e] * (g[e] - dot);
                        }
                    }
                });
            }
            Op::SegmentSum(a, seg) => {
                let c = out.cols();
                self.acc(grads, *a, |ga| {
                    for (i, w) in seg.windows(2).enumerate() {
                        for e in w[0]..w[1] {
                            add_into(&mut ga[e * c..(e + 1) * c], &g[i * c..(i + 1) * c]);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, tq, tk, scale, probs } => {
                self.attention_backward(*q, *k, *v, *tq, *tk, *scale, probs, g, grads);
            }
            Op::BceWithLogits(logits, targets) => {
                let lv = self.value(*logits);
                let n = targets.len() as f64;
                self.acc(grads, *logits, |gl| {
                    for ((o, &z), &y) in gl.iter_mut().zip(lv.data()).zip(targets) {
                        *o += g[0] * (crate::objective::sigmoid(z) - y) / n;
                    }
                });
            }
            Op::LogSoftmaxPick(logits, labels, soft) => {
                let c = self.value(*logits).cols();
                self.acc(grads, *logits, |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[i] * (onehot - soft[i * c + j]);
                        }
                    }
                });
            }
            Op::GaussianMi(zm, zn, cache) => {
                let (dm, dn) = cca::backward(cache, g[0]);
                self.acc(grads, *zm, |gz| add_into(gz, &dm));
                self.acc(grads, *zn, |gz| add_into(gz, &dn));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        tq: usize,
        tk: usize,
        scale: f64,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let groups = qv.rows() / tq;
        let dk = qv.cols();
        let dv = vv.cols();
        let mut dq = vec![0.0; qv.data().len()];
        let mut dkm = vec![0.0; kv.data().len()];
        let mut dvm = vec![0.0; vv.data().len()];
        for grp in 0..groups {
            for i in 0..tq {
                let row = grp * tq + i;
                let p = &probs[row * tk..(row + 1) * tk];
                let go = &g[row * dv..(row + 1) * dv];
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                let mut dp = vec![0.0; tk];
                for j in 0..tk {
                    let vrow = grp * tk + j;
                    dp[j] = go.iter().zip(vv.row(vrow)).map(|(a, b)| a * b).sum();
                    for (o, x) in dvm[vrow * dv..(vrow + 1) * dv].iter_mut().zip(go) {
                        *o += p[j] * x;
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = grp * tk + j;
                    for c in 0..dk {
                        dq[row * dk + c] += ds * kv.get(krow, c);
                        dkm[krow * dk + c] += ds * qv.get(row, c);
                    }
                }
            }
        }
        self.acc(grads, q, |gq| add_into(gq, &dq));
        self.acc(grads, k, |gk| add_into(gk, &dkm));
        self.acc(grads, v, |gv| add_into(gv, &dvm));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
