//! Patient-similarity graphs.

use super::PatientRecord;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

/// Per-field weights of the similarity distance.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GraphFeatureWeights {
    pub genotype: f64,
    pub ehr: f64,
    pub demographic: f64,
}

impl Default for GraphFeatureWeights {
    fn default() -> Self {
        Self { genotype: 1.0, ehr: 1.0, demographic: 1.0 }
    }
}

/// Weighted undirected graph in CSR form; each node's neighbour list includes
/// itself and is sorted by neighbour index.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientGraph {
    offsets: Arc<[usize]>,
    neighbors: Arc<[usize]>,
    weights: Vec<f64>,
    rarity: Vec<f64>,
}

/// Most nodes used to estimate the distance bandwidth.
pub const BANDWIDTH_SAMPLE: usize = 256;

impl PatientGraph {
    /// Graph with one weight-1 self-loop per node.
    pub fn self_loops(rarity: Vec<f64>) -> Self {
        let n = rarity.len();
        Self {
            offsets: (0..=n).collect(),
            neighbors: (0..n).collect(),
            weights: vec![1.0; n],
            rarity,
        }
    }

    /// Build from directed `(i, j, w)` triples. Duplicate pairs keep the
    /// larger weight; missing self-loops are added with weight 1.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], rarity: Vec<f64>) -> Result<Self> {
        if rarity.len() != n {
            return Err(Error::shape("PatientGraph::from_edges", format!("{n} nodes"), format!("{} rarity scores", rarity.len())));
        }
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::Input(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Input(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            let e = adj[i].entry(j).or_insert(w);
            *e = e.max(w);
        }
        for (i, a) in adj.iter_mut().enumerate() {
            a.entry(i).or_insert(1.0);
        }
        Ok(Self::from_adjacency(adj, rarity))
    }

    fn from_adjacency(adj: Vec<BTreeMap<usize, f64>>, rarity: Vec<f64>) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for a in adj {
            for (j, w) in a {
                neighbors.push(j);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Self { offsets: offsets.into(), neighbors: neighbors.into(), weights, rarity }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len()
    }

    pub fn rarity(&self) -> &[f64] {
        &self.rarity
    }

    pub fn offsets(&self) -> &Arc<[usize]> {
        &self.offsets
    }

    /// Neighbour index of every stored edge, grouped by target node.
    pub fn neighbor_index(&self) -> &Arc<[usize]> {
        &self.neighbors
    }

    pub fn neighbors(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.neighbors[a..b], &self.weights[a..b])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// All stored `(i, j, w)` in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_nodes()).flat_map(move |i| {
            let (nb, w) = self.neighbors(i);
            nb.iter().zip(w).map(move |(&j, &w)| (i, j, w))
        })
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let (nb, w) = self.neighbors(i);
        nb.binary_search(&j).ok().map(|p| w[p])
    }

    /// Relabel node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input("permutation is not a bijection on the nodes".into()));
        }
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        let mut rarity = vec![0.0; n];
        for (i, j, w) in self.edges() {
            adj[perm[i]].insert(perm[j], w);
        }
        for (i, &r) in self.rarity.iter().enumerate() {
            rarity[perm[i]] = r;
        }
        Ok(Self::from_adjacency(adj, rarity))
    }

    /// Edge list: a `nodes <n>` header then one `i j weight` line per edge.
    pub fn write_edge_list(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "nodes {}", self.n_nodes())?;
        for (i, j, wt) in self.edges() {
            writeln!(w, "{i} {j} {wt}")?;
        }
        Ok(())
    }
}

fn node_features(records: &[PatientRecord], weights: &GraphFeatureWeights) -> Vec<Vec<f64>> {
    let groups = records.iter().map(|r| r.group + 1).max().unwrap_or(1);
    let (sg, se, sd) = (weights.genotype.sqrt(), weights.ehr.sqrt(), weights.demographic.sqrt());
    records
        .iter()
        .map(|r| {
            let mut f: Vec<f64> = r.genotype.iter().map(|&g| sg * f64::from(g)).collect();
            f.extend(r.x_ehr.iter().map(|x| se * x));
            f.extend((0..groups).map(|g| if g == r.group { sd } else { 0.0 }));
            f
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median pairwise distance over an evenly strided sample of at most
/// [`BANDWIDTH_SAMPLE`] nodes; 1 when every sampled distance is zero.
fn bandwidth(feats: &[Vec<f64>]) -> f64 {
    let n = feats.len();
    let m = n.min(BANDWIDTH_SAMPLE);
    let sample: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    let mut d = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for a in 0..m {
        for b in a + 1..m {
            d.push(sq_dist(&feats[sample[a]], &feats[sample[b]]).sqrt());
        }
    }
    let s = median(d);
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// k-nearest-neighbour similarity graph.
///
/// Distances are Euclidean over `sqrt(weight)`-scaled genotype, EHR and group
/// one-hot features; ties are broken by index. Edge weight is
/// `exp(-d^2 / sigma^2)`, the graph is symmetrised by the larger weight and
/// every node gets a weight-1 self-loop.
pub fn build_similarity_graph(records: &[PatientRecord], k: usize, weights: &GraphFeatureWeights) -> Result<PatientGraph> {
    let n = records.len();
    if n == 0 {
        return Err(Error::Input("cannot build a graph over zero patients".into()));
    }
    if k >= n {
        return Err(Error::Config(format!("k_neighbors {k} must be < number of patients {n}")));
    }
    for w in [weights.genotype, weights.ehr, weights.demographic] {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Config(format!("graph feature weight must be finite and >= 0, got {w}")));
        }
    }
    let rarity: Vec<f64> = records.iter().map(|r| r.rarity).collect();
    if k == 0 {
        return Ok(PatientGraph::self_loops(rarity));
    }
    let feats = node_features(records, weights);
    let sigma2 = bandwidth(&feats).powi(2);
    let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(&feats[i], &feats[j]), j)));
        cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, j) in &cand[..k] {
            let w = (-d2 / sigma2).exp();
            for (a, b) in [(i, j), (j, i)] {
                let e = adj[a].entry(b).or_insert(w);
                *e = e.max(w);
            }
        }
    }
    for (i, a) in adj.iter_mut().enumerate() {
        a.insert(i, 1.0);
    }
    Ok(PatientGraph::from_adjacency(adj, rarity))
}
