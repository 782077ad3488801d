//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cardiofed::gat::GatLayerParams;
use cardiofed::numerics::Tensor2;
use cardiofed::synthcohort::PatientGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Pairwise count over every (positive, negative) pair, ties counting half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Dense masked-softmax graph attention: every logit is computed, non-edges
/// are masked out, rows are softmaxed and aggregated.
pub fn dense_gat(adjacency: &[Vec<bool>], rarity: &[f64], h: &Tensor2, p: &GatLayerParams) -> Vec<Vec<f64>> {
    let n = h.rows();
    let d = p.d_out();
    let wh: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|c| (0..h.cols()).map(|k| h.get(i, k) * p.w.get(k, c)).sum()).collect())
        .collect();
    let dot = |v: &[f64], offset: usize| -> f64 { v.iter().enumerate().map(|(c, x)| x * p.a.get(offset + c, 0)).sum() };
    (0..n)
        .map(|i| {
            let logits: Vec<Option<f64>> = (0..n)
                .map(|j| adjacency[i][j].then(|| leaky(dot(&wh[i], 0) + dot(&wh[j], d), p.slope)))
                .collect();
            let max = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |v| (v - max).exp())).collect();
            for (j, w) in weights.iter_mut().enumerate() {
                *w *= 1.0 + p.rare_boost * rarity[j];
            }
            let total: f64 = weights.iter().sum();
            (0..d)
                .map(|c| {
                    let agg: f64 = (0..n).map(|j| weights[j] / total * wh[j][c]).sum();
                    leaky(agg + p.b.get(0, c), p.slope)
                })
                .collect()
        })
        .collect()
}

/// Random symmetric graph with self loops, its dense adjacency and rarity.
pub fn random_graph(n: usize, edge_prob: f64, seed: u64) -> (PatientGraph, Vec<Vec<bool>>, Vec<f64>) {
    let mut r = rng(seed);
    let mut adj = vec![vec![false; n]; n];
    let mut edges = Vec::new();
    for i in 0..n {
        adj[i][i] = true;
        for j in i + 1..n {
            if r.random_bool(edge_prob) {
                adj[i][j] = true;
                adj[j][i] = true;
                let w = r.random_range(0.1..1.0);
                edges.push((i, j, w));
                edges.push((j, i, w));
            }
        }
    }
    let rarity: Vec<f64> = (0..n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let graph = PatientGraph::from_edges(n, &edges, rarity.clone()).expect("valid graph");
    (graph, adj, rarity)
}

pub fn random_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_gat(d_in: usize, d_out: usize, boost: f64, r: &mut ChaCha8Rng) -> GatLayerParams {
    GatLayerParams {
        w: random_tensor(d_in, d_out, r),
        a: random_tensor(2 * d_out, 1, r),
        b: random_tensor(1, d_out, r),
        slope: 0.2,
        rare_boost: boost,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
