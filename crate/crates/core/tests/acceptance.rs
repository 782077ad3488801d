//! Acceptance gate: eleven end-to-end criteria, each printed as one
//! pass/fail line with the measured quantity and its time budget.
//!
//! Runs without the libtest harness so the summary is always shown. Set
//! `ACCEPTANCE_ONLY=5,6` to run a subset.

mod common;

use cardiofed::evalkit::{self, Binning};
use cardiofed::experiment::{self, ExperimentConfig, Protocol};
use cardiofed::fedsim::toy::{logistic_data, LogisticToy};
use cardiofed::fedsim::{self, ClientState, RoundConfig};
use cardiofed::gat::{gat_layer, readout};
use cardiofed::model::{LossPart, ModelConfig, Network, StepContext};
use cardiofed::numerics::{finite_diff_check_coords, Tensor2};
use cardiofed::objective::{sigmoid, LossWeights};
use cardiofed::synthcohort::{generate_cohort, GeneratorConfig, Modality, PatientRecord};
use common::{brute_force_auc, dense_gat, median, random_gat, random_graph, random_tensor, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

type Criterion = (u32, &'static str, u64, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "gradient correctness", 120, gradient_correctness),
        (2, "fedavg equals centralized step", 10, fedavg_oracle),
        (3, "convergence diagnostic", 60, convergence_diagnostic),
        (4, "gat permutation and dense oracle", 30, gat_permutation),
        (5, "ablation direction", 900, ablation_direction),
        (6, "causal invariance benefit", 1200, causal_invariance),
        (7, "metric oracles", 60, metric_oracles),
        (8, "dp accountant", 5, dp_accountant),
        (9, "uncertainty coverage", 300, uncertainty_coverage),
        (10, "fairness sensitivity", 600, fairness_sensitivity),
        (11, "determinism across worker counts", 120, determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let in_budget = secs < budget as f64;
        let pass = v.pass && in_budget;
        println!(
            "criterion {id:>2} {name}: {} ({}; {secs:.1} s of {budget} s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn gradient_correctness() -> Verdict {
    let mut worst_task = 0.0_f64;
    let mut worst_mi = 0.0_f64;
    for seed in 0..100u64 {
        let gen = GeneratorConfig { n_patients: 12, seed, ..Default::default() };
        let records = generate_cohort(&gen).unwrap().records;
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let net = Network::new(ModelConfig::default(), &gen, seed).unwrap();
        let flat = net.init(seed + 1000);
        let mut r = rng(seed);
        let coords: Vec<usize> = (0..24).map(|_| r.random_range(0..net.layout().main_len)).collect();
        let check = |weights: LossWeights, ctx: StepContext| {
            let (_, g) = net.loss_grad(&flat, &refs, &weights, ctx, LossPart::All).unwrap();
            finite_diff_check_coords(|p| Ok(net.loss_grad(p, &refs, &weights, ctx, LossPart::All)?.0.total), &g, &flat, 1e-5, &coords).unwrap()
        };
        worst_task = worst_task.max(check(LossWeights::task_only(), StepContext::eval()));
        let mi = LossWeights { mi_weight: -0.05, causal_weight: 0.3, ..LossWeights::default() };
        worst_mi = worst_mi.max(check(mi, StepContext { seed, train: true }));
    }
    verdict(worst_task < 1e-4 && worst_mi < 1e-3, format!("task path max rel err {worst_task:.2e}, mi/vcmi path {worst_mi:.2e}, 100 seeds"))
}

fn logistic_grad_oracle(w: &[f64], data: &[(Vec<f64>, f64)], l2: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let mut g: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
    for (x, y) in data {
        let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += (sigmoid(z) - y) * xi / n;
        }
    }
    g
}

fn fedavg_oracle() -> Verdict {
    let true_w = [0.8, -1.2, 0.5, 0.3, -0.4];
    let data = logistic_data(1000, &true_w, 11);
    let clients: Vec<ClientState<(Vec<f64>, f64)>> = data.chunks(250).enumerate().map(|(k, c)| ClientState::new(k, c.to_vec()).unwrap()).collect();
    let obj = LogisticToy { dim: 5, l2: 0.01 };
    let init = vec![0.1, -0.2, 0.05, 0.0, 0.3];
    let cfg = RoundConfig { rounds: 1, local_epochs: 1, batch_size: 0, lr: 0.5, participation: 1.0, seed: 3 };
    let server = fedsim::train(&obj, init.clone(), &clients, &cfg, None, None).unwrap();
    let g = logistic_grad_oracle(&init, &data, 0.01);
    let central: Vec<f64> = init.iter().zip(&g).map(|(w, gi)| w - 0.5 * gi).collect();
    let diff = server.params.iter().zip(&central).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(diff < 1e-10, format!("max |federated - centralized| = {diff:.2e}"))
}

fn convergence_diagnostic() -> Verdict {
    let true_w = [1.0, -0.7, 0.4, 0.2];
    let mut data = logistic_data(1000, &true_w, 5);
    // Non-IID: clients hold contiguous slices of data sorted by the first feature.
    data.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
    let clients: Vec<ClientState<(Vec<f64>, f64)>> = data.chunks(250).enumerate().map(|(k, c)| ClientState::new(k, c.to_vec()).unwrap()).collect();
    let obj = LogisticToy { dim: 4, l2: 0.01 };
    let cfg = RoundConfig { rounds: 200, local_epochs: 1, batch_size: 32, lr: 0.05, participation: 1.0, seed: 9 };
    let trace: Vec<&(Vec<f64>, f64)> = data.iter().collect();
    let server = fedsim::train(&obj, vec![0.0; 4], &clients, &cfg, None, Some(&trace)).unwrap();
    let mins = fedsim::running_min(&server.grad_norm_trace);
    let ratio = mins[199] / server.grad_norm_trace[0];
    verdict(mins.len() == 200 && ratio < 0.1, format!("running-min grad norm ratio round 200 / round 1 = {ratio:.3e}"))
}

fn gat_permutation() -> Verdict {
    let mut worst_equi = 0.0_f64;
    let mut worst_inv = 0.0_f64;
    for t in 0..50u64 {
        let (graph, _, _) = random_graph(12, 0.3, 100 + t);
        let mut r = rng(t);
        let h = random_tensor(12, 4, &mut r);
        let p = random_gat(4, 3, 0.5, &mut r);
        let out = gat_layer(&graph, &h, &p).unwrap();
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut r);
        let mut hp = vec![vec![0.0; 4]; 12];
        for i in 0..12 {
            hp[perm[i]] = h.row(i).to_vec();
        }
        let outp = gat_layer(&graph.permuted(&perm).unwrap(), &Tensor2::from_rows(&hp).unwrap(), &p).unwrap();
        for i in 0..12 {
            for (a, b) in out.row(i).iter().zip(outp.row(perm[i])) {
                worst_equi = worst_equi.max((a - b).abs());
            }
        }
        let all: Vec<usize> = (0..12).collect();
        for (a, b) in readout(&out, &all).unwrap().iter().zip(readout(&outp, &all).unwrap()) {
            worst_inv = worst_inv.max((a - b).abs());
        }
    }
    let mut worst_dense = 0.0_f64;
    let mut graphs = 0;
    for n in 1..=12usize {
        for (k, prob) in [0.0, 0.2, 0.5, 1.0].into_iter().enumerate() {
            for rep in 0..5u64 {
                let seed = (n as u64) * 1000 + k as u64 * 10 + rep;
                let (graph, adj, rarity) = random_graph(n, prob, seed);
                let mut r = rng(seed);
                let h = random_tensor(n, 3, &mut r);
                let p = random_gat(3, 2, if rep % 2 == 0 { 0.0 } else { 0.7 }, &mut r);
                let sparse = gat_layer(&graph, &h, &p).unwrap();
                let dense = dense_gat(&adj, &rarity, &h, &p);
                for (i, row) in dense.iter().enumerate() {
                    for (a, b) in sparse.row(i).iter().zip(row) {
                        worst_dense = worst_dense.max((a - b).abs());
                    }
                }
                graphs += 1;
            }
        }
    }
    verdict(
        worst_equi < 1e-12 && worst_inv < 1e-12 && worst_dense < 1e-12,
        format!("equivariance {worst_equi:.1e}, invariance {worst_inv:.1e} over 50 perms; dense oracle {worst_dense:.1e} over {graphs} graphs"),
    )
}

/// Shared settings for the model-level criteria: 4000 patients over four
/// sites, 30 rounds of one local epoch.
fn base_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, protocol: Protocol::Holdout, ..Default::default() };
    cfg.cohort.n_patients = 4000;
    cfg.cohort.n_sites = 4;
    cfg.rounds = RoundConfig { rounds: 30, local_epochs: 1, batch_size: 64, lr: 0.05, participation: 1.0, seed: 0 };
    cfg.eval.mc_passes = 0;
    cfg.eval.shapley_patients = 0;
    cfg
}

fn ablation_direction() -> Verdict {
    let drops = [Modality::Ecg, Modality::Mri, Modality::Genomics, Modality::Ehr];
    let mut margins = vec![Vec::new(); drops.len()];
    for seed in 1..=5u64 {
        let mut cfg = base_config(seed);
        // Every modality carries its own signal; no confounder shortcut.
        cfg.cohort.spurious_strength = 0.0;
        let table = experiment::run_ablation(&cfg, &drops).unwrap();
        for (m, row) in table.rows[1..].iter().enumerate() {
            margins[m].push(-row.delta.unwrap());
        }
    }
    let medians: Vec<f64> = margins.into_iter().map(median).collect();
    let worst = medians.iter().cloned().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = drops.iter().zip(&medians).map(|(m, v)| format!("{} {v:.3}", m.name())).collect();
    verdict(worst >= 0.02, format!("median full-minus-dropped AUC: {}", shown.join(", ")))
}

fn causal_invariance() -> Verdict {
    let mut gains = Vec::new();
    let mut drops_plain = Vec::new();
    let mut drops_vcmi = Vec::new();
    for seed in 1..=5u64 {
        let drop = |mu: f64| {
            let mut cfg = base_config(seed);
            cfg.cohort.spurious_strength = 0.8;
            cfg.ood_spurious = -0.8;
            cfg.protocol = Protocol::OodShift { spurious: -0.8 };
            cfg.loss.causal_weight = mu;
            experiment::run_experiment(&cfg).unwrap().report.shift.unwrap().auc_drop.unwrap()
        };
        let (plain, vcmi) = (drop(0.0), drop(1.0));
        drops_plain.push(plain);
        drops_vcmi.push(vcmi);
        gains.push(plain - vcmi);
    }
    let g = median(gains);
    verdict(
        g >= 0.03,
        format!("median drop mu=0 {:.3}, mu=1 {:.3}, median paired reduction {g:.3}", median(drops_plain), median(drops_vcmi)),
    )
}

fn metric_oracles() -> Verdict {
    let mut r = rng(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..=200);
        let coarse = r.random_bool(0.5);
        let scores: Vec<f64> = (0..n).map(|_| if coarse { f64::from(r.random_range(0..5u8)) / 4.0 } else { r.random::<f64>() }).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        if evalkit::roc_auc(&scores, &labels).unwrap() != brute_force_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    // Bins 0, 1, 2 hold one patient each; bin 9 holds two with confidence
    // 0.935 and accuracy 0.5.
    let risk = [0.05, 0.15, 0.25, 0.95, 0.92];
    let labels = [0, 0, 1, 1, 0];
    let ece_err = (evalkit::ece(&risk, &labels, 10, Binning::EqualWidth).unwrap() - 0.364).abs();
    let brier_err = (evalkit::brier(&risk, &labels).unwrap() - 0.28728).abs();
    let mut shap_err = 0.0_f64;
    for n in 1..=10usize {
        let values: Vec<f64> = (0..1usize << n).map(|_| r.random_range(-2.0..2.0)).collect();
        let phi = evalkit::shapley_from_values(n, &values).unwrap();
        let gap = phi.iter().sum::<f64>() - (values[(1 << n) - 1] - values[0]);
        shap_err = shap_err.max(gap.abs());
    }
    verdict(
        mismatches == 0 && ece_err < 1e-12 && brier_err < 1e-12 && shap_err < 1e-10,
        format!("auc mismatches {mismatches}/1000, ece err {ece_err:.1e}, brier err {brier_err:.1e}, shapley efficiency err {shap_err:.1e}"),
    )
}

fn dp_accountant() -> Verdict {
    let eps = fedsim::epsilon(0.01, 10_000, 1e-5, 1.0).unwrap();
    let mut r = rng(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let q = r.random_range(0.001..0.5);
        let t = r.random_range(1..100_000u64);
        let delta = r.random_range(1e-9..1e-2);
        let sigma = r.random_range(0.3..5.0);
        let base = fedsim::epsilon(q, t, delta, sigma).unwrap();
        let ok = fedsim::epsilon(q * 1.5_f64.min(1.0 / q), t, delta, sigma).unwrap() >= base
            && fedsim::epsilon(q, t + 1, delta, sigma).unwrap() > base
            && fedsim::epsilon(q, t, delta / 2.0, sigma).unwrap() > base
            && fedsim::epsilon(q, t, delta, sigma * 1.1).unwrap() < base;
        if !ok {
            violations += 1;
        }
    }
    verdict((eps - 4.80).abs() <= 0.01 && violations == 0, format!("epsilon {eps:.4}, monotonicity violations {violations}/1000"))
}

fn uncertainty_coverage() -> Verdict {
    let mut covs = Vec::new();
    let mut rates = Vec::new();
    let mut decile_means = Vec::new();
    for seed in 1..=3u64 {
        let mut cfg = base_config(seed);
        cfg.cohort.spurious_strength = 0.0;
        cfg.test_fraction = 0.5;
        // Intervals must cover the generative probability, so the fit has to
        // be close to it; the short schedule leaves bias that dropout alone
        // cannot span.
        cfg.rounds.rounds = 60;
        cfg.rounds.local_epochs = 3;
        let cohort = experiment::prepare_cohort(&cfg).unwrap();
        let seeds = cfg.seeds();
        let (train, held) = experiment::holdout_split(&cohort.records, cfg.test_fraction, seeds.split);
        let model = experiment::train_federated(&cfg, &train).unwrap();
        let (calib, test): (Vec<PatientRecord>, Vec<PatientRecord>) = {
            let (a, b): (Vec<_>, Vec<_>) = held.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
            (a.into_iter().map(|x| x.1).collect(), b.into_iter().map(|x| x.1).collect())
        };
        let rate = evalkit::calibrate_dropout_rate(&model.net, &model.params, &calib, 50, 0.95, 0.9, 8, seeds.mc).unwrap();
        let preds = evalkit::mc_dropout_predict(&model.net, &model.params, &test, 50, rate, seeds.mc ^ 1).unwrap();
        let truth: Vec<f64> = test.iter().map(|p| p.true_risk).collect();
        let outcomes: Vec<u8> = test.iter().map(|p| p.outcome).collect();
        let intervals: Vec<(f64, f64)> = preds.iter().map(|m| (m.lower, m.upper)).collect();
        covs.push(evalkit::coverage(&intervals, &truth).unwrap());
        let deciles = evalkit::coverage_by_decile(&preds, &truth, &outcomes).unwrap();
        decile_means.push(deciles.iter().map(|d| d.coverage).sum::<f64>() / deciles.len() as f64);
        rates.push(rate);
    }
    let c = median(covs.clone());
    verdict(
        (0.90..=0.99).contains(&c),
        format!(
            "median coverage {c:.3} (per seed {:?}), mean decile coverage {:.3}, calibrated rates {:?}",
            covs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            median(decile_means),
            rates.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn fairness_sensitivity() -> Verdict {
    let multipliers = [1.0, 2.0, 4.0];
    let mut model_gaps = vec![Vec::new(); 3];
    let mut oracle_worst = vec![Vec::new(); 3];
    for seed in 1..=10u64 {
        let mut cfg = base_config(seed);
        cfg.cohort.n_patients = 8000;
        cfg.test_fraction = 0.5;
        cfg.eval.fairness_multipliers = multipliers.to_vec();
        let sweep = experiment::run_fairness_sweep(&cfg).unwrap();
        for (i, p) in sweep.model.iter().enumerate() {
            model_gaps[i].push(p.report.as_ref().unwrap().delta_auc);
        }
        for (i, p) in sweep.oracle.iter().enumerate() {
            let f = p.report.as_ref().unwrap();
            oracle_worst[i].push(f.delta_auc.max(f.parity_gap).max(f.equal_opportunity_gap));
        }
    }
    let m: Vec<f64> = model_gaps.into_iter().map(median).collect();
    let o: Vec<f64> = oracle_worst.into_iter().map(median).collect();
    let monotone = m.windows(2).all(|w| w[0] <= w[1]);
    let oracle_max = o.iter().cloned().fold(0.0, f64::max);
    verdict(
        monotone && oracle_max <= 0.05,
        format!("median model delta-AUC {:.4} / {:.4} / {:.4}; oracle median max gap {oracle_max:.4}", m[0], m[1], m[2]),
    )
}

fn determinism() -> Verdict {
    let mut cfg = ExperimentConfig { seed: 21, ..Default::default() };
    cfg.cohort.n_patients = 300;
    cfg.cohort.n_sites = 3;
    cfg.protocol = Protocol::Kfold(3);
    cfg.rounds = RoundConfig { rounds: 4, local_epochs: 2, batch_size: 32, lr: 0.05, participation: 1.0, seed: 0 };
    cfg.dp = Some(fedsim::DpConfig { clip_norm: 1.0, noise_multiplier: 0.5, delta: 1e-5, noise_seed: 0 });
    cfg.eval.mc_passes = 10;
    cfg.eval.shapley_patients = 3;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = experiment::run_experiment(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            experiment::write_run_artifacts(dir.path(), &cfg, &out).unwrap();
            experiment::ARTIFACTS.iter().map(|a| std::fs::read(dir.path().join(a)).unwrap()).collect::<Vec<_>>()
        })
    };
    let one = run(1);
    let four = run(4);
    let again = run(4);
    let same = one == four && four == again;
    verdict(same, format!("{} artifacts byte-identical across 1, 4 and 4 workers", experiment::ARTIFACTS.len()))
}
