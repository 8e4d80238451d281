//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

use std::io::Write;
use std::time::{Duration, Instant};

use drgossip::datagen::{
    gaussian_mixture, gaussian_mixture_with_spreads, partition_pathological, DeviceRng, LabeledDataset,
};
use drgossip::model::{init_params, loss_and_grad, mean_loss, ModelSpec, ParamVector};
use drgossip::robust::{bias_probe, kl_worst_case_weights, penalized_objective, robust_objective};
use drgossip::topology::{contraction_check, generate_erdos_renyi, metropolis_weights, Graph};
use drgossip::trainer::{
    consensus_distance, mix, write_metrics_csv, Algorithm, MetricsRow, ParamMatrix, Simulation, TrainConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_connected_er(rng: &mut ChaCha8Rng) -> Graph {
    let k = rng.random_range(4..=32);
    let p = rng.random_range(0.2..=0.9);
    generate_erdos_renyi(k, p, rng.random()).unwrap()
}

fn mixing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_rho: f64 = 0.0;
    for _ in 0..100 {
        let g = random_connected_er(&mut rng);
        let w = metropolis_weights(&g).unwrap();
        let m = w.entries();
        let k = g.num_nodes();
        for i in 0..k {
            let row: f64 = (0..k).map(|j| m[(i, j)]).sum();
            let col: f64 = (0..k).map(|j| m[(j, i)]).sum();
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return outcome(false, format!("row/col sum off at node {i}"));
            }
            for j in 0..k {
                if m[(i, j)] != m[(j, i)] {
                    return outcome(false, "asymmetric");
                }
                if i != j && !g.has_edge(i, j) && m[(i, j)] != 0.0 {
                    return outcome(false, "weight off the edge set");
                }
            }
        }
        worst_rho = worst_rho.max(w.spectral_norm());
    }
    outcome(worst_rho < 1.0, format!("100 graphs, max rho {worst_rho:.4}"))
}

fn contraction_inequality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_slack = f64::NEG_INFINITY;
    for _ in 0..100 {
        let g = random_connected_er(&mut rng);
        let w = metropolis_weights(&g).unwrap();
        let d = rng.random_range(1..=6);
        let a = DMatrix::from_fn(d, g.num_nodes(), |_, _| rng.random_range(-2.0..2.0));
        let (lhs, rhs) = contraction_check(&a, &w, rng.random_range(1..=5));
        worst_slack = worst_slack.max(lhs - rhs);
    }
    let path = metropolis_weights(&Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()).unwrap();
    let rho_err = (path.spectral_norm() - 4.0 / 9.0).abs();
    outcome(
        worst_slack <= 1e-9 && rho_err <= 1e-10,
        format!("max lhs-rhs {worst_slack:.2e}, path-3 rho error {rho_err:.1e}"),
    )
}

fn duality_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let losses: Vec<f64> = (0..rng.random_range(1..=12)).map(|_| rng.random_range(0.0..8.0)).collect();
        let mu = rng.random_range(0.2..20.0);
        let w = kl_worst_case_weights(&losses, mu).unwrap();
        worst =
            worst.max((penalized_objective(w.as_slice(), &losses, mu) - robust_objective(&losses, mu).unwrap()).abs());
    }
    let mut grid_excess = f64::NEG_INFINITY;
    for _ in 0..5 {
        let mu = rng.random_range(0.3..5.0);
        for k in [2usize, 3] {
            let losses: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
            let star = penalized_objective(kl_worst_case_weights(&losses, mu).unwrap().as_slice(), &losses, mu);
            let n = 1000;
            let mut best = f64::NEG_INFINITY;
            for a in 0..=n {
                if k == 2 {
                    let l0 = a as f64 / n as f64;
                    best = best.max(penalized_objective(&[l0, 1.0 - l0], &losses, mu));
                } else {
                    for b in 0..=n - a {
                        let (l0, l1) = (a as f64 / n as f64, b as f64 / n as f64);
                        best = best.max(penalized_objective(&[l0, l1, (1.0 - l0 - l1).max(0.0)], &losses, mu));
                    }
                }
            }
            grid_excess = grid_excess.max(best - star);
        }
    }
    outcome(
        worst <= 1e-10 && grid_excess <= 1e-5,
        format!("max duality error {worst:.1e}, grid excess {grid_excess:.1e}"),
    )
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-5;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checks = 0;
    for _ in 0..50 {
        let classes = rng.random_range(2..=5);
        let dim = rng.random_range(classes - 1..=classes + 3);
        let ds = gaussian_mixture(classes, 10, dim, rng.random_range(0.5..3.0), rng.random()).unwrap();
        let spec = if rng.random_bool(0.5) {
            ModelSpec::softmax(dim, classes)
        } else {
            ModelSpec::mlp(dim, &[rng.random_range(2..=8)], classes)
        };
        let mut theta = init_params(&spec, rng.random());
        theta.0.iter_mut().for_each(|w| *w += rng.random_range(-0.05..0.05));
        let batch: Vec<usize> = (0..rng.random_range(1..=12)).map(|_| rng.random_range(0..ds.len())).collect();
        let mu = rng.random_range(1.0..6.0);
        let (loss, grad) = loss_and_grad(&spec, &theta, &ds, &batch).unwrap();
        let f = |t: &ParamVector| loss_and_grad(&spec, t, &ds, &batch).unwrap().0;
        let i = rng.random_range(0..theta.len());
        let (mut plus, mut minus) = (theta.clone(), theta.clone());
        plus.0[i] += H;
        minus.0[i] -= H;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
        if !close(grad.0[i], numeric) {
            return outcome(false, format!("loss gradient coord {i}: {} vs {numeric}", grad.0[i]));
        }
        let surrogate = (((f(&plus) / mu).exp()) - ((f(&minus) / mu).exp())) / (2.0 * H);
        let direction = (loss / mu).exp() / mu * grad.0[i];
        if !close(direction, surrogate) {
            return outcome(false, format!("tilted direction coord {i}: {direction} vs {surrogate}"));
        }
        checks += 1;
    }
    outcome(true, format!("{checks} loss + {checks} tilted checks at 1e-4"))
}

fn consensus_contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for setup in 0..20 {
        let g = random_connected_er(&mut rng);
        let w = metropolis_weights(&g).unwrap();
        let cols =
            (0..g.num_nodes()).map(|_| ParamVector((0..8).map(|_| rng.random_range(-3.0..3.0)).collect())).collect();
        let mut theta = ParamMatrix::from_columns(cols);
        for round in 0..10 {
            let before = consensus_distance(&theta);
            theta = mix(&theta, &w);
            let after = consensus_distance(&theta);
            if after > w.spectral_norm() * before + 1e-12 {
                return outcome(
                    false,
                    format!("setup {setup} round {round}: {after} > {} * {before}", w.spectral_norm()),
                );
            }
        }
    }
    outcome(true, "20 setups x 10 rounds")
}

fn bias_structure() -> Outcome {
    let ds = LabeledDataset::new(vec![1.5, -0.5, -1.0, 2.0], vec![0, 1], 2, 2).unwrap();
    let spec = ModelSpec::softmax(2, 2);
    let theta = ParamVector(vec![0.4, -0.3, 0.2, 0.1, 0.05, -0.05]);
    let (l1, g1) = loss_and_grad(&spec, &theta, &ds, &[0]).unwrap();
    let (l2, g2) = loss_and_grad(&spec, &theta, &ds, &[1]).unwrap();
    let exact =
        g1.0.iter()
            .zip(&g2.0)
            .map(|(a, b)| 0.5 * (l1.exp() * a + l2.exp() * b) - ((l1 + l2) / 2.0).exp() * 0.5 * (a + b))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
    let probe = bias_probe(&spec, &theta, &ds, &[0, 1], 1.0, 1, 10_000, &mut DeviceRng::new(9, 0)).unwrap();
    let mc_ok = (probe.gap - exact).abs() <= 3.0 * probe.std_err_norm();

    let mix_ds = gaussian_mixture(3, 20, 3, 1.0, 6).unwrap();
    let mix_spec = ModelSpec::softmax(3, 3);
    let mix_theta = init_params(&mix_spec, 2);
    let device: Vec<usize> = (0..mix_ds.len()).collect();
    let gap = |b, stream| {
        bias_probe(&mix_spec, &mix_theta, &mix_ds, &device, 1.0, b, 10_000, &mut DeviceRng::new(1, stream)).unwrap().gap
    };
    let (small, large) = (gap(4, 0), gap(64, 1));
    outcome(
        mc_ok && large < small,
        format!(
            "B=1 gap {:.5} vs exact {exact:.5} (3se {:.5}); gap B=4 {small:.4} > B=64 {large:.4}",
            probe.gap,
            3.0 * probe.std_err_norm()
        ),
    )
}

fn worst_case_bound() -> Outcome {
    let mut worst = 0.0f64;
    for m in [2usize, 10, 100] {
        let n = 3 * m;
        let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
        let features: Vec<f64> = (0..n * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let ds = LabeledDataset::new(features, labels, 4, m).unwrap();
        let spec = ModelSpec::softmax(4, m);
        let all: Vec<usize> = (0..n).collect();
        let loss = mean_loss(&spec, &ParamVector::zeros(spec.num_params()), &ds, &all).unwrap();
        worst = worst.max((loss - (m as f64).ln()).abs());
    }
    outcome(worst <= 1e-10, format!("max |loss - log M| {worst:.1e}"))
}

// Shared desk-scale task: four classes, one of them with a wider spread,
// dealt one shard per device across eight devices.
const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DESK_ROUNDS: usize = 2000;

fn desk_run(algorithm: Algorithm, mu: f64, seed: u64, eval_every: usize) -> Vec<MetricsRow> {
    let ds = gaussian_mixture_with_spreads(4, 1000, 3, 2.0, &[1.0, 1.0, 1.0, 3.0], seed).unwrap();
    let part = partition_pathological(&ds, 8, 1, seed).unwrap();
    let (train, test) = part.split_holdout(part.device_size() / 5, seed).unwrap();
    let w = metropolis_weights(&generate_erdos_renyi(8, 0.5, seed).unwrap()).unwrap();
    let spec = ModelSpec::softmax(3, 4).with_clip(Some(6.0));
    let mut cfg = TrainConfig::new(algorithm, DESK_ROUNDS, seed);
    cfg.mu = mu;
    cfg.eval_every = eval_every;
    Simulation::new(spec, w, &ds, train, test, cfg).unwrap().run().unwrap()
}

fn final_row(algorithm: Algorithm, mu: f64, seed: u64) -> MetricsRow {
    desk_run(algorithm, mu, seed, DESK_ROUNDS).pop().unwrap()
}

struct DeskResults {
    dsgd: Vec<MetricsRow>,
    // One entry per mu in DESK_MUS, each holding one row per seed.
    dr: Vec<Vec<MetricsRow>>,
}

const DESK_MUS: [f64; 3] = [1.0, 3.0, 9.0];

fn desk_results() -> DeskResults {
    let mut cells: Vec<(Option<f64>, u64)> = DESK_SEEDS.iter().map(|&s| (None, s)).collect();
    for mu in DESK_MUS {
        cells.extend(DESK_SEEDS.iter().map(|&s| (Some(mu), s)));
    }
    let rows: Vec<MetricsRow> = cells
        .par_iter()
        .map(|&(mu, seed)| match mu {
            None => final_row(Algorithm::Dsgd, 1.0, seed),
            Some(mu) => final_row(Algorithm::DrDsgd, mu, seed),
        })
        .collect();
    let n = DESK_SEEDS.len();
    DeskResults { dsgd: rows[..n].to_vec(), dr: rows[n..].chunks(n).map(<[MetricsRow]>::to_vec).collect() }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn robustness_reproduction(r: &DeskResults) -> Outcome {
    let dr = &r.dr[0];
    let wins = dr.iter().zip(&r.dsgd).filter(|(a, b)| a.worst_acc >= b.worst_acc).count();
    let sd_dr = mean(dr.iter().map(|x| x.stdev));
    let sd_dsgd = mean(r.dsgd.iter().map(|x| x.stdev));
    outcome(
        wins >= 4 && sd_dr < sd_dsgd,
        format!("worst-acc wins {wins}/5, mean stdev DR {sd_dr:.4} vs DSGD {sd_dsgd:.4}"),
    )
}

/// Counts adjacent pairs that break the order, failing if more than one
/// breaks or any break exceeds `slack`.
fn monotone_with_slack(values: &[f64], increasing: bool, slack: f64) -> bool {
    let breaks: Vec<f64> =
        values.windows(2).map(|p| if increasing { p[0] - p[1] } else { p[1] - p[0] }).filter(|&d| d > 0.0).collect();
    breaks.len() <= 1 && breaks.iter().all(|&d| d <= slack)
}

fn mu_tradeoff(r: &DeskResults) -> Outcome {
    let avg: Vec<f64> = r.dr.iter().map(|rows| mean(rows.iter().map(|x| x.avg_acc))).collect();
    let w10: Vec<f64> = r.dr.iter().map(|rows| mean(rows.iter().map(|x| x.worst10_acc))).collect();
    outcome(
        monotone_with_slack(&avg, true, 0.01) && monotone_with_slack(&w10, false, 0.01),
        format!("mu 1/3/9: avg {avg:.3?}, worst-10% {w10:.3?}"),
    )
}

fn metrics_csv(threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let rows = pool.install(|| desk_run(Algorithm::DrDsgd, 1.0, DESK_SEEDS[0], 10));
    let mut out = Vec::new();
    write_metrics_csv(&rows, &mut out).unwrap();
    out
}

fn determinism() -> Outcome {
    let runs = [metrics_csv(1), metrics_csv(1), metrics_csv(8), metrics_csv(8)];
    let same = runs.iter().all(|r| r == &runs[0]);
    outcome(same, format!("4 runs, {} bytes each", runs[0].len()))
}

/// Writes straight to the process stdout so the report survives test output capture.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn timed(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let pass = o.pass && elapsed <= budget;
    report(&format!(
        "{} {name}: {} [{:.1}s / {}s]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    ));
    pass
}

#[test]
fn acceptance_criteria() {
    let s = Duration::from_secs;
    let mut results = vec![
        timed("1 mixing invariants", s(5), mixing_invariants),
        timed("2 contraction inequality", s(5), contraction_inequality),
        timed("3 duality identity", s(30), duality_identity),
        timed("4 gradient correctness", s(60), gradient_correctness),
        timed("5 consensus contraction", s(10), consensus_contraction),
        timed("6 bias structure", s(60), bias_structure),
        timed("7 worst-case loss bound", s(1), worst_case_bound),
    ];
    let start = Instant::now();
    let desk = desk_results();
    let shared = start.elapsed();
    report(&format!("desk-scale sweep: 20 cells in {:.1}s", shared.as_secs_f64()));
    // The robustness check needs only a quarter of the sweep; the shared time counts against both budgets.
    results.push(timed("8 robustness reproduction", s(300).saturating_sub(shared), || robustness_reproduction(&desk)));
    results.push(timed("9 mu trade-off", s(900).saturating_sub(shared), || mu_tradeoff(&desk)));
    results.push(timed("10 determinism", s(120), determinism));
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
