//! Fast self-test of the core invariants.

use drgossip::datagen::{gaussian_mixture, LabeledDataset};
use drgossip::model::{init_params, loss_and_grad, mean_loss, ModelSpec, ParamVector};
use drgossip::robust::{kl_worst_case_weights, penalized_objective, robust_objective};
use drgossip::topology::{contraction_check, generate_erdos_renyi, metropolis_weights, verify_mixing, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Report {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn report(name: &'static str, result: Result<String, String>) -> Report {
    match result {
        Ok(detail) => Report { name, pass: true, detail },
        Err(detail) => Report { name, pass: false, detail },
    }
}

fn mixing(inject_asymmetric: bool) -> Result<String, String> {
    let mut rng = seeded(11);
    let mut max_rho: f64 = 0.0;
    for trial in 0..100 {
        let k = rng.random_range(4..=32);
        let g = generate_erdos_renyi(k, rng.random_range(0.2..=0.9), rng.random()).map_err(|e| e.to_string())?;
        let w = metropolis_weights(&g).map_err(|e| e.to_string())?;
        let mut entries = w.entries().clone();
        if inject_asymmetric && trial == 0 {
            // Keeps row sums intact while breaking symmetry.
            let (a, b) = (g.edges()[0].0, g.edges()[0].1);
            entries[(a, b)] += 0.01;
            entries[(a, a)] -= 0.01;
        }
        verify_mixing(&entries, Some(&g)).map_err(|e| format!("graph {trial}: {e}"))?;
        if w.spectral_norm() >= 1.0 {
            return Err(format!("graph {trial}: rho = {}", w.spectral_norm()));
        }
        max_rho = max_rho.max(w.spectral_norm());
    }
    Ok(format!("100 graphs, max rho {max_rho:.4}"))
}

fn contraction() -> Result<String, String> {
    let mut rng = seeded(12);
    for trial in 0..100 {
        let k = rng.random_range(4..=16);
        let g = generate_erdos_renyi(k, rng.random_range(0.2..=0.9), rng.random()).map_err(|e| e.to_string())?;
        let w = metropolis_weights(&g).map_err(|e| e.to_string())?;
        let d = rng.random_range(1..=5);
        let a = nalgebra::DMatrix::from_fn(d, k, |_, _| rng.random_range(-2.0..2.0));
        let (lhs, rhs) = contraction_check(&a, &w, rng.random_range(1..=5));
        if lhs > rhs + 1e-9 {
            return Err(format!("triple {trial}: {lhs} > {rhs}"));
        }
    }
    let path = metropolis_weights(&Graph::from_edges(3, &[(0, 1), (1, 2)]).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if (path.spectral_norm() - 4.0 / 9.0).abs() > 1e-10 {
        return Err(format!("path-3 rho {} != 4/9", path.spectral_norm()));
    }
    Ok("100 triples, path-3 rho = 4/9".into())
}

fn duality() -> Result<String, String> {
    let mut rng = seeded(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let losses: Vec<f64> = (0..rng.random_range(1..=12)).map(|_| rng.random_range(0.0..8.0)).collect();
        let mu = rng.random_range(0.2..20.0);
        let w = kl_worst_case_weights(&losses, mu).map_err(|e| e.to_string())?;
        let lhs = penalized_objective(w.as_slice(), &losses, mu);
        let rhs = robust_objective(&losses, mu).map_err(|e| e.to_string())?;
        worst = worst.max((lhs - rhs).abs());
    }
    if worst > 1e-10 {
        return Err(format!("max duality error {worst:e}"));
    }
    Ok(format!("100 pairs, max error {worst:.1e}"))
}

fn gradients() -> Result<String, String> {
    const H: f64 = 1e-5;
    let mut rng = seeded(14);
    for case in 0..50 {
        let classes = rng.random_range(2..=5);
        let dim = rng.random_range(classes - 1..=classes + 3);
        let ds = gaussian_mixture(classes, 10, dim, 1.5, rng.random()).map_err(|e| e.to_string())?;
        let spec = if case % 2 == 0 {
            ModelSpec::softmax(dim, classes)
        } else {
            ModelSpec::mlp(dim, &[rng.random_range(2..=8)], classes)
        };
        let mut theta = init_params(&spec, rng.random());
        theta.0.iter_mut().for_each(|w| *w += rng.random_range(-0.05..0.05));
        let batch: Vec<usize> = (0..8).map(|_| rng.random_range(0..ds.len())).collect();
        let (_, grad) = loss_and_grad(&spec, &theta, &ds, &batch).map_err(|e| e.to_string())?;
        let i = rng.random_range(0..theta.len());
        let f = |t: &ParamVector| loss_and_grad(&spec, t, &ds, &batch).map(|r| r.0).unwrap_or(f64::NAN);
        let (mut plus, mut minus) = (theta.clone(), theta.clone());
        plus.0[i] += H;
        minus.0[i] -= H;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
        if (grad.0[i] - numeric).abs() > 1e-4 * grad.0[i].abs().max(numeric.abs()) + 1e-6 {
            return Err(format!("case {case} coord {i}: {} vs {numeric}", grad.0[i]));
        }
    }
    Ok("50 finite-difference checks".into())
}

fn loss_bound() -> Result<String, String> {
    for m in [2usize, 10, 100] {
        let labels: Vec<usize> = (0..2 * m).map(|i| i % m).collect();
        let ds = LabeledDataset::new(vec![0.5; 2 * m], labels, 1, m).map_err(|e| e.to_string())?;
        let spec = ModelSpec::softmax(1, m);
        let all: Vec<usize> = (0..2 * m).collect();
        let loss = mean_loss(&spec, &ParamVector::zeros(spec.num_params()), &ds, &all).map_err(|e| e.to_string())?;
        if (loss - (m as f64).ln()).abs() > 1e-10 {
            return Err(format!("M = {m}: loss {loss}"));
        }
    }
    Ok("zero model scores log M".into())
}

pub fn run_checks(inject_asymmetric: bool) -> Vec<Report> {
    vec![
        report("mixing invariants", mixing(inject_asymmetric)),
        report("contraction inequality", contraction()),
        report("duality identity", duality()),
        report("gradient check", gradients()),
        report("worst-case loss bound", loss_bound()),
    ]
}
