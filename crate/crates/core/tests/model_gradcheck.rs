use drgossip::datagen::{gaussian_mixture, LabeledDataset};
use drgossip::model::{accuracy, init_params, loss_and_grad, mean_loss, predict_proba, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

/// Central difference of `f` along coordinate `i`.
fn central_difference(f: impl Fn(&ParamVector) -> f64, theta: &ParamVector, i: usize) -> f64 {
    let mut plus = theta.clone();
    let mut minus = theta.clone();
    plus.0[i] += FD_STEP;
    minus.0[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-6
}

fn random_case(rng: &mut ChaCha8Rng) -> (ModelSpec, LabeledDataset, ParamVector, Vec<usize>) {
    let classes = rng.random_range(2..=5);
    let dim = rng.random_range(classes - 1..=classes + 3);
    let ds = gaussian_mixture(classes, 10, dim, rng.random_range(0.5..3.0), rng.random()).unwrap();
    let spec = if rng.random_bool(0.5) {
        ModelSpec::softmax(dim, classes)
    } else {
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8)).collect();
        ModelSpec::mlp(dim, &hidden, classes)
    };
    let theta = init_params(&spec, rng.random());
    let batch: Vec<usize> = (0..rng.random_range(1..=12)).map(|_| rng.random_range(0..ds.len())).collect();
    (spec, ds, theta, batch)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let (spec, ds, mut theta, batch) = random_case(&mut rng);
        // Zero biases can park a ReLU exactly on its kink; nudge off it.
        theta.0.iter_mut().for_each(|w| *w += rng.random_range(-0.05..0.05));
        let (_, grad) = loss_and_grad(&spec, &theta, &ds, &batch).unwrap();
        let objective = |t: &ParamVector| loss_and_grad(&spec, t, &ds, &batch).unwrap().0;
        for _ in 0..20 {
            let i = rng.random_range(0..theta.len());
            let numeric = central_difference(objective, &theta, i);
            assert!(close(grad.0[i], numeric), "case {case} coord {i}: {} vs {numeric}", grad.0[i]);
        }
    }
}

#[test]
fn tilted_direction_matches_surrogate_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (spec, ds, theta, batch) = random_case(&mut rng);
        let mu = rng.random_range(1.0..6.0);
        let (loss, grad) = loss_and_grad(&spec, &theta, &ds, &batch).unwrap();
        let scale = (loss / mu).exp() / mu;
        let surrogate = |t: &ParamVector| (loss_and_grad(&spec, t, &ds, &batch).unwrap().0 / mu).exp();
        for _ in 0..20 {
            let i = rng.random_range(0..theta.len());
            let numeric = central_difference(surrogate, &theta, i);
            assert!(close(scale * grad.0[i], numeric));
        }
    }
}

#[test]
fn mean_loss_is_order_invariant_and_consistent() {
    let ds = gaussian_mixture(3, 30, 4, 1.5, 5).unwrap();
    let spec = ModelSpec::mlp(4, &[7, 5], 3);
    let theta = init_params(&spec, 1);
    let batch: Vec<usize> = (0..ds.len()).collect();
    let mut reversed = batch.clone();
    reversed.reverse();
    let (a, _) = loss_and_grad(&spec, &theta, &ds, &batch).unwrap();
    let (b, _) = loss_and_grad(&spec, &theta, &ds, &reversed).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!((a - mean_loss(&spec, &theta, &ds, &batch).unwrap()).abs() < 1e-12);
    assert!(a >= 0.0);
    assert_eq!(
        loss_and_grad(&spec, &theta, &ds, &batch).unwrap().1,
        loss_and_grad(&spec, &theta, &ds, &batch).unwrap().1
    );
}

#[test]
fn clipped_losses_never_exceed_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (spec, ds, mut theta, batch) = random_case(&mut rng);
        theta.0.iter_mut().for_each(|w| *w *= 5.0);
        let ceiling = rng.random_range(0.1..2.0);
        let clipped = spec.with_clip(Some(ceiling));
        for &i in &batch {
            let (l, _) = loss_and_grad(&clipped, &theta, &ds, &[i]).unwrap();
            assert!(l <= ceiling);
        }
    }
}

#[test]
fn softmax_outputs_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (spec, ds, theta, batch) = random_case(&mut rng);
        for &i in &batch {
            let p = predict_proba(&spec, &theta, ds.features(i)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn separated_binary_mixture_is_linearly_learnable() {
    let ds = gaussian_mixture(2, 200, 2, 6.0, 10).unwrap();
    let spec = ModelSpec::softmax(2, 2);
    let mut theta = ParamVector::zeros(spec.num_params());
    let all: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..200 {
        let (_, g) = loss_and_grad(&spec, &theta, &ds, &all).unwrap();
        theta.0.iter_mut().zip(&g.0).for_each(|(t, g)| *t -= 0.5 * g);
    }
    assert!(accuracy(&spec, &theta, &ds, &all).unwrap() >= 0.99);
}

#[test]
fn golden_accuracy_on_frozen_inputs() {
    let ds = gaussian_mixture(3, 40, 2, 1.0, 12).unwrap();
    let spec = ModelSpec::softmax(2, 3);
    let theta = init_params(&spec, 4);
    let all: Vec<usize> = (0..ds.len()).collect();
    let acc = accuracy(&spec, &theta, &ds, &all).unwrap();
    // Recount by hand from the probabilities, lowest index winning ties.
    let manual = all
        .iter()
        .filter(|&&i| {
            let p = predict_proba(&spec, &theta, ds.features(i)).unwrap();
            let best = (0..3).fold(0, |b, c| if p[c] > p[b] { c } else { b });
            best == ds.label(i)
        })
        .count() as f64
        / all.len() as f64;
    assert_eq!(acc, manual);
    assert_eq!(acc, include_str!("golden/accuracy_softmax_m3_seed4.txt").trim().parse::<f64>().unwrap());
}
