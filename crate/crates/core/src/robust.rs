//! KL-regularized distributionally robust objective and its exponential tilt.
//!
//! For device losses `f` and temperature `mu`, the worst case of
//! `sum_i lambda_i f_i - mu * KL(lambda || uniform)` over the simplex is the
//! log-sum-exp `mu * log(mean_i exp(f_i / mu))`, attained at `lambda* ~ exp(f / mu)`.

use thiserror::Error;

use crate::datagen::{minibatch, DeviceRng, LabeledDataset};
use crate::model::{loss_and_grad, ModelError, ModelSpec, ParamVector};

/// Largest exponent (natural-log units) the tilt accepts before refusing.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("mu must be positive, got {0}")]
    InvalidMu(f64),
    #[error(
        "tilt exponent {exponent:.1} exceeds {MAX_EXPONENT}{}; raise mu or enable loss clipping",
        device.map(|d| format!(" on device {d}")).unwrap_or_default()
    )]
    Overflow { exponent: f64, device: Option<usize> },
    #[error("bias probe needs at least 100 trials, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl RobustError {
    /// Attaches a device id to an overflow error.
    pub fn on_device(self, device: usize) -> Self {
        match self {
            RobustError::Overflow { exponent, .. } => RobustError::Overflow { exponent, device: Some(device) },
            other => other,
        }
    }
}

/// Temperature of the KL penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    mu: f64,
}

impl RobustConfig {
    pub fn new(mu: f64) -> Result<Self, RobustError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(RobustError::InvalidMu(mu));
        }
        Ok(RobustConfig { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// True when `mu < 1`, where the convergence guarantee no longer applies.
    pub fn outside_guarantee(&self) -> bool {
        self.mu < 1.0
    }
}

/// Point of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_mu(mu: f64) -> Result<(), RobustError> {
    RobustConfig::new(mu).map(|_| ())
}

/// `h = exp(mean_loss / mu)`.
pub fn tilt(mean_loss: f64, mu: f64) -> Result<f64, RobustError> {
    check_mu(mu)?;
    let exponent = mean_loss / mu;
    if exponent > MAX_EXPONENT {
        return Err(RobustError::Overflow { exponent, device: None });
    }
    Ok(exponent.exp())
}

/// `mu * log((1/K) sum_i exp(f_i / mu))`, max-shifted.
pub fn robust_objective(losses: &[f64], mu: f64) -> Result<f64, RobustError> {
    check_mu(mu)?;
    assert!(!losses.is_empty(), "need at least one loss");
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = losses.iter().map(|f| ((f - max) / mu).exp()).sum();
    Ok(max + mu * (sum / losses.len() as f64).ln())
}

/// Closed-form maximizer `lambda_i = exp(f_i / mu) / sum_j exp(f_j / mu)`.
pub fn kl_worst_case_weights(losses: &[f64], mu: f64) -> Result<WeightVector, RobustError> {
    check_mu(mu)?;
    assert!(!losses.is_empty(), "need at least one loss");
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = losses.iter().map(|f| ((f - max) / mu).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(WeightVector(w))
}

/// Penalized objective `sum_i lambda_i f_i - mu * sum_i lambda_i log(lambda_i K)`,
/// with `0 log 0 = 0`.
pub fn penalized_objective(weights: &[f64], losses: &[f64], mu: f64) -> f64 {
    let k = losses.len() as f64;
    weights.iter().zip(losses).map(|(&l, &f)| l * f - if l > 0.0 { mu * l * (l * k).ln() } else { 0.0 }).sum()
}

/// `F = (1/K) sum_i exp(f_i / mu)`.
pub fn surrogate_value(losses: &[f64], mu: f64) -> Result<f64, RobustError> {
    let terms = losses.iter().map(|&f| tilt(f, mu)).collect::<Result<Vec<_>, _>>()?;
    Ok(terms.iter().sum::<f64>() / losses.len() as f64)
}

/// Monte Carlo estimate of the tilted stochastic gradient against its plug-in value.
#[derive(Debug, Clone)]
pub struct BiasProbe {
    /// Mean over trials of `exp(batch_loss / mu) * batch_grad`.
    pub empirical: Vec<f64>,
    /// Per-coordinate standard error of `empirical`.
    pub std_err: Vec<f64>,
    /// `exp(f / mu) * grad f` on the full device data.
    pub plug_in: Vec<f64>,
    /// Euclidean distance between `empirical` and `plug_in`.
    pub gap: f64,
}

impl BiasProbe {
    pub fn std_err_norm(&self) -> f64 {
        self.std_err.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Compares `E[h g]` over random minibatches of `batch_size` with the
/// full-data tilted gradient on one device.
#[allow(clippy::too_many_arguments)]
pub fn bias_probe(
    spec: &ModelSpec,
    theta: &ParamVector,
    ds: &LabeledDataset,
    device: &[usize],
    mu: f64,
    batch_size: usize,
    trials: usize,
    rng: &mut DeviceRng,
) -> Result<BiasProbe, RobustError> {
    check_mu(mu)?;
    if trials < 100 {
        return Err(RobustError::TooFewTrials(trials));
    }
    let d = theta.len();
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for t in 0..trials {
        let batch = minibatch(device, batch_size, rng);
        let (loss, grad) = loss_and_grad(spec, theta, ds, &batch)?;
        let h = tilt(loss, mu)?;
        // Welford update per coordinate.
        let n = (t + 1) as f64;
        for ((m, s), g) in mean.iter_mut().zip(m2.iter_mut()).zip(&grad.0) {
            let x = h * g;
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }
    let denom = (trials * (trials - 1)) as f64;
    let std_err = m2.iter().map(|s| (s / denom).sqrt()).collect();

    let (full_loss, full_grad) = loss_and_grad(spec, theta, ds, device)?;
    let h = tilt(full_loss, mu)?;
    let plug_in: Vec<f64> = full_grad.0.iter().map(|g| h * g).collect();
    let gap = mean.iter().zip(&plug_in).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(BiasProbe { empirical: mean, std_err, plug_in, gap })
}
