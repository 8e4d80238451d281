//! Synchronous decentralized training rounds: a local (optionally tilted)
//! gradient step on every device, then one gossip average through `W`.

use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::datagen::{minibatch, DevicePartition, DeviceRng, LabeledDataset};
use crate::model::{accuracy, init_params, loss_and_grad, mean_loss, ModelError, ModelSpec, ParamVector};
use crate::robust::{robust_objective, tilt, RobustConfig, RobustError};
use crate::topology::MixingMatrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("mixing matrix has spectral norm {0} >= 1 and cannot reach consensus")]
    NotContracting(f64),
    #[error("round {round}, device {device}: {source}")]
    Device {
        round: usize,
        device: usize,
        #[source]
        source: RobustError,
    },
    #[error("evaluation: {0}")]
    Eval(#[from] ModelError),
    #[error(transparent)]
    Robust(#[from] RobustError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Dsgd,
    DrDsgd,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Dsgd => "dsgd",
            Algorithm::DrDsgd => "drdsgd",
        }
    }
}

/// How automatic step sizes are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    /// `eta = sqrt(K / T)`.
    SquareRoot,
    /// `eta = 1 / (2 L + sqrt(T / K))` for a smoothness estimate `L`.
    Smooth { smoothness: f64 },
}

/// Which parameters are scored on each device's test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The network average of all device models.
    NetworkAverage,
    /// Each device's own model.
    PerDevice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    /// `None` selects the automatic schedule.
    pub learning_rate: Option<f64>,
    /// `None` selects `round(sqrt(K T))`.
    pub batch_size: Option<usize>,
    pub schedule: ScheduleMode,
    /// Tilt temperature; also used for the reported robust objective.
    pub mu: f64,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, rounds: usize, seed: u64) -> Self {
        TrainConfig {
            algorithm,
            rounds,
            learning_rate: None,
            batch_size: None,
            schedule: ScheduleMode::SquareRoot,
            mu: 1.0,
            eval_every: 1,
            eval_mode: EvalMode::NetworkAverage,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Resolves automatic learning rate and batch size for `K` devices holding
/// `device_size` training samples each.
pub fn resolve_schedule(cfg: &TrainConfig, num_devices: usize, device_size: usize) -> Result<Schedule, TrainError> {
    if num_devices == 0 || cfg.rounds == 0 {
        return Err(TrainError::Config("need K >= 1 and T >= 1".into()));
    }
    let k = num_devices as f64;
    let t = cfg.rounds as f64;
    let learning_rate = match (cfg.learning_rate, cfg.schedule) {
        (Some(lr), _) => lr,
        (None, ScheduleMode::SquareRoot) => (k / t).sqrt(),
        (None, ScheduleMode::Smooth { smoothness }) => 1.0 / (2.0 * smoothness + (t / k).sqrt()),
    };
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(TrainError::Config(format!("learning rate must be positive, got {learning_rate}")));
    }
    let batch_size = match cfg.batch_size {
        Some(b) => b,
        None => ((k * t).sqrt().round() as usize).min(device_size).max(1),
    };
    if batch_size == 0 {
        return Err(TrainError::Config("batch size resolved to 0".into()));
    }
    Ok(Schedule { learning_rate, batch_size })
}

/// `d x K` device parameters, column `i` owned by device `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    columns: Vec<ParamVector>,
    round: usize,
}

impl ParamMatrix {
    /// Every device starts from the same point.
    pub fn replicate(init: &ParamVector, num_devices: usize) -> Self {
        ParamMatrix { columns: vec![init.clone(); num_devices], round: 0 }
    }

    pub fn from_columns(columns: Vec<ParamVector>) -> Self {
        assert!(!columns.is_empty(), "need at least one device");
        let d = columns[0].len();
        assert!(columns.iter().all(|c| c.len() == d), "columns differ in length");
        ParamMatrix { columns, round: 0 }
    }

    pub fn num_devices(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn column(&self, i: usize) -> &ParamVector {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[ParamVector] {
        &self.columns
    }

    /// Network average `theta 1 / K`.
    pub fn average(&self) -> ParamVector {
        let k = self.columns.len() as f64;
        let mut avg = vec![0.0; self.dim()];
        for c in &self.columns {
            avg.iter_mut().zip(&c.0).for_each(|(a, x)| *a += x);
        }
        avg.iter_mut().for_each(|a| *a /= k);
        ParamVector(avg)
    }

    /// Concatenated per-column parameter records.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> io::Result<()> {
        self.columns.iter().try_for_each(|c| c.write_to(&mut out))
    }
}

/// `||theta (I - J)||_F^2 = sum_i ||theta_i - mean||^2`.
pub fn consensus_distance(theta: &ParamMatrix) -> f64 {
    let avg = theta.average();
    theta.columns.iter().map(|c| c.0.iter().zip(&avg.0).map(|(x, m)| (x - m).powi(2)).sum::<f64>()).sum()
}

/// `theta <- theta - lr * grad`.
pub fn local_update_dsgd(theta: &mut [f64], grad: &[f64], learning_rate: f64) {
    theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= learning_rate * g);
}

/// `theta <- theta - (lr / mu) exp(loss / mu) grad`, with loss and grad from the same batch.
pub fn local_update_drdsgd(
    theta: &mut [f64],
    mean_loss: f64,
    grad: &[f64],
    learning_rate: f64,
    mu: f64,
) -> Result<(), RobustError> {
    let h = tilt(mean_loss, mu)?;
    local_update_dsgd(theta, grad, learning_rate * h / mu);
    Ok(())
}

/// One gossip round: column `i` becomes `sum_j W_ji theta_j`.
pub fn mix(theta: &ParamMatrix, w: &MixingMatrix) -> ParamMatrix {
    let k = theta.num_devices();
    assert_eq!(w.num_nodes(), k, "mixing matrix does not match device count");
    let d = theta.dim();
    // Each output column sums in fixed `j` order, so the result is thread-count independent.
    let columns = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0; d];
            for (j, col) in theta.columns.iter().enumerate() {
                let wji = w.get(j, i);
                if wji != 0.0 {
                    out.iter_mut().zip(&col.0).for_each(|(o, x)| *o += wji * x);
                }
            }
            ParamVector(out)
        })
        .collect();
    ParamMatrix { columns, round: theta.round }
}

/// Accuracy statistics over devices at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub avg_acc: f64,
    pub worst_acc: f64,
    /// Mean accuracy of the worst `ceil(K / 10)` devices.
    pub worst10_acc: f64,
    /// Sample standard deviation of device accuracies.
    pub stdev: f64,
    pub consensus: f64,
    /// Log-sum-exp of device training losses.
    pub robust_obj: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "round,avg_acc,worst_acc,worst10_acc,stdev,consensus,robust_obj";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round, self.avg_acc, self.worst_acc, self.worst10_acc, self.stdev, self.consensus, self.robust_obj
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{}", MetricsRow::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Device-accuracy summary `(avg, worst, worst10, stdev)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyStats {
    pub avg: f64,
    pub worst: f64,
    pub worst10: f64,
    pub stdev: f64,
}

pub fn accuracy_stats(accs: &[f64]) -> AccuracyStats {
    assert!(!accs.is_empty(), "no device accuracies");
    let n = accs.len();
    let avg = accs.iter().sum::<f64>() / n as f64;
    let mut sorted = accs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let decile = n.div_ceil(10);
    let worst10 = sorted[..decile].iter().sum::<f64>() / decile as f64;
    let stdev = if n > 1 { (accs.iter().map(|a| (a - avg).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    AccuracyStats { avg, worst: sorted[0], worst10, stdev }
}

/// Training data, model and gossip network for one run.
pub struct Simulation<'a> {
    spec: ModelSpec,
    mixing: MixingMatrix,
    data: &'a LabeledDataset,
    train: DevicePartition,
    test: DevicePartition,
    config: TrainConfig,
    schedule: Schedule,
    params: ParamMatrix,
    rngs: Vec<DeviceRng>,
    warnings: Vec<String>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        spec: ModelSpec,
        mixing: MixingMatrix,
        data: &'a LabeledDataset,
        train: DevicePartition,
        test: DevicePartition,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let k = mixing.num_nodes();
        if train.num_devices() != k || test.num_devices() != k {
            return Err(TrainError::Config(format!(
                "{k}-node mixing matrix with {} train / {} test device splits",
                train.num_devices(),
                test.num_devices()
            )));
        }
        if k > 1 && mixing.spectral_norm() >= 1.0 {
            return Err(TrainError::NotContracting(mixing.spectral_norm()));
        }
        spec.validate()?;
        if spec.input_dim != data.dim() || spec.num_classes != data.num_classes() {
            return Err(TrainError::Config("model shape does not match the dataset".into()));
        }
        if train.device_size() == 0 || test.device_size() == 0 {
            return Err(TrainError::Config("every device needs training and test samples".into()));
        }
        if config.eval_every == 0 {
            return Err(TrainError::Config("eval cadence must be at least 1".into()));
        }
        let robust = RobustConfig::new(config.mu)?;
        let mut warnings = Vec::new();
        if config.algorithm == Algorithm::DrDsgd && robust.outside_guarantee() {
            warnings.push(format!("mu = {} < 1 lies outside the convergence guarantee", config.mu));
        }
        let schedule = resolve_schedule(&config, k, train.device_size())?;
        let params = ParamMatrix::replicate(&init_params(&spec, config.seed), k);
        let rngs = (0..k).map(|i| DeviceRng::new(config.seed, i)).collect();
        Ok(Simulation { spec, mixing, data, train, test, config, schedule, params, rngs, warnings })
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn params(&self) -> &ParamMatrix {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Replaces the device parameters, e.g. to start from distinct columns.
    pub fn set_params(&mut self, params: ParamMatrix) {
        assert_eq!(params.num_devices(), self.params.num_devices());
        assert_eq!(params.dim(), self.params.dim());
        self.params = params;
    }

    /// One synchronous round. Devices update their own columns in parallel;
    /// mixing starts once every device has finished.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let round = self.params.round;
        let Schedule { learning_rate, batch_size } = self.schedule;
        let (spec, data, train, algorithm, mu) =
            (&self.spec, self.data, &self.train, self.config.algorithm, self.config.mu);

        self.params.columns.par_iter_mut().zip(self.rngs.par_iter_mut()).enumerate().try_for_each(
            |(i, (theta, rng))| {
                let batch = minibatch(train.device(i), batch_size, rng);
                let (loss, grad) = loss_and_grad(spec, theta, data, &batch).map_err(|e| TrainError::Device {
                    round,
                    device: i,
                    source: e.into(),
                })?;
                match algorithm {
                    Algorithm::Dsgd => local_update_dsgd(&mut theta.0, &grad.0, learning_rate),
                    Algorithm::DrDsgd => local_update_drdsgd(&mut theta.0, loss, &grad.0, learning_rate, mu)
                        .map_err(|e| TrainError::Device { round, device: i, source: e.on_device(i) })?,
                }
                Ok::<_, TrainError>(())
            },
        )?;

        self.params = mix(&self.params, &self.mixing);
        self.params.round = round + 1;
        Ok(())
    }

    /// Scores every device on its own test split.
    pub fn evaluate(&self) -> Result<MetricsRow, TrainError> {
        let k = self.params.num_devices();
        let avg = self.params.average();
        let (accs, losses): (Vec<f64>, Vec<f64>) = (0..k)
            .into_par_iter()
            .map(|i| {
                let theta = match self.config.eval_mode {
                    EvalMode::NetworkAverage => &avg,
                    EvalMode::PerDevice => self.params.column(i),
                };
                let acc = accuracy(&self.spec, theta, self.data, self.test.device(i))?;
                let loss = mean_loss(&self.spec, theta, self.data, self.train.device(i))?;
                Ok((acc, loss))
            })
            .collect::<Result<Vec<_>, ModelError>>()?
            .into_iter()
            .unzip();
        let stats = accuracy_stats(&accs);
        Ok(MetricsRow {
            round: self.params.round,
            avg_acc: stats.avg,
            worst_acc: stats.worst,
            worst10_acc: stats.worst10,
            stdev: stats.stdev,
            consensus: consensus_distance(&self.params),
            robust_obj: robust_objective(&losses, self.config.mu)?,
        })
    }

    /// Runs the remaining rounds, evaluating at round 0, every `eval_every`
    /// rounds and at the final round.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>, TrainError> {
        let mut rows = Vec::new();
        if self.params.round == 0 {
            rows.push(self.evaluate()?);
        }
        while self.params.round < self.config.rounds {
            self.step()?;
            let t = self.params.round;
            if t.is_multiple_of(self.config.eval_every) || t == self.config.rounds {
                rows.push(self.evaluate()?);
            }
        }
        Ok(rows)
    }

    /// Per-device test accuracies under the configured evaluation mode.
    pub fn device_accuracies(&self) -> Result<Vec<f64>, TrainError> {
        let avg = self.params.average();
        (0..self.params.num_devices())
            .map(|i| {
                let theta = match self.config.eval_mode {
                    EvalMode::NetworkAverage => &avg,
                    EvalMode::PerDevice => self.params.column(i),
                };
                Ok(accuracy(&self.spec, theta, self.data, self.test.device(i))?)
            })
            .collect()
    }
}
