use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use drgossip::datagen::{gaussian_mixture_with_spreads, partition_pathological, DevicePartition, LabeledDataset};
use drgossip::model::ModelSpec;
use drgossip::topology::{
    generate_erdos_renyi, generate_geometric, generate_grid, generate_ring, metropolis_weights, Graph,
};
use drgossip::trainer::{resolve_schedule, write_metrics_csv, Algorithm, MetricsRow, Simulation, TrainConfig};
use rayon::prelude::*;

use crate::config::{ClipChoice, ConfigError, DataSource, ModelChoice, RunConfig, TopologyKind};

/// One (algorithm, mu, p, seed) point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub mu: f64,
    pub p: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        let mut name = format!("{}_mu{}", self.algorithm.name(), self.mu);
        if let Some(p) = self.p {
            name += &format!("_p{p}");
        }
        name + &format!("_seed{}", self.seed)
    }
}

/// Cells ordered by algorithm, then p, then mu, then seed.
pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let ps: Vec<Option<f64>> = if cfg.p.is_empty() { vec![None] } else { cfg.p.iter().copied().map(Some).collect() };
    let mut out = Vec::new();
    for &algorithm in &cfg.train.algorithms {
        for &p in &ps {
            for &mu in &cfg.mu {
                for &seed in &cfg.seeds {
                    out.push(Cell { algorithm, mu, p, seed });
                }
            }
        }
    }
    out
}

fn config_error(err: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(err.to_string()).into()
}

pub fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<LabeledDataset> {
    match &cfg.data.source {
        DataSource::Synthetic { classes, per_class, dim, separation, spreads } => {
            let spreads = spreads.clone().unwrap_or_else(|| vec![1.0; *classes]);
            gaussian_mixture_with_spreads(
                *classes,
                *per_class,
                *dim,
                *separation,
                &spreads,
                cfg.data.seed.unwrap_or(seed),
            )
            .map_err(config_error)
        }
        DataSource::File(path) => LabeledDataset::load(path).map_err(config_error),
    }
}

pub fn build_graph(cfg: &RunConfig, p: Option<f64>, seed: u64) -> Result<Graph> {
    let k = cfg.topology.nodes;
    let seed = cfg.topology.seed.unwrap_or(seed);
    let graph = match cfg.topology.kind {
        TopologyKind::ErdosRenyi => generate_erdos_renyi(k, p.expect("erdos_renyi cells carry p"), seed),
        // Two nodes on a ring collapse to a single edge.
        TopologyKind::Ring if k == 2 => Graph::from_edges(2, &[(0, 1)]),
        TopologyKind::Ring => generate_ring(k),
        TopologyKind::Grid { rows, cols } => generate_grid(rows, cols, k),
        TopologyKind::Geometric { radius } => generate_geometric(k, radius, seed),
    };
    graph.map_err(config_error)
}

pub fn build_partition(cfg: &RunConfig, ds: &LabeledDataset, seed: u64) -> Result<DevicePartition> {
    partition_pathological(ds, cfg.topology.nodes, cfg.shards_per_device, cfg.partition_seed.unwrap_or(seed))
        .map_err(config_error)
}

fn model_spec(cfg: &RunConfig, ds: &LabeledDataset) -> ModelSpec {
    let m = ds.num_classes();
    let spec = match &cfg.model {
        ModelChoice::Softmax => ModelSpec::softmax(ds.dim(), m),
        ModelChoice::Mlp(hidden) => ModelSpec::mlp(ds.dim(), hidden, m),
    };
    spec.with_clip(match cfg.clip {
        ClipChoice::Off => None,
        ClipChoice::Auto => Some(ModelSpec::default_clip(m)),
        ClipChoice::Value(c) => Some(c),
    })
}

/// Trains one cell and writes its metrics and resolved config under `out`.
pub fn run_cell(cfg: &RunConfig, cell: &Cell, out: &Path) -> Result<Vec<MetricsRow>> {
    let ds = load_dataset(cfg, cell.seed)?;
    let graph = build_graph(cfg, cell.p, cell.seed)?;
    let w = metropolis_weights(&graph).map_err(config_error)?;
    let part = build_partition(cfg, &ds, cell.seed)?;
    let holdout = ((part.device_size() as f64 * cfg.data.holdout_fraction).round() as usize).max(1);
    let (train, test) = part.split_holdout(holdout, cfg.partition_seed.unwrap_or(cell.seed)).map_err(config_error)?;

    let mut tc = TrainConfig::new(cell.algorithm, cfg.train.rounds, cell.seed);
    tc.learning_rate = cfg.train.learning_rate;
    tc.batch_size = cfg.train.batch_size;
    tc.schedule = cfg.train.schedule;
    tc.mu = cell.mu;
    tc.eval_every = cfg.train.eval_every;
    tc.eval_mode = cfg.train.eval_mode;
    let schedule = resolve_schedule(&tc, graph.num_nodes(), train.device_size()).map_err(config_error)?;

    let mut sim = Simulation::new(model_spec(cfg, &ds), w, &ds, train, test, tc).map_err(config_error)?;
    for warning in sim.warnings() {
        eprintln!("warning [{}]: {warning}", cell.name());
    }
    let rows = sim.run()?;

    let dir = out.join(cell.name());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut csv = Vec::new();
    write_metrics_csv(&rows, &mut csv)?;
    fs::write(dir.join("metrics.csv"), csv)?;
    let resolved =
        cfg.render_cell(cell.algorithm, cell.mu, cell.p, cell.seed, schedule.learning_rate, schedule.batch_size);
    fs::write(dir.join("config.txt"), resolved)?;
    Ok(rows)
}

pub const SUMMARY_METRICS: [&str; 6] = ["avg_acc", "worst_acc", "worst10_acc", "stdev", "consensus", "robust_obj"];

fn metric_values(row: &MetricsRow) -> [f64; 6] {
    [row.avg_acc, row.worst_acc, row.worst10_acc, row.stdev, row.consensus, row.robust_obj]
}

/// Mean and standard error (sample deviation over `sqrt(n)`; zero for one value).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn write_summary(cfg: &RunConfig, cells: &[Cell], finals: &[MetricsRow], out: &Path) -> Result<()> {
    let mut text = String::from("algorithm,mu,p,seeds");
    for m in SUMMARY_METRICS {
        text += &format!(",{m}_mean,{m}_se");
    }
    text.push('\n');
    // Cells are grouped by seed innermost, so each group is a contiguous run.
    let n = cfg.seeds.len();
    for (group, rows) in cells.chunks(n).zip(finals.chunks(n)) {
        let c = group[0];
        text += &format!("{},{},{},{}", c.algorithm.name(), c.mu, c.p.map(|p| p.to_string()).unwrap_or_default(), n);
        let values: Vec<[f64; 6]> = rows.iter().map(metric_values).collect();
        for i in 0..SUMMARY_METRICS.len() {
            let (mean, se) = mean_and_se(&values.iter().map(|v| v[i]).collect::<Vec<_>>());
            text += &format!(",{mean},{se}");
        }
        text.push('\n');
    }
    fs::write(out.join("summary.csv"), text)?;
    Ok(())
}

pub fn run(cfg: &RunConfig, out: &Path, parallel_cells: bool) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cells = cells(cfg);
    let run_one = |cell: &Cell| -> Result<MetricsRow> {
        let rows = run_cell(cfg, cell, out).with_context(|| format!("cell {}", cell.name()))?;
        let last = rows.into_iter().last().expect("a run always emits its final round");
        eprintln!("{}: avg {:.4} worst {:.4} stdev {:.4}", cell.name(), last.avg_acc, last.worst_acc, last.stdev);
        Ok(last)
    };
    let finals: Vec<MetricsRow> = if parallel_cells {
        cells.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        cells.iter().map(run_one).collect::<Result<_>>()?
    };
    write_summary(cfg, &cells, &finals, out)
}

/// Writes per-device class counts for the first configured seed.
pub fn dump_partition(cfg: &RunConfig, mut out: impl Write) -> Result<()> {
    let seed = cfg.seeds[0];
    let ds = load_dataset(cfg, seed)?;
    let part = build_partition(cfg, &ds, seed)?;
    let header: Vec<String> = (0..ds.num_classes()).map(|c| format!("class_{c}")).collect();
    writeln!(out, "device,{}", header.join(","))?;
    for (d, hist) in part.class_histograms(&ds).iter().enumerate() {
        let counts: Vec<String> = hist.iter().map(usize::to_string).collect();
        writeln!(out, "{d},{}", counts.join(","))?;
    }
    Ok(())
}
