//! Flat `section.key = value` experiment configs.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Unknown or repeated keys are errors so typos never pass silently.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drgossip::trainer::{Algorithm, EvalMode, ScheduleMode};

/// A problem with the configuration itself, as opposed to a failed run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopologyKind {
    ErdosRenyi,
    Ring,
    Grid { rows: usize, cols: usize },
    Geometric { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub nodes: usize,
    /// Fixed graph seed; by default each cell uses its own seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { classes: usize, per_class: usize, dim: usize, separation: f64, spreads: Option<Vec<f64>> },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub seed: Option<u64>,
    /// Fraction of each device's shard held out as its test distribution.
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    Softmax,
    Mlp(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipChoice {
    Off,
    /// `2 ln M` for M classes.
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub algorithms: Vec<Algorithm>,
    pub rounds: usize,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub schedule: ScheduleMode,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub topology: TopologyConfig,
    pub data: DataConfig,
    pub shards_per_device: usize,
    pub partition_seed: Option<u64>,
    pub model: ModelChoice,
    pub clip: ClipChoice,
    pub train: TrainSection,
    pub mu: Vec<f64>,
    /// Edge probabilities; only meaningful for Erdős–Rényi graphs.
    pub p: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), (n + 1, value.trim().to_string())).is_some() {
                return Err(config_err(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Entries { map })
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((line, v)) => {
                v.parse().map(Some).map_err(|_| config_err(format!("line {line}: cannot parse {key} = {v}")))
            }
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        self.take(key)?.ok_or_else(|| config_err(format!("missing required key {key}")))
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((line, v)) => {
                let items = v
                    .split(',')
                    .map(|s| {
                        s.trim().parse().map_err(|_| config_err(format!("line {line}: bad list item in {key}: {s}")))
                    })
                    .collect::<Result<Vec<T>, _>>()?;
                if items.is_empty() {
                    return Err(config_err(format!("line {line}: {key} is empty")));
                }
                Ok(Some(items))
            }
        }
    }

    /// `auto` maps to `None`.
    fn take_auto<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take_raw(key) {
            Some((_, v)) if v == "auto" => Ok(None),
            Some((line, v)) => {
                v.parse().map(Some).map_err(|_| config_err(format!("line {line}: cannot parse {key} = {v}")))
            }
            None => Ok(None),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(config_err(format!("line {line}: unknown key {key}"))),
        }
    }
}

fn parse_algorithm(s: &str) -> Result<Algorithm, ConfigError> {
    match s.trim() {
        "dsgd" => Ok(Algorithm::Dsgd),
        "drdsgd" | "dr-dsgd" => Ok(Algorithm::DrDsgd),
        other => Err(config_err(format!("unknown algorithm {other}"))),
    }
}

impl RunConfig {
    /// Parses config text; relative data paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;

        let nodes: usize = e.require("topology.nodes")?;
        let kind_name: String = e.require("topology.kind")?;
        let topo_p: Option<f64> = e.take("topology.p")?;
        let kind = match kind_name.as_str() {
            "erdos_renyi" => TopologyKind::ErdosRenyi,
            "ring" => TopologyKind::Ring,
            "grid" => TopologyKind::Grid { rows: e.require("topology.rows")?, cols: e.require("topology.cols")? },
            "geometric" => TopologyKind::Geometric {
                radius: e.take("topology.radius")?.unwrap_or(drgossip::topology::DEFAULT_GEOMETRIC_RADIUS),
            },
            other => return Err(config_err(format!("unknown topology.kind {other}"))),
        };
        let topology = TopologyConfig { kind, nodes, seed: e.take("topology.seed")? };

        let source = match e.take::<String>("data.kind")?.as_deref().unwrap_or("gaussian_mixture") {
            "gaussian_mixture" => DataSource::Synthetic {
                classes: e.require("data.classes")?,
                per_class: e.require("data.per_class")?,
                dim: e.require("data.dim")?,
                separation: e.take("data.separation")?.unwrap_or(1.0),
                spreads: e.take_list("data.spreads")?,
            },
            "file" => {
                let path: PathBuf = e.require::<String>("data.path")?.into();
                let path = if path.is_absolute() { path } else { base_dir.join(path) };
                if !path.is_file() {
                    return Err(config_err(format!("data file {} does not exist", path.display())));
                }
                DataSource::File(path)
            }
            other => return Err(config_err(format!("unknown data.kind {other}"))),
        };
        let data = DataConfig {
            source,
            seed: e.take("data.seed")?,
            holdout_fraction: e.take("data.holdout_fraction")?.unwrap_or(0.2),
        };

        let shards_per_device = e.take("partition.shards_per_device")?.unwrap_or(2);
        let partition_seed = e.take("partition.seed")?;

        let model = match e.take::<String>("model.kind")?.as_deref().unwrap_or("softmax") {
            "softmax" => ModelChoice::Softmax,
            "mlp" => ModelChoice::Mlp(
                e.take_list("model.hidden")?.unwrap_or_else(|| drgossip::model::DEFAULT_HIDDEN.to_vec()),
            ),
            other => return Err(config_err(format!("unknown model.kind {other}"))),
        };
        let clip = match e.take::<String>("model.clip")?.as_deref() {
            None | Some("none") => ClipChoice::Off,
            Some("auto") => ClipChoice::Auto,
            Some(v) => ClipChoice::Value(v.parse().map_err(|_| config_err(format!("cannot parse model.clip = {v}")))?),
        };

        let algorithms = match e.take_raw("train.algorithms") {
            None => vec![Algorithm::Dsgd, Algorithm::DrDsgd],
            Some((_, v)) => v.split(',').map(parse_algorithm).collect::<Result<_, _>>()?,
        };
        let schedule = match e.take::<String>("train.schedule")?.as_deref().unwrap_or("sqrt") {
            "sqrt" => ScheduleMode::SquareRoot,
            "smooth" => ScheduleMode::Smooth { smoothness: e.require("train.smoothness")? },
            other => return Err(config_err(format!("unknown train.schedule {other}"))),
        };
        let eval_mode = match e.take::<String>("train.eval_mode")?.as_deref().unwrap_or("average") {
            "average" => EvalMode::NetworkAverage,
            "per_device" => EvalMode::PerDevice,
            other => return Err(config_err(format!("unknown train.eval_mode {other}"))),
        };
        let train = TrainSection {
            algorithms,
            rounds: e.require("train.rounds")?,
            learning_rate: e.take_auto("train.learning_rate")?,
            batch_size: e.take_auto("train.batch_size")?,
            schedule,
            eval_every: e.take("train.eval_every")?.unwrap_or(1),
            eval_mode,
        };

        let mu = e.take_list("sweep.mu")?.unwrap_or_else(|| vec![1.0]);
        let sweep_p: Option<Vec<f64>> = e.take_list("sweep.p")?;
        let p = match (kind, topo_p, sweep_p) {
            (_, Some(_), Some(_)) => return Err(config_err("set either topology.p or sweep.p, not both")),
            (TopologyKind::ErdosRenyi, Some(p), None) => vec![p],
            (TopologyKind::ErdosRenyi, None, Some(ps)) => ps,
            (TopologyKind::ErdosRenyi, None, None) => {
                return Err(config_err("erdos_renyi needs topology.p or sweep.p"))
            }
            (_, None, None) => Vec::new(),
            _ => return Err(config_err("edge probabilities only apply to erdos_renyi")),
        };
        let seeds = e.take_list("sweep.seeds")?.unwrap_or_else(|| vec![1]);
        let output_dir = e.take::<String>("output.dir")?.unwrap_or_else(|| "runs".into()).into();
        e.finish()?;

        let cfg = RunConfig {
            topology,
            data,
            shards_per_device,
            partition_seed,
            model,
            clip,
            train,
            mu,
            p,
            seeds,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| config_err(format!("cannot read config {}: {err}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let k = self.topology.nodes;
        if k == 0 {
            return Err(config_err("topology.nodes must be positive"));
        }
        if let TopologyKind::Grid { rows, cols } = self.topology.kind {
            if rows * cols != k {
                return Err(config_err(format!("grid {rows}x{cols} does not have {k} nodes")));
            }
        }
        if self.train.algorithms.is_empty() {
            return Err(config_err("train.algorithms is empty"));
        }
        if self.train.rounds == 0 {
            return Err(config_err("train.rounds must be positive"));
        }
        if self.train.eval_every == 0 {
            return Err(config_err("train.eval_every must be positive"));
        }
        if self.shards_per_device == 0 {
            return Err(config_err("partition.shards_per_device must be positive"));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(config_err("data.holdout_fraction must lie in (0, 1)"));
        }
        if let Some(mu) = self.mu.iter().find(|&&m| !(m > 0.0 && m.is_finite())) {
            return Err(config_err(format!("sweep.mu entries must be positive, got {mu}")));
        }
        if let Some(p) = self.p.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(config_err(format!("edge probability {p} outside (0, 1]")));
        }
        if let DataSource::Synthetic { classes, per_class, .. } = self.data.source {
            if classes * per_class < k * self.shards_per_device {
                return Err(config_err(format!(
                    "{} samples cannot fill {k} devices x {} shards",
                    classes * per_class,
                    self.shards_per_device
                )));
            }
        }
        Ok(())
    }

    /// Replaces the seed list, e.g. from the environment.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
    }

    /// Renders the config for a single cell; parsing it back reproduces that cell.
    pub fn render_cell(
        &self,
        algorithm: Algorithm,
        mu: f64,
        p: Option<f64>,
        seed: u64,
        lr: f64,
        batch: usize,
    ) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let t = &self.topology;
        match t.kind {
            TopologyKind::ErdosRenyi => kv("topology.kind", "erdos_renyi".into()),
            TopologyKind::Ring => kv("topology.kind", "ring".into()),
            TopologyKind::Grid { rows, cols } => {
                kv("topology.kind", "grid".into());
                kv("topology.rows", rows.to_string());
                kv("topology.cols", cols.to_string());
            }
            TopologyKind::Geometric { radius } => {
                kv("topology.kind", "geometric".into());
                kv("topology.radius", radius.to_string());
            }
        }
        kv("topology.nodes", t.nodes.to_string());
        kv("topology.seed", t.seed.unwrap_or(seed).to_string());
        if let Some(p) = p {
            kv("topology.p", p.to_string());
        }
        match &self.data.source {
            DataSource::Synthetic { classes, per_class, dim, separation, spreads } => {
                kv("data.kind", "gaussian_mixture".into());
                kv("data.classes", classes.to_string());
                kv("data.per_class", per_class.to_string());
                kv("data.dim", dim.to_string());
                kv("data.separation", separation.to_string());
                if let Some(sp) = spreads {
                    kv("data.spreads", join(sp));
                }
            }
            DataSource::File(path) => {
                kv("data.kind", "file".into());
                kv("data.path", path.display().to_string());
            }
        }
        kv("data.seed", self.data.seed.unwrap_or(seed).to_string());
        kv("data.holdout_fraction", self.data.holdout_fraction.to_string());
        kv("partition.shards_per_device", self.shards_per_device.to_string());
        kv("partition.seed", self.partition_seed.unwrap_or(seed).to_string());
        match &self.model {
            ModelChoice::Softmax => kv("model.kind", "softmax".into()),
            ModelChoice::Mlp(hidden) => {
                kv("model.kind", "mlp".into());
                kv("model.hidden", join(hidden));
            }
        }
        kv(
            "model.clip",
            match self.clip {
                ClipChoice::Off => "none".into(),
                ClipChoice::Auto => "auto".into(),
                ClipChoice::Value(c) => c.to_string(),
            },
        );
        kv("train.algorithms", algorithm.name().into());
        kv("train.rounds", self.train.rounds.to_string());
        kv("train.learning_rate", lr.to_string());
        kv("train.batch_size", batch.to_string());
        match self.train.schedule {
            ScheduleMode::SquareRoot => kv("train.schedule", "sqrt".into()),
            ScheduleMode::Smooth { smoothness } => {
                kv("train.schedule", "smooth".into());
                kv("train.smoothness", smoothness.to_string());
            }
        }
        kv("train.eval_every", self.train.eval_every.to_string());
        kv(
            "train.eval_mode",
            match self.train.eval_mode {
                EvalMode::NetworkAverage => "average".into(),
                EvalMode::PerDevice => "per_device".into(),
            },
        );
        kv("sweep.mu", mu.to_string());
        kv("sweep.seeds", seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        s
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
