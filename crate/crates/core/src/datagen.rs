//! Labeled datasets and their pathological non-IID split across devices.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Magic number opening a binary dataset file (`"DSET"` as a little-endian u32).
pub const DATASET_MAGIC: u32 = 0x4453_4554;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid partition request: {0}")]
    Partition(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major `n x m` features with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self, DataError> {
        if dim == 0 || num_classes == 0 {
            return Err(DataError::Invalid("feature dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} features for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(DataError::Invalid("non-finite feature".into()));
        }
        let counts = class_counts(&labels, num_classes);
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(DataError::Invalid(format!("class {c} has no samples")));
        }
        Ok(LabeledDataset { features, labels, dim, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Writes the binary format: magic, n, m, M as u32, n*m f32 features, n u32 labels.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), DataError> {
        let header = [DATASET_MAGIC, to_u32(self.len())?, to_u32(self.dim)?, to_u32(self.num_classes)?];
        for h in header {
            out.write_all(&h.to_le_bytes())?;
        }
        for &x in &self.features {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
        for &y in &self.labels {
            out.write_all(&to_u32(y)?.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, DataError> {
        let mut word = [0u8; 4];
        let mut next = |input: &mut R| -> Result<[u8; 4], DataError> {
            input.read_exact(&mut word).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => DataError::Format("truncated file".into()),
                _ => DataError::Io(e),
            })?;
            Ok(word)
        };
        let magic = u32::from_le_bytes(next(&mut input)?);
        if magic != DATASET_MAGIC {
            return Err(DataError::Format(format!("bad magic {magic:#010x}")));
        }
        let n = u32::from_le_bytes(next(&mut input)?) as usize;
        let m = u32::from_le_bytes(next(&mut input)?) as usize;
        let classes = u32::from_le_bytes(next(&mut input)?) as usize;
        let mut features = Vec::with_capacity(n * m);
        for _ in 0..n * m {
            features.push(f32::from_le_bytes(next(&mut input)?) as f64);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(u32::from_le_bytes(next(&mut input)?) as usize);
        }
        LabeledDataset::new(features, labels, m, classes)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

fn to_u32(v: usize) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::Format(format!("{v} does not fit in u32")))
}

fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

/// Vertices of a regular simplex with `classes` vertices at distance `radius`
/// from the origin, embedded in the first `classes - 1` coordinates of `dim`.
fn simplex_vertices(classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    // Centered basis vectors e_c - 1/M span the simplex; orthonormalize the
    // first M-1 of them and express every vertex in that basis.
    let m = classes;
    let centered: Vec<Vec<f64>> =
        (0..m).map(|c| (0..m).map(|k| if k == c { 1.0 } else { 0.0 } - 1.0 / m as f64).collect()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m - 1);
    for v in centered.iter().take(m - 1) {
        let mut u = v.clone();
        for b in &basis {
            let dot: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        basis.push(u);
    }
    let vertex_norm = ((m - 1) as f64 / m as f64).sqrt();
    centered
        .iter()
        .map(|v| {
            let mut coords = vec![0.0; dim];
            for (k, b) in basis.iter().enumerate() {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                coords[k] = dot * radius / vertex_norm;
            }
            coords
        })
        .collect()
}

/// Unit-variance isotropic Gaussians centered on a regular simplex of radius `separation`.
///
/// Samples are interleaved by class: sample `i` has label `i % classes`.
pub fn gaussian_mixture(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    gaussian_mixture_with_spreads(classes, per_class, dim, separation, &vec![1.0; classes], seed)
}

/// Like [`gaussian_mixture`], but class `c` has standard deviation `spreads[c]`.
///
/// Wider classes overlap their neighbors more and are harder to classify, which
/// makes per-device difficulty differ under a label-sorted split.
pub fn gaussian_mixture_with_spreads(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    spreads: &[f64],
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if classes < 2 || per_class == 0 {
        return Err(DataError::Invalid("need at least 2 classes and 1 sample per class".into()));
    }
    if !(separation > 0.0) {
        return Err(DataError::Invalid(format!("separation must be positive, got {separation}")));
    }
    if dim + 1 < classes {
        return Err(DataError::Invalid(format!("dimension {dim} cannot hold a {classes}-class simplex")));
    }
    if spreads.len() != classes || spreads.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(DataError::Invalid(format!("need {classes} positive class spreads, got {spreads:?}")));
    }
    let centers = simplex_vertices(classes, dim, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            for &mu in center {
                let z: f64 = rng.sample(StandardNormal);
                features.push(mu + spreads[c] * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, dim, classes)
}

/// Disjoint, equally sized per-device index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevicePartition {
    assignments: Vec<Vec<usize>>,
    shards_per_device: usize,
}

impl DevicePartition {
    pub fn num_devices(&self) -> usize {
        self.assignments.len()
    }

    pub fn shards_per_device(&self) -> usize {
        self.shards_per_device
    }

    pub fn device(&self, i: usize) -> &[usize] {
        &self.assignments[i]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    /// Samples held by each device (all devices hold the same count).
    pub fn device_size(&self) -> usize {
        self.assignments.first().map_or(0, Vec::len)
    }

    /// Per-device label counts, one row per device.
    pub fn class_histograms(&self, ds: &LabeledDataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.num_classes()];
                for &i in idx {
                    h[ds.label(i)] += 1;
                }
                h
            })
            .collect()
    }

    /// Splits every device's list into a local training part and a held-out
    /// part of `holdout` samples, drawn by a seeded shuffle per device.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> Result<(DevicePartition, DevicePartition), DataError> {
        if holdout == 0 || holdout >= self.device_size() {
            return Err(DataError::Partition(format!(
                "holdout of {holdout} leaves no training or test data on devices of size {}",
                self.device_size()
            )));
        }
        let mut train = Vec::with_capacity(self.num_devices());
        let mut test = Vec::with_capacity(self.num_devices());
        for (i, list) in self.assignments.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut shuffled = list.clone();
            shuffled.shuffle(&mut rng);
            let keep = shuffled.split_off(holdout);
            test.push(shuffled);
            train.push(keep);
        }
        let spd = self.shards_per_device;
        Ok((
            DevicePartition { assignments: train, shards_per_device: spd },
            DevicePartition { assignments: test, shards_per_device: spd },
        ))
    }
}

/// Sorts by label, cuts `K * shards_per_device` contiguous equal shards and
/// deals a seeded permutation of them, `shards_per_device` at a time, to the
/// devices in turn.
pub fn partition_pathological(
    ds: &LabeledDataset,
    num_devices: usize,
    shards_per_device: usize,
    seed: u64,
) -> Result<DevicePartition, DataError> {
    let total = check_shards(ds, num_devices, shards_per_device)?;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    partition_with_shard_order(ds, num_devices, shards_per_device, &order)
}

/// Pathological partition with an explicit shard permutation; device `d`
/// receives shards `order[d * spd..(d + 1) * spd]`.
pub fn partition_with_shard_order(
    ds: &LabeledDataset,
    num_devices: usize,
    shards_per_device: usize,
    order: &[usize],
) -> Result<DevicePartition, DataError> {
    let total = check_shards(ds, num_devices, shards_per_device)?;
    let mut seen = vec![false; total];
    if order.len() != total || order.iter().any(|&s| s >= total || std::mem::replace(&mut seen[s], true)) {
        return Err(DataError::Partition(format!("shard order is not a permutation of 0..{total}")));
    }
    let mut sorted: Vec<usize> = (0..ds.len()).collect();
    sorted.sort_by_key(|&i| (ds.label(i), i));
    let shard_size = ds.len() / total;
    sorted.truncate(shard_size * total);

    let mut assignments = vec![Vec::with_capacity(shard_size * shards_per_device); num_devices];
    for (slot, &shard) in order.iter().enumerate() {
        assignments[slot / shards_per_device].extend_from_slice(&sorted[shard * shard_size..(shard + 1) * shard_size]);
    }
    Ok(DevicePartition { assignments, shards_per_device })
}

fn check_shards(ds: &LabeledDataset, num_devices: usize, shards_per_device: usize) -> Result<usize, DataError> {
    if num_devices == 0 || shards_per_device == 0 {
        return Err(DataError::Partition("device and shard counts must be positive".into()));
    }
    let total = num_devices * shards_per_device;
    if total > ds.len() {
        return Err(DataError::Partition(format!("{total} shards requested from {} samples", ds.len())));
    }
    Ok(total)
}

/// Independent minibatch stream for one device.
#[derive(Debug, Clone)]
pub struct DeviceRng(ChaCha8Rng);

impl DeviceRng {
    /// Stream `device` of the run seed.
    pub fn new(seed: u64, device: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(device as u64);
        DeviceRng(rng)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

/// `batch_size` indices drawn uniformly with replacement from `list`.
pub fn minibatch(list: &[usize], batch_size: usize, rng: &mut DeviceRng) -> Vec<usize> {
    assert!(!list.is_empty(), "device holds no samples");
    (0..batch_size).map(|_| list[rng.0.random_range(0..list.len())]).collect()
}
