//! Softmax regression and ReLU MLP classifiers with hand-written backprop.
//!
//! Parameters live in one flat vector. Each dense layer contributes its
//! `out x in` weight block (row-major) followed by its `out` biases, layers in
//! forward order.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::LabeledDataset;

/// Hidden widths of the default MLP.
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 64];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature dimension {got} does not match model input {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, model needs {expected}")]
    ParamMismatch { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Softmax,
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Per-sample loss ceiling; clipped samples contribute no gradient.
    pub clip: Option<f64>,
}

/// One dense layer `in -> out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Softmax, input_dim, num_classes, clip: None }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp { hidden: hidden.to_vec() }, input_dim, num_classes, clip: None }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    /// `2 log M`, twice the loss of a uniform predictor.
    pub fn default_clip(num_classes: usize) -> f64 {
        2.0 * (num_classes as f64).ln()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(ModelError::Invalid("need input_dim >= 1 and at least 2 classes".into()));
        }
        if let ModelKind::Mlp { hidden } = &self.kind {
            if hidden.contains(&0) {
                return Err(ModelError::Invalid("hidden widths must be positive".into()));
            }
        }
        if let Some(c) = self.clip {
            if !(c >= 0.0) {
                return Err(ModelError::Invalid(format!("clip ceiling must be non-negative, got {c}")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut widths = vec![self.input_dim];
        if let ModelKind::Mlp { hidden } = &self.kind {
            widths.extend_from_slice(hidden);
        }
        widths.push(self.num_classes);
        widths.windows(2).map(|w| LayerShape { inputs: w[0], outputs: w[1] }).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(LayerShape::num_params).sum()
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Little-endian `u64` length followed by the `f64` entries.
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(&(self.0.len() as u64).to_le_bytes())?;
        for x in &self.0 {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> io::Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let len = u64::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            input.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Ok(ParamVector(values))
    }
}

/// Kaiming-uniform weights (`U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`) and zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.num_params());
    for layer in spec.layers() {
        let bound = (6.0 / layer.inputs as f64).sqrt();
        values.extend((0..layer.inputs * layer.outputs).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, layer.outputs));
    }
    ParamVector(values)
}

/// Reusable per-sample activations.
struct Workspace {
    /// Post-activation values per layer input; `acts[0]` is the sample.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(layers: &[LayerShape]) -> Self {
        Workspace {
            acts: layers.iter().map(|l| vec![0.0; l.inputs]).collect(),
            logits: vec![0.0; layers.last().map_or(0, |l| l.outputs)],
            deltas: layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
        }
    }
}

fn check_inputs(spec: &ModelSpec, theta: &ParamVector, ds: &LabeledDataset) -> Result<Vec<LayerShape>, ModelError> {
    let layers = spec.layers();
    let expected: usize = layers.iter().map(LayerShape::num_params).sum();
    if theta.len() != expected {
        return Err(ModelError::ParamMismatch { expected, got: theta.len() });
    }
    if ds.dim() != spec.input_dim {
        return Err(ModelError::DimMismatch { expected: spec.input_dim, got: ds.dim() });
    }
    Ok(layers)
}

/// Forward pass; leaves the logits in `ws.logits`.
fn forward(layers: &[LayerShape], theta: &[f64], x: &[f64], ws: &mut Workspace) -> Result<(), ModelError> {
    ws.acts[0].copy_from_slice(x);
    let mut offset = 0;
    let last = layers.len() - 1;
    for (l, shape) in layers.iter().enumerate() {
        let (w, rest) = theta[offset..].split_at(shape.inputs * shape.outputs);
        let b = &rest[..shape.outputs];
        offset += shape.num_params();
        let (input, out) = if l == last {
            (&ws.acts[l], &mut ws.logits)
        } else {
            let (lo, hi) = ws.acts.split_at_mut(l + 1);
            (&lo[l], &mut hi[0])
        };
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
            let z = b[o] + row.iter().zip(input.iter()).map(|(a, b)| a * b).sum::<f64>();
            *out_v = if l == last { z } else { z.max(0.0) };
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: l });
        }
    }
    Ok(())
}

/// Numerically stable log-softmax of `logits` into `out`.
fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Class probabilities for one sample.
pub fn predict_proba(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let layers = spec.layers();
    if x.len() != spec.input_dim {
        return Err(ModelError::DimMismatch { expected: spec.input_dim, got: x.len() });
    }
    let mut ws = Workspace::new(&layers);
    forward(&layers, &theta.0, x, &mut ws)?;
    let mut logp = vec![0.0; spec.num_classes];
    log_softmax(&ws.logits, &mut logp);
    Ok(logp.into_iter().map(f64::exp).collect())
}

/// Mean cross-entropy over `batch` and its exact gradient.
///
/// Samples whose loss exceeds the clip ceiling count as the ceiling and
/// contribute nothing to the gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    ds: &LabeledDataset,
    batch: &[usize],
) -> Result<(f64, ParamVector), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let layers = check_inputs(spec, theta, ds)?;
    let mut ws = Workspace::new(&layers);
    let mut grad = vec![0.0; theta.len()];
    let mut logp = vec![0.0; spec.num_classes];
    let mut total = 0.0;

    for &i in batch {
        forward(&layers, &theta.0, ds.features(i), &mut ws)?;
        log_softmax(&ws.logits, &mut logp);
        let y = ds.label(i);
        let ce = -logp[y];
        if let Some(ceiling) = spec.clip {
            if ce > ceiling {
                total += ceiling;
                continue;
            }
        }
        total += ce;
        backward(&layers, &theta.0, &logp, y, &mut ws, &mut grad);
    }

    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, ParamVector(grad)))
}

/// Accumulates the per-sample gradient into `grad`.
fn backward(layers: &[LayerShape], theta: &[f64], logp: &[f64], label: usize, ws: &mut Workspace, grad: &mut [f64]) {
    let last = layers.len() - 1;
    for (d, lp) in ws.deltas[last].iter_mut().zip(logp) {
        *d = lp.exp();
    }
    ws.deltas[last][label] -= 1.0;

    let mut offsets: Vec<usize> = layers
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.num_params();
            Some(start)
        })
        .collect();
    for l in (0..layers.len()).rev() {
        let shape = layers[l];
        let off = offsets.pop().unwrap();
        let (gw, gb) = grad[off..off + shape.num_params()].split_at_mut(shape.inputs * shape.outputs);
        let input = &ws.acts[l];
        let delta = &ws.deltas[l];
        for o in 0..shape.outputs {
            gb[o] += delta[o];
            let row = &mut gw[o * shape.inputs..(o + 1) * shape.inputs];
            for (g, a) in row.iter_mut().zip(input) {
                *g += delta[o] * a;
            }
        }
        if l > 0 {
            let w = &theta[off..off + shape.inputs * shape.outputs];
            let (lo, hi) = ws.deltas.split_at_mut(l);
            let prev = &mut lo[l - 1];
            let delta = &hi[0];
            for (k, p) in prev.iter_mut().enumerate() {
                // ReLU derivative via the stored post-activation.
                *p = if input[k] > 0.0 {
                    (0..shape.outputs).map(|o| w[o * shape.inputs + k] * delta[o]).sum()
                } else {
                    0.0
                };
            }
        }
    }
}

/// Mean (possibly clipped) cross-entropy over `indices`.
pub fn mean_loss(
    spec: &ModelSpec,
    theta: &ParamVector,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<f64, ModelError> {
    if indices.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let layers = check_inputs(spec, theta, ds)?;
    let mut ws = Workspace::new(&layers);
    let mut logp = vec![0.0; spec.num_classes];
    let mut total = 0.0;
    for &i in indices {
        forward(&layers, &theta.0, ds.features(i), &mut ws)?;
        log_softmax(&ws.logits, &mut logp);
        let ce = -logp[ds.label(i)];
        total += spec.clip.map_or(ce, |c| ce.min(c));
    }
    Ok(total / indices.len() as f64)
}

/// Fraction of `indices` whose argmax prediction (lowest index on ties) is correct.
pub fn accuracy(
    spec: &ModelSpec,
    theta: &ParamVector,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<f64, ModelError> {
    if indices.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let layers = check_inputs(spec, theta, ds)?;
    let mut ws = Workspace::new(&layers);
    let mut correct = 0usize;
    for &i in indices {
        forward(&layers, &theta.0, ds.features(i), &mut ws)?;
        let mut best = 0;
        for (c, &z) in ws.logits.iter().enumerate() {
            if z > ws.logits[best] {
                best = c;
            }
        }
        if best == ds.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
