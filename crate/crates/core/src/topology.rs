//! Communication graphs and the gossip mixing matrices built on them.
//!
//! Generators return connected, undirected graphs without self-loops. Random
//! generators redraw a disconnected sample on the next ChaCha stream of the
//! same seed, giving up after [`MAX_RESAMPLE_ATTEMPTS`] draws.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of redraws allowed before a random generator gives up.
pub const MAX_RESAMPLE_ATTEMPTS: u64 = 1000;

/// Relative tolerance used by the power iteration in [`spectral_norm`].
pub const POWER_ITERATION_TOL: f64 = 1e-10;

/// Iteration cap for [`spectral_norm`].
pub const POWER_ITERATION_CAP: usize = 10_000;

/// Tolerance on row and column sums of a mixing matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Default radius of the random geometric graph.
pub const DEFAULT_GEOMETRIC_RADIUS: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid graph parameters: {0}")]
    InvalidParameters(String),
    #[error("could not draw a connected {kind} graph in {attempts} attempts; increase the density parameter")]
    NotConnected { kind: &'static str, attempts: u64 },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("invalid edge ({0}, {1})")]
    InvalidEdge(usize, usize),
    #[error("malformed edge list at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("mixing matrix violates an invariant: {0}")]
    InvalidMixing(String),
    #[error("power iteration did not converge in {0} iterations")]
    NoConvergence(usize),
}

/// Undirected connected communication graph over devices `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Duplicate and reversed pairs are merged.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if num_nodes == 0 {
            return Err(TopologyError::InvalidParameters("graph needs at least one node".into()));
        }
        let mut sets = vec![BTreeSet::new(); num_nodes];
        for &(i, j) in edges {
            if i == j || i >= num_nodes || j >= num_nodes {
                return Err(TopologyError::InvalidEdge(i, j));
            }
            sets[i].insert(j);
            sets[j].insert(i);
        }
        let graph = Graph::from_sets(sets);
        if !graph.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(graph)
    }

    fn from_sets(sets: Vec<BTreeSet<usize>>) -> Self {
        Graph { neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() }
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighbor list of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges as `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == n
    }

    /// Edge-list text: the node count, then one ascending `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.num_nodes());
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}").unwrap();
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let (first, header) =
            lines.next().ok_or(TopologyError::Parse { line: 1, reason: "missing node count".into() })?;
        let num_nodes: usize = header
            .parse()
            .map_err(|_| TopologyError::Parse { line: first, reason: format!("bad node count {header:?}") })?;
        let mut edges = Vec::new();
        for (line, l) in lines {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
                _ => None,
            };
            let edge = parsed.ok_or(TopologyError::Parse { line, reason: format!("expected `i j`, got {l:?}") })?;
            edges.push(edge);
        }
        Graph::from_edges(num_nodes, &edges)
    }
}

fn connected_sets(sets: &[BTreeSet<usize>]) -> bool {
    let n = sets.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &sets[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Redraws `sample` on streams `0, 1, 2, ...` of `seed` until it is connected.
fn resample_until_connected<F>(kind: &'static str, seed: u64, mut sample: F) -> Result<Graph, TopologyError>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<BTreeSet<usize>>,
{
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let sets = sample(&mut rng);
        if connected_sets(&sets) {
            return Ok(Graph::from_sets(sets));
        }
    }
    Err(TopologyError::NotConnected { kind, attempts: MAX_RESAMPLE_ATTEMPTS })
}

/// G(K, p): every unordered pair is an edge independently with probability `p`.
pub fn generate_erdos_renyi(num_nodes: usize, p: f64, seed: u64) -> Result<Graph, TopologyError> {
    if num_nodes < 2 {
        return Err(TopologyError::InvalidParameters(format!("erdos_renyi needs K >= 2, got {num_nodes}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(TopologyError::InvalidParameters(format!("connectivity ratio must lie in (0, 1], got {p}")));
    }
    resample_until_connected("erdos_renyi", seed, |rng| {
        let mut sets = vec![BTreeSet::new(); num_nodes];
        for i in 0..num_nodes {
            for j in i + 1..num_nodes {
                if rng.random::<f64>() < p {
                    sets[i].insert(j);
                    sets[j].insert(i);
                }
            }
        }
        sets
    })
}

/// Cycle `i <-> i+1 mod K`.
pub fn generate_ring(num_nodes: usize) -> Result<Graph, TopologyError> {
    if num_nodes < 3 {
        return Err(TopologyError::InvalidParameters(format!("ring needs K >= 3, got {num_nodes}")));
    }
    let edges: Vec<_> = (0..num_nodes).map(|i| (i, (i + 1) % num_nodes)).collect();
    Graph::from_edges(num_nodes, &edges)
}

/// Bounded `rows x cols` lattice with 4-neighborhoods; node `r * cols + c`.
pub fn generate_grid(rows: usize, cols: usize, num_nodes: usize) -> Result<Graph, TopologyError> {
    if rows == 0 || cols == 0 || rows * cols != num_nodes {
        return Err(TopologyError::InvalidParameters(format!("grid {rows}x{cols} does not have {num_nodes} nodes")));
    }
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if c + 1 < cols {
                edges.push((id, id + 1));
            }
            if r + 1 < rows {
                edges.push((id, id + cols));
            }
        }
    }
    Graph::from_edges(num_nodes, &edges)
}

/// Random geometric graph in the unit square: edge iff distance <= `radius`.
pub fn generate_geometric(num_nodes: usize, radius: f64, seed: u64) -> Result<Graph, TopologyError> {
    if num_nodes < 2 {
        return Err(TopologyError::InvalidParameters(format!("geometric needs K >= 2, got {num_nodes}")));
    }
    if !(radius > 0.0) {
        return Err(TopologyError::InvalidParameters(format!("radius must be positive, got {radius}")));
    }
    resample_until_connected("geometric", seed, |rng| {
        let pos: Vec<(f64, f64)> = (0..num_nodes).map(|_| (rng.random(), rng.random())).collect();
        let mut sets = vec![BTreeSet::new(); num_nodes];
        for i in 0..num_nodes {
            for j in i + 1..num_nodes {
                let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
                if (dx * dx + dy * dy).sqrt() <= radius {
                    sets[i].insert(j);
                    sets[j].insert(i);
                }
            }
        }
        sets
    })
}

/// Symmetric doubly stochastic gossip matrix with its cached contraction factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    spectral_norm: f64,
}

impl MixingMatrix {
    /// Wraps externally built weights after checking symmetry, stochasticity and range.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self, TopologyError> {
        verify_mixing(&entries, None)?;
        let spectral_norm = spectral_norm(&entries)?;
        Ok(MixingMatrix { entries, spectral_norm })
    }

    /// Uniform averaging `J = 11^T / K`.
    pub fn uniform(num_nodes: usize) -> Self {
        let k = num_nodes as f64;
        MixingMatrix { entries: DMatrix::from_element(num_nodes, num_nodes, 1.0 / k), spectral_norm: 0.0 }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn num_nodes(&self) -> usize {
        self.entries.nrows()
    }

    /// `rho = ||W^T W - J||_2`.
    pub fn spectral_norm(&self) -> f64 {
        self.spectral_norm
    }
}

/// Metropolis weights: `1 / (1 + max(d_i, d_j))` on edges, diagonal completes each row.
pub fn metropolis_weights(graph: &Graph) -> Result<MixingMatrix, TopologyError> {
    let k = graph.num_nodes();
    let mut w = DMatrix::zeros(k, k);
    for i in 0..k {
        let di = graph.degree(i);
        let mut off = 0.0;
        for &j in graph.neighbors(i) {
            let wij = 1.0 / (1.0 + di.max(graph.degree(j)) as f64);
            w[(i, j)] = wij;
            off += wij;
        }
        w[(i, i)] = 1.0 - off;
    }
    verify_mixing(&w, Some(graph))?;
    let spectral_norm = spectral_norm(&w)?;
    Ok(MixingMatrix { entries: w, spectral_norm })
}

/// Checks the mixing-matrix invariants; with a graph, also checks the support.
pub fn verify_mixing(w: &DMatrix<f64>, graph: Option<&Graph>) -> Result<(), TopologyError> {
    let k = w.nrows();
    if k == 0 || w.ncols() != k {
        return Err(TopologyError::InvalidMixing(format!("matrix is {}x{}, not square", w.nrows(), w.ncols())));
    }
    if let Some(g) = graph {
        if g.num_nodes() != k {
            return Err(TopologyError::InvalidMixing(format!("{k} rows for a {}-node graph", g.num_nodes())));
        }
    }
    for i in 0..k {
        for j in 0..k {
            let v = w[(i, j)];
            if !(0.0..=1.0).contains(&v) {
                return Err(TopologyError::InvalidMixing(format!("entry ({i}, {j}) = {v} outside [0, 1]")));
            }
            if v != w[(j, i)] {
                return Err(TopologyError::InvalidMixing(format!("asymmetric at ({i}, {j})")));
            }
            if let Some(g) = graph {
                if i != j && v != 0.0 && !g.has_edge(i, j) {
                    return Err(TopologyError::InvalidMixing(format!("weight on non-edge ({i}, {j})")));
                }
            }
        }
        let row: f64 = w.row(i).iter().sum();
        let col: f64 = w.column(i).iter().sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(TopologyError::InvalidMixing(format!("row/column {i} sums to {row}/{col}")));
        }
    }
    Ok(())
}

/// Largest singular value of `W^T W - J`, by power iteration.
///
/// `W^T W - J` is symmetric positive semidefinite for a doubly stochastic `W`,
/// so `||S v||` for the normalized iterate increases to the top eigenvalue.
pub fn spectral_norm(w: &DMatrix<f64>) -> Result<f64, TopologyError> {
    let k = w.nrows();
    let j = DMatrix::from_element(k, k, 1.0 / k as f64);
    let s = w.transpose() * w - j;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = nalgebra::DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_CAP {
        let sv = &s * &v;
        let norm = sv.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if (norm - estimate).abs() <= POWER_ITERATION_TOL * norm {
            return Ok(norm);
        }
        estimate = norm;
        v = sv / norm;
    }
    Err(TopologyError::NoConvergence(POWER_ITERATION_CAP))
}

/// Both sides of `||A (W^n - J)||_F^2 <= rho^n ||A||_F^2` for a `d x K` matrix `A`.
pub fn contraction_check(a: &DMatrix<f64>, w: &MixingMatrix, power: u32) -> (f64, f64) {
    assert!(power >= 1, "power must be at least 1");
    let k = w.num_nodes();
    assert_eq!(a.ncols(), k, "A must have one column per node");
    let mut wn = w.entries().clone();
    for _ in 1..power {
        wn = &wn * w.entries();
    }
    let j = DMatrix::from_element(k, k, 1.0 / k as f64);
    let lhs = (a * (wn - j)).norm_squared();
    let rhs = w.spectral_norm().powi(power as i32) * a.norm_squared();
    (lhs, rhs)
}
