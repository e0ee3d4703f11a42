//! Communication graphs, doubly stochastic mixing matrices and their spectra.
//!
//! A [`MixingSystem`] pairs a connected [`Graph`] with a symmetric, doubly
//! stochastic gossip matrix `W` and caches the spectra of `W` and of the
//! Laplacian `L = I - W`. Every quantity that drives the consensus and
//! convergence bounds (`beta`, `beta_bar`) is read off those spectra.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used to decide that a Laplacian eigenvalue is zero.
pub const ZERO_EIGEN_TOL: f64 = 1e-10;

/// Tolerance for symmetry and row/column sums of `W`.
pub const STOCHASTIC_TOL: f64 = 1e-12;

const ER_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid topology parameter: {0}")]
    Parameter(String),
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("erdos-renyi graph still disconnected after {retries} resamples")]
    RetryBudgetExhausted { retries: usize },
    #[error("mixing matrix is not symmetric: |W[{i}][{j}] - W[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("mixing matrix is not doubly stochastic: {axis} {index} sums to {sum}")]
    NotStochastic { axis: &'static str, index: usize, sum: f64 },
    #[error("mixing matrix weight W[{i}][{j}] = {weight} on a non-edge")]
    SparsityViolation { i: usize, j: usize, weight: f64 },
    #[error("mixing matrix has eigenvalue {value} outside (-1, 1]")]
    SpectrumOutOfRange { value: f64 },
    #[error("mixing matrix has {count} unit eigenvalues; expected exactly one")]
    UnitEigenMultiplicity { count: usize },
    #[error("degenerate network: Laplacian spectrum is identically zero")]
    Degenerate,
    #[error("dimension mismatch: expected {expected} rows, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

/// Undirected simple graph on vertices `0..vertex_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    vertex_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from an edge list. Pairs are normalised to `(min, max)`;
    /// duplicates collapse, self-loops and out-of-range vertices are rejected.
    pub fn new<I>(vertex_count: usize, edges: I) -> Result<Self, NetworkError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if vertex_count == 0 {
            return Err(NetworkError::Parameter("graph needs at least one vertex".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(NetworkError::Parameter(format!("self-loop at vertex {a}")));
            }
            if a >= vertex_count || b >= vertex_count {
                return Err(NetworkError::Parameter(format!(
                    "edge ({a}, {b}) out of range for {vertex_count} vertices"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { vertex_count, edges: set })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertex_count];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| match (a == v, b == v) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Number of connected components (breadth-first search).
    pub fn component_count(&self) -> usize {
        let mut adj = vec![Vec::new(); self.vertex_count];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.vertex_count];
        let mut components = 0;
        for start in 0..self.vertex_count {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }
}

/// Named topology families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Ring,
    Path,
    Complete,
    Star,
    Grid2d { rows: usize, cols: usize },
    ErdosRenyi { p: f64, seed: u64 },
}

/// Generates a named topology on `m` vertices.
///
/// A ring on two vertices is the single edge `(0, 1)`. Erdős–Rényi graphs are
/// resampled from a seeded stream until connected.
pub fn build_topology(kind: Topology, m: usize) -> Result<Graph, NetworkError> {
    if m < 2 {
        return Err(NetworkError::Parameter(format!("topology needs m >= 2, got {m}")));
    }
    match kind {
        Topology::Ring => Graph::new(m, (0..m).map(|i| (i, (i + 1) % m))),
        Topology::Path => Graph::new(m, (0..m - 1).map(|i| (i, i + 1))),
        Topology::Complete => Graph::new(m, (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j)))),
        Topology::Star => Graph::new(m, (1..m).map(|i| (0, i))),
        Topology::Grid2d { rows, cols } => {
            if rows == 0 || cols == 0 || rows * cols != m {
                return Err(NetworkError::Parameter(format!(
                    "grid2d needs rows*cols = m, got {rows}x{cols} for m = {m}"
                )));
            }
            let idx = |r: usize, c: usize| r * cols + c;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        edges.push((idx(r, c), idx(r, c + 1)));
                    }
                    if r + 1 < rows {
                        edges.push((idx(r, c), idx(r + 1, c)));
                    }
                }
            }
            Graph::new(m, edges)
        }
        Topology::ErdosRenyi { p, seed } => {
            if !(p > 0.0 && p < 1.0) {
                return Err(NetworkError::Parameter(format!("edge probability must lie in (0, 1), got {p}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..ER_RETRY_BUDGET {
                let mut edges = Vec::new();
                for i in 0..m {
                    for j in i + 1..m {
                        if rng.random::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                let g = Graph::new(m, edges)?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
            Err(NetworkError::RetryBudgetExhausted { retries: ER_RETRY_BUDGET })
        }
    }
}

/// A connected graph with its gossip matrix and cached spectra.
#[derive(Debug, Clone)]
pub struct MixingSystem {
    graph: Graph,
    weights: DMatrix<f64>,
    /// Eigenvalues of `W`, nonincreasing.
    mixing_spectrum: Vec<f64>,
    /// Eigenvalues of `L = I - W`, nondecreasing.
    laplacian_spectrum: Vec<f64>,
}

/// `(beta, beta_bar, lambda2_L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    /// Second-largest eigenvalue of `W`.
    pub beta: f64,
    /// Smallest nonzero eigenvalue of `L = I - W`.
    pub beta_bar: f64,
    /// Second-smallest eigenvalue of `L`.
    pub lambda2_laplacian: f64,
}

impl MixingSystem {
    /// Validates `weights` against `graph` and computes both spectra.
    pub fn from_weights(graph: Graph, weights: DMatrix<f64>) -> Result<Self, NetworkError> {
        let components = graph.component_count();
        if components != 1 {
            return Err(NetworkError::Disconnected { components });
        }
        check_weights(&graph, &weights)?;
        let mut mixing_spectrum: Vec<f64> = weights.clone().symmetric_eigenvalues().iter().copied().collect();
        mixing_spectrum.sort_by(|a, b| b.total_cmp(a));
        if let Some(&bad) = mixing_spectrum.iter().find(|&&l| l > 1.0 + ZERO_EIGEN_TOL || l <= -1.0 + ZERO_EIGEN_TOL) {
            return Err(NetworkError::SpectrumOutOfRange { value: bad });
        }
        let units = mixing_spectrum.iter().filter(|&&l| (l - 1.0).abs() <= ZERO_EIGEN_TOL).count();
        if units != 1 {
            return Err(NetworkError::UnitEigenMultiplicity { count: units });
        }
        let laplacian_spectrum: Vec<f64> = mixing_spectrum.iter().map(|l| 1.0 - l).collect();
        Ok(Self { graph, weights, mixing_spectrum, laplacian_spectrum })
    }

    /// The trivial one-agent system `W = [1]`.
    pub fn single_agent() -> Self {
        Self {
            graph: Graph { vertex_count: 1, edges: BTreeSet::new() },
            weights: DMatrix::from_element(1, 1, 1.0),
            mixing_spectrum: vec![1.0],
            laplacian_spectrum: vec![0.0],
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn agent_count(&self) -> usize {
        self.graph.vertex_count
    }

    pub fn mixing_spectrum(&self) -> &[f64] {
        &self.mixing_spectrum
    }

    pub fn laplacian_spectrum(&self) -> &[f64] {
        &self.laplacian_spectrum
    }

    /// Smallest eigenvalue of `W`.
    pub fn lambda_min(&self) -> f64 {
        *self.mixing_spectrum.last().expect("spectrum is never empty")
    }

    pub fn spectral_summary(&self) -> Result<SpectralSummary, NetworkError> {
        spectral_summary(self)
    }

    /// Re-runs every structural check on the stored matrix.
    pub fn check_invariants(&self) -> Result<(), NetworkError> {
        check_weights(&self.graph, &self.weights)
    }

    /// Removes the invariant checks; only for fault-injection tests.
    #[doc(hidden)]
    pub fn with_weights_unchecked(&self, weights: DMatrix<f64>) -> Self {
        Self { weights, ..self.clone() }
    }
}

fn check_weights(graph: &Graph, w: &DMatrix<f64>) -> Result<(), NetworkError> {
    let m = graph.vertex_count;
    if w.nrows() != m || w.ncols() != m {
        return Err(NetworkError::Dimension { expected: m, actual: w.nrows() });
    }
    for i in 0..m {
        for j in i + 1..m {
            let gap = (w[(i, j)] - w[(j, i)]).abs();
            if gap > STOCHASTIC_TOL {
                return Err(NetworkError::NotSymmetric { i, j, gap });
            }
            if w[(i, j)] != 0.0 && !graph.has_edge(i, j) {
                return Err(NetworkError::SparsityViolation { i, j, weight: w[(i, j)] });
            }
        }
    }
    for i in 0..m {
        let row: f64 = w.row(i).iter().sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL {
            return Err(NetworkError::NotStochastic { axis: "row", index: i, sum: row });
        }
        let col: f64 = w.column(i).iter().sum();
        if (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(NetworkError::NotStochastic { axis: "column", index: i, sum: col });
        }
    }
    Ok(())
}

/// Metropolis–Hastings weights: `W_ij = 1 / (1 + max(deg_i, deg_j))` on edges,
/// with the diagonal absorbing the remainder of each row.
pub fn metropolis_weights(graph: &Graph) -> Result<MixingSystem, NetworkError> {
    let components = graph.component_count();
    if components != 1 {
        return Err(NetworkError::Disconnected { components });
    }
    let m = graph.vertex_count;
    let deg = graph.degrees();
    let mut w = DMatrix::zeros(m, m);
    for (a, b) in graph.edges() {
        let weight = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        w[(a, b)] = weight;
        w[(b, a)] = weight;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    if m == 1 {
        return Ok(MixingSystem::single_agent());
    }
    MixingSystem::from_weights(graph.clone(), w)
}

/// Lazy gossip `theta * W + (1 - theta) * I`; eigenvalues map affinely.
pub fn lazy_mix(sys: &MixingSystem, theta: f64) -> Result<MixingSystem, NetworkError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(NetworkError::Parameter(format!("laziness must lie in (0, 1], got {theta}")));
    }
    if theta == 1.0 {
        return Ok(sys.clone());
    }
    let m = sys.agent_count();
    let w = sys.weights.scale(theta) + DMatrix::identity(m, m).scale(1.0 - theta);
    let mut out = sys.clone();
    out.mixing_spectrum = sys.mixing_spectrum.iter().map(|l| theta * l + 1.0 - theta).collect();
    out.laplacian_spectrum = sys.laplacian_spectrum.iter().map(|l| theta * l).collect();
    out.weights = w;
    check_weights(&out.graph, &out.weights)?;
    Ok(out)
}

pub fn spectral_summary(sys: &MixingSystem) -> Result<SpectralSummary, NetworkError> {
    if sys.agent_count() < 2 {
        return Err(NetworkError::Degenerate);
    }
    let beta_bar =
        sys.laplacian_spectrum.iter().copied().find(|&l| l > ZERO_EIGEN_TOL).ok_or(NetworkError::Degenerate)?;
    Ok(SpectralSummary { beta: sys.mixing_spectrum[1], beta_bar, lambda2_laplacian: sys.laplacian_spectrum[1] })
}

/// Row-wise application of `L = I - W` to an `m x d` state.
pub fn laplacian_apply(sys: &MixingSystem, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NetworkError> {
    if x.nrows() != sys.agent_count() {
        return Err(NetworkError::Dimension { expected: sys.agent_count(), actual: x.nrows() });
    }
    Ok(x - &sys.weights * x)
}

/// JSON form of a [`MixingSystem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingDocument {
    pub vertex_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// Nonzero entries `(i, j, W_ij)` with `i <= j`.
    pub weights: Vec<(usize, usize, f64)>,
    pub spectral: Option<SpectralSummary>,
    pub mixing_spectrum: Vec<f64>,
    pub laplacian_spectrum: Vec<f64>,
    pub zero_eigen_tol: f64,
}

impl MixingSystem {
    pub fn to_document(&self) -> MixingDocument {
        let m = self.agent_count();
        let mut weights = Vec::new();
        for i in 0..m {
            for j in i..m {
                if self.weights[(i, j)] != 0.0 {
                    weights.push((i, j, self.weights[(i, j)]));
                }
            }
        }
        MixingDocument {
            vertex_count: m,
            edges: self.graph.edges().collect(),
            weights,
            spectral: self.spectral_summary().ok(),
            mixing_spectrum: self.mixing_spectrum.clone(),
            laplacian_spectrum: self.laplacian_spectrum.clone(),
            zero_eigen_tol: ZERO_EIGEN_TOL,
        }
    }

    /// Rebuilds a system from its document. Spectra are recomputed, not trusted.
    pub fn from_document(doc: &MixingDocument) -> Result<Self, NetworkError> {
        let graph = Graph::new(doc.vertex_count, doc.edges.iter().copied())?;
        if doc.vertex_count == 1 {
            return Ok(Self::single_agent());
        }
        let mut w = DMatrix::zeros(doc.vertex_count, doc.vertex_count);
        for &(i, j, v) in &doc.weights {
            if i >= doc.vertex_count || j >= doc.vertex_count {
                return Err(NetworkError::Parameter(format!("weight index ({i}, {j}) out of range")));
            }
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        Self::from_weights(graph, w)
    }
}
