//! Communication graphs and doubly stochastic gossip matrices.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

const MAX_ER_ATTEMPTS: usize = 1000;
const STOCHASTIC_TOL: f64 = 1e-12;
const GAP_TOL: f64 = 1e-10;

/// Undirected, connected, loop-free graph over `n` agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<bool>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicate edges are
    /// merged; self loops and disconnected results are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let g = Self::from_edges_unchecked(n, edges)?;
        if !g.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(g)
    }

    /// One agent, no edges. Only meaningful for protocols that never gossip
    /// (IL, or FL with a separate server).
    pub fn singleton() -> Self {
        Self {
            n: 1,
            adjacency: vec![false],
            degrees: vec![0],
        }
    }

    fn from_edges_unchecked(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("graph needs n >= 2 agents, got {n}")));
        }
        let mut adjacency = vec![false; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) out of range for n={n}")));
            }
            if i == j {
                return Err(Error::invalid(format!("self loop at node {i}")));
            }
            adjacency[i * n + j] = true;
            adjacency[j * n + i] = true;
        }
        let degrees = (0..n)
            .map(|i| adjacency[i * n..(i + 1) * n].iter().filter(|&&a| a).count())
            .collect();
        Ok(Self { n, adjacency, degrees })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.adjacency[i * self.n + j]
    }

    /// Neighbors of `i` in increasing id order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.degrees.iter().sum::<usize>() / 2
    }

    /// Unordered edges `(i, j)` with `i < j`, lexicographically sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for (j, s) in seen.iter_mut().enumerate() {
                if !*s && self.has_edge(i, j) {
                    *s = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Serializes as `i j` lines (0-indexed, `i < j`) preceded by an `# n=`
    /// header so isolated trailing ids survive a round trip.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# n={}\n", self.n);
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut n_header = None;
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("n=") {
                    n_header = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Parse(format!("line {}: bad node count: {e}", lineno + 1)))?,
                    );
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = || -> Result<usize> {
                parts
                    .next()
                    .ok_or_else(|| Error::Parse(format!("line {}: expected `i j`", lineno + 1)))?
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let (i, j) = (next()?, next()?);
            edges.push((i, j));
        }
        let inferred = edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        let n = n_header.unwrap_or(inferred);
        Self::from_edges(n, &edges)
    }
}

/// Erdős–Rényi G(n, p). Each unordered pair is linked independently with
/// probability `p`; disconnected draws are retried with `seed + 1, seed + 2, ...`.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::invalid(format!("Erdős–Rényi needs n >= 2, got {n}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("Erdős–Rényi needs 0 < p <= 1, got {p}")));
    }
    for attempt in 0..MAX_ER_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::from_edges_unchecked(n, &edges)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Unconnectable {
        n,
        p,
        attempts: MAX_ER_ATTEMPTS,
    })
}

pub fn ring(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::invalid(format!("ring needs n >= 3, got {n}")));
    }
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Graph::from_edges(n, &edges)
}

pub fn complete(n: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    Graph::from_edges(n, &edges)
}

/// Star graph: `hub` linked to every other node. Used as the agent/server
/// topology for centralized averaging.
pub fn star(n: usize, hub: usize) -> Result<Graph> {
    let edges: Vec<_> = (0..n).filter(|&i| i != hub).map(|i| (i, hub)).collect();
    Graph::from_edges(n, &edges)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralDiagnostics {
    /// Second-largest eigenvalue magnitude.
    pub rho: f64,
    pub gap: f64,
    /// Eigenvalues sorted by decreasing magnitude.
    pub eigenvalues: Vec<f64>,
}

/// Eigen-analysis of a symmetric stochastic matrix. `rho` is the largest
/// magnitude once the Perron eigenvalue 1 is removed, i.e. `||W - 11^T/n||_2`.
pub fn spectral_diagnostics(weights: &DMatrix<f64>) -> Result<SpectralDiagnostics> {
    let asym = max_asymmetry(weights);
    if asym > 0.0 {
        return Err(Error::Asymmetric(asym));
    }
    let eig = SymmetricEigen::new(weights.clone());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.abs().total_cmp(&a.abs()).then(b.total_cmp(a)));
    let perron = eigenvalues
        .iter()
        .position(|&l| (l - 1.0).abs() <= GAP_TOL)
        .ok_or_else(|| {
            Error::NotDoublyStochastic(format!("no eigenvalue equal to 1 (largest is {})", eigenvalues[0]))
        })?;
    let rho = eigenvalues
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != perron)
        .map(|(_, l)| l.abs())
        .fold(0.0, f64::max);
    Ok(SpectralDiagnostics {
        rho,
        gap: 1.0 - rho,
        eigenvalues,
    })
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric doubly stochastic gossip matrix with its spectrum.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    spectrum: SpectralDiagnostics,
}

impl MixingMatrix {
    /// Metropolis–Hastings weights. The non-lazy rule uses `1/max(d_i, d_j)`
    /// off the diagonal; the lazy rule `1/(1 + max(d_i, d_j))`.
    pub fn metropolis(g: &Graph, lazy: bool) -> Result<Self> {
        let n = g.n();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && g.has_edge(i, j) {
                    let m = g.degree(i).max(g.degree(j)) as f64;
                    w[(i, j)] = if lazy { 1.0 / (1.0 + m) } else { 1.0 / m };
                }
            }
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::from_weights(w, Some(g))
    }

    /// Averaging matrix `Q = 11^T / n`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(DMatrix::from_element(n, n, 1.0 / n as f64), None)
    }

    /// Validates symmetry, stochasticity, nonnegativity, graph support and a
    /// positive spectral gap.
    pub fn from_weights(weights: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self> {
        let m = Self::validated(weights, graph)?;
        if m.spectrum.rho >= 1.0 - GAP_TOL {
            return Err(Error::NoSpectralGap { rho: m.spectrum.rho });
        }
        Ok(m)
    }

    /// `W = I`: no mixing at all. Has no spectral gap, so it is only meant
    /// for diagnostics (it turns D-SGD into independent learning).
    pub fn identity(n: usize) -> Self {
        Self::validated(DMatrix::identity(n, n), None).expect("identity is doubly stochastic")
    }

    fn validated(weights: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n {
            return Err(Error::Dimension {
                what: "mixing matrix columns",
                expected: n,
                got: weights.ncols(),
            });
        }
        if let Some(g) = graph {
            if g.n() != n {
                return Err(Error::Dimension {
                    what: "mixing matrix size",
                    expected: g.n(),
                    got: n,
                });
            }
        }
        let asym = max_asymmetry(&weights);
        if asym > 0.0 {
            return Err(Error::Asymmetric(asym));
        }
        for i in 0..n {
            let row: f64 = weights.row(i).iter().sum();
            let col: f64 = weights.column(i).iter().sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotDoublyStochastic(format!(
                    "row/column {i} sums to {row}/{col}"
                )));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if w < 0.0 || !w.is_finite() {
                    return Err(Error::NotDoublyStochastic(format!("entry ({i},{j}) = {w}")));
                }
                if let Some(g) = graph {
                    if i != j && w != 0.0 && !g.has_edge(i, j) {
                        return Err(Error::NotDoublyStochastic(format!("weight on non-edge ({i},{j})")));
                    }
                }
            }
        }
        let spectrum = spectral_diagnostics(&weights)?;
        Ok(Self { weights, spectrum })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn rho(&self) -> f64 {
        self.spectrum.rho
    }

    pub fn spectral_gap(&self) -> f64 {
        self.spectrum.gap
    }

    pub fn diagnostics(&self) -> &SpectralDiagnostics {
        &self.spectrum
    }

    /// `sum_j W(i,j) v_j` over the support of row `i`, accumulated in
    /// increasing `j` order.
    pub fn mix_row(&self, i: usize, vectors: &[&[f64]]) -> Vec<f64> {
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut out = vec![0.0; dim];
        for (j, v) in vectors.iter().enumerate() {
            let w = self.weights[(i, j)];
            if w != 0.0 {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o += w * x;
                }
            }
        }
        out
    }

    /// Applies the matrix to every agent's vector at once.
    pub fn mix_all(&self, vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
        (0..self.n()).map(|i| self.mix_row(i, &refs)).collect()
    }
}
