//! Sample and feature graphs: K-NN search, Gaussian weights, normalized
//! Laplacians, spectral norms and partial eigendecompositions.

mod eigs;
mod knn;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use eigs::{partial_eigs, GraphEigs, DENSE_EIG_CUTOFF};
pub use knn::{knn_approx, knn_approx_with, knn_exact, ApproxKnnParams, NeighborList};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Kernel width of the Gaussian weights `exp(-d^2 / sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Sigma2 {
    Fixed(f64),
    /// `sigma^2 = (mean neighbor distance)^2`.
    Auto,
}

impl Default for Sigma2 {
    fn default() -> Self {
        Sigma2::Fixed(1.0)
    }
}

impl std::str::FromStr for Sigma2 {
    type Err = Error;

    /// `auto` or a positive number.
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Sigma2::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Sigma2::Fixed(v)),
            _ => Err(Error::InvalidArgument(format!(
                "sigma2 must be a positive number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

impl std::fmt::Display for Sigma2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sigma2::Fixed(v) => write!(f, "{v}"),
            Sigma2::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnSearch {
    Exact,
    /// Approximate search meeting the given recall against exact search.
    Approx { recall: f64 },
}

/// How to turn a point set into a graph.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GraphConfig {
    pub k: usize,
    #[serde(serialize_with = "serialize_display")]
    pub sigma2: Sigma2,
    pub search: KnnSearch,
}

fn serialize_display<S: serde::Serializer>(v: &Sigma2, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Sigma2::Fixed(x) => s.serialize_f64(*x),
        Sigma2::Auto => s.serialize_str("auto"),
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 10,
            sigma2: Sigma2::default(),
            search: KnnSearch::Exact,
        }
    }
}

impl GraphConfig {
    /// K-NN graph over the columns of `points`. `K` is clipped to `n - 1` so
    /// that small inputs still produce a graph.
    pub fn build(&self, points: &DMatrix<f64>) -> Result<SparseGraph> {
        let n = points.ncols();
        if n < 2 {
            return Ok(SparseGraph::edgeless(n));
        }
        let k = self.k.min(n - 1);
        let nbrs = match self.search {
            KnnSearch::Exact => knn_exact(points, k)?,
            KnnSearch::Approx { recall } => knn_approx(points, k, recall)?,
        };
        build_graph(&nbrs, self.sigma2)
    }

    /// Graph between samples (columns of `x`).
    pub fn sample_graph(&self, x: &DMatrix<f64>) -> Result<SparseGraph> {
        self.build(x)
    }

    /// Graph between features (rows of `x`).
    pub fn feature_graph(&self, x: &DMatrix<f64>) -> Result<SparseGraph> {
        self.build(&x.transpose())
    }
}

/// All eigenpairs through a dense decomposition, for graphs small enough to
/// hold `L` densely.
pub fn full_eigs(graph: &SparseGraph) -> GraphEigs {
    GraphEigs::from_dense(&dense_laplacian(graph))
}

/// Symmetric weighted graph with its normalized Laplacian
/// `L = I - D^{-1/2} A D^{-1/2}`. Isolated vertices get `L_ii = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    adjacency: CsrMatrix,
    degrees: Vec<f64>,
    laplacian: CsrMatrix,
    sigma2: Option<f64>,
}

impl SparseGraph {
    /// Validates `adjacency` (square, symmetric, zero diagonal, weights in
    /// `[0, 1]`) and derives degrees and Laplacian.
    pub fn from_adjacency(adjacency: CsrMatrix) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::DimensionMismatch("adjacency must be square".into()));
        }
        for (i, j, w) in adjacency.triplets() {
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at vertex {i}")));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidArgument(format!(
                    "weight {w} on edge ({i}, {j}) outside [0, 1]"
                )));
            }
        }
        if !adjacency.is_symmetric(0.0) {
            return Err(Error::InvalidArgument("adjacency is not symmetric".into()));
        }
        let degrees: Vec<f64> = (0..n).map(|i| adjacency.row(i).map(|(_, w)| w).sum()).collect();
        let inv_sqrt: Vec<f64> = degrees
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut t = Vec::with_capacity(adjacency.nnz() + n);
        for i in 0..n {
            t.push((i, i, 1.0));
        }
        for (i, j, w) in adjacency.triplets() {
            t.push((i, j, -w * inv_sqrt[i] * inv_sqrt[j]));
        }
        let laplacian = CsrMatrix::from_triplets(n, n, &t)?;
        Ok(SparseGraph {
            adjacency,
            degrees,
            laplacian,
            sigma2: None,
        })
    }

    /// Graph without edges; its Laplacian is the identity.
    pub fn edgeless(n: usize) -> Self {
        SparseGraph {
            adjacency: CsrMatrix::from_triplets(n, n, &[]).expect("empty triplets"),
            degrees: vec![0.0; n],
            laplacian: CsrMatrix::identity(n),
            sigma2: None,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.degrees.len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    /// Kernel width used at construction, if built from neighbor lists.
    pub fn sigma2(&self) -> Option<f64> {
        self.sigma2
    }

    /// Writes the adjacency as COO text: a `# vertices N` header, then one
    /// `i j weight` line per stored entry (both directions).
    pub fn to_coo_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# vertices {}", self.vertex_count()).unwrap();
        for (i, j, w) in self.adjacency.triplets() {
            writeln!(s, "{i} {j} {w:.16e}").unwrap();
        }
        s
    }

    /// Parses COO text. Entries given in only one direction are mirrored.
    pub fn from_coo_str(text: &str) -> Result<Self> {
        let mut n: Option<usize> = None;
        let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                if it.next() == Some("vertices") {
                    let v = it
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("bad vertex header on line {}", lineno + 1)))?;
                    n = Some(v);
                }
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            let bad = || Error::Parse(format!("malformed COO line {}: {line:?}", lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let i: usize = fields[0].parse().map_err(|_| bad())?;
            let j: usize = fields[1].parse().map_err(|_| bad())?;
            let w: f64 = fields[2].parse().map_err(|_| bad())?;
            if let Some(prev) = entries.insert((i, j), w) {
                if prev != w {
                    return Err(Error::Parse(format!("conflicting weights for ({i}, {j})")));
                }
            }
        }
        let max_index = entries.keys().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        let n = n.unwrap_or(max_index);
        if max_index > n {
            return Err(Error::Parse(format!(
                "vertex index {} exceeds declared count {n}",
                max_index - 1
            )));
        }
        let mut t = Vec::with_capacity(entries.len() * 2);
        for (&(i, j), &w) in &entries {
            match entries.get(&(j, i)) {
                Some(&back) if back != w => {
                    return Err(Error::Parse(format!("asymmetric weights for ({i}, {j})")))
                }
                Some(_) => t.push((i, j, w)),
                None => {
                    t.push((i, j, w));
                    t.push((j, i, w));
                }
            }
        }
        SparseGraph::from_adjacency(CsrMatrix::from_triplets(n, n, &t)?)
    }

    pub fn save_coo(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_coo_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_coo(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_coo_str(&text)
    }
}

/// Resolves `Sigma2::Auto` against a neighbor list.
pub fn resolve_sigma2(nbrs: &NeighborList, sigma2: Sigma2) -> Result<f64> {
    match sigma2 {
        Sigma2::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        Sigma2::Fixed(s) => Err(Error::InvalidArgument(format!("sigma^2 must be positive, got {s}"))),
        Sigma2::Auto => {
            let (sum, count) = nbrs
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, c), &(_, d)| (s + d, c + 1));
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            // all-duplicate inputs have zero mean distance
            Ok(if mean > 0.0 { mean * mean } else { 1.0 })
        }
    }
}

/// Symmetric Gaussian-weighted graph from K-NN lists: edge `(i, j)` exists
/// when either vertex lists the other.
pub fn build_graph(nbrs: &NeighborList, sigma2: Sigma2) -> Result<SparseGraph> {
    let s2 = resolve_sigma2(nbrs, sigma2)?;
    let n = nbrs.vertex_count();
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, list) in nbrs.iter().enumerate() {
        for &(j, d) in list {
            edges.entry((i.min(j), i.max(j))).or_insert(d);
        }
    }
    let mut t = Vec::with_capacity(2 * edges.len());
    for (&(i, j), &d) in &edges {
        let w = (-d * d / s2).exp();
        t.push((i, j, w));
        t.push((j, i, w));
    }
    let mut g = SparseGraph::from_adjacency(CsrMatrix::from_triplets(n, n, &t)?)?;
    g.sigma2 = Some(s2);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectralNormMode {
    /// The normalized-Laplacian bound `lambda_max <= 2`.
    #[default]
    Bound,
    PowerIteration,
}

pub const POWER_MAX_ITERS: usize = 1000;
pub const POWER_TOL: f64 = 1e-6;

/// Largest eigenvalue of the Laplacian (`||L||_2`, as `L` is PSD).
pub fn spectral_norm(graph: &SparseGraph, mode: SpectralNormMode) -> f64 {
    match mode {
        SpectralNormMode::Bound => 2.0,
        SpectralNormMode::PowerIteration => power_iteration(graph.laplacian()),
    }
}

fn power_iteration(l: &CsrMatrix) -> f64 {
    let n = l.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    v /= v.norm();
    let mut rayleigh = l.quadratic_form(&v);
    for _ in 0..POWER_MAX_ITERS {
        let w = l.mul_vec(&v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = l.quadratic_form(&v);
        let done = (next - rayleigh).abs() <= POWER_TOL * next.abs().max(f64::MIN_POSITIVE);
        rayleigh = next;
        if done {
            break;
        }
    }
    rayleigh
}

/// Dense copy of the Laplacian, for oracles and small diagnostics.
pub fn dense_laplacian(graph: &SparseGraph) -> DMatrix<f64> {
    graph.laplacian().to_dense()
}
