//! k-means, permutation-matched clustering error and the end-to-end
//! corrupt / standardize / graphs / solve / cluster experiment.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{alignment_ratio, covariance, economic_svd, rank_estimate};
use crate::error::{Error, Result};
use crate::graph::{full_eigs, GraphConfig};
use crate::matrix::{corrupt, standardize, CorruptionSpec, DataMatrix};
use crate::solver::{fista_solve, Loss, SolverConfig, Step};

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub restarts_used: usize,
    /// Inertia after every assignment step of the chosen restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(points: &DMatrix<f64>, j: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    points
        .column(j)
        .iter()
        .zip(centers.column(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.ncols();
    let mut centers = DMatrix::zeros(points.nrows(), k);
    let first = rng.random_range(0..n);
    centers.set_column(0, &points.column(first));
    let mut d2: Vec<f64> = (0..n).map(|j| sq_dist(points, j, &centers, 0)).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every point already coincides with a center.
            Err(_) => rng.random_range(0..n),
        };
        centers.set_column(c, &points.column(pick));
        for (j, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, j, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> ClusterResult {
    let (p, n) = points.shape();
    let mut centers = plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for j in 0..n {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(points, j, &centers, c);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            changed |= labels[j] != best;
            labels[j] = best;
            dist[j] = best_d;
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // Empty clusters take over the point farthest from its center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&j| counts[labels[j]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]));
                if let Some(j) = far {
                    counts[labels[j]] -= 1;
                    counts[c] = 1;
                    labels[j] = c;
                    dist[j] = 0.0;
                    centers.set_column(c, &points.column(j));
                    changed = true;
                }
            }
        }
        trace.push(dist.iter().sum());
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(p, k);
        for (j, &l) in labels.iter().enumerate() {
            let mut col = sums.column_mut(l);
            col += points.column(j);
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                centers.set_column(c, &(sums.column(c) / count as f64));
            }
        }
    }
    ClusterResult {
        labels,
        inertia: *trace.last().unwrap_or(&0.0),
        restarts_used: 1,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm from k-means++ seeds, `restarts` times; keeps the
/// run with the lowest inertia (earliest on ties). Columns are the items.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<ClusterResult> {
    let n = points.ncols();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} clusters for {n} points")));
    }
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let runs: Vec<ClusterResult> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(points, k, &mut rng)
        })
        .collect();
    let mut best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("at least one restart");
    best.restarts_used = restarts;
    Ok(best)
}

/// `1 - accuracy` under the best one-to-one matching of predicted to true
/// labels. Label values are arbitrary.
pub fn clustering_error(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted labels for {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let index = |labels: &[usize]| {
        let mut map = BTreeMap::new();
        for &l in labels {
            let next = map.len();
            map.entry(l).or_insert(next);
        }
        map
    };
    let (pi, ti) = (index(pred), index(truth));
    let size = pi.len().max(ti.len());
    let mut table = Matrix::new(size, size, 0i64);
    for (p, t) in pred.iter().zip(truth) {
        table[(pi[p], ti[t])] += 1;
    }
    let (matched, _) = kuhn_munkres(&table);
    Ok(1.0 - matched as f64 / pred.len() as f64)
}

/// What k-means clusters: the low-rank matrix itself or its right singular
/// vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterSpace {
    #[default]
    U,
    W,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub graph: GraphConfig,
    pub solver: SolverConfig,
    pub corruption: Option<CorruptionSpec>,
    pub restarts: usize,
    pub rank_threshold: f64,
    pub cluster_on: ClusterSpace,
    /// Also cluster the standardized input directly.
    pub baseline: bool,
    pub seed: u64,
}

pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-2;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            graph: GraphConfig::default(),
            solver: SolverConfig::default(),
            corruption: None,
            restarts: DEFAULT_RESTARTS,
            rank_threshold: DEFAULT_RANK_THRESHOLD,
            cluster_on: ClusterSpace::U,
            baseline: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverEcho {
    pub loss: Loss,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `null` for the automatic step.
    pub step: Option<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl From<&SolverConfig> for SolverEcho {
    fn from(c: &SolverConfig) -> Self {
        SolverEcho {
            loss: c.loss,
            gamma1: c.gamma1,
            gamma2: c.gamma2,
            step: match c.step {
                Step::Auto => None,
                Step::Fixed(s) => Some(s),
            },
            epsilon: c.epsilon,
            max_iters: c.max_iters,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub corrupt: f64,
    pub standardize: f64,
    pub sample_graph: f64,
    pub feature_graph: f64,
    pub solve: f64,
    pub cluster: f64,
    pub diagnostics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub seed: u64,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub corruption: Option<CorruptionSpec>,
    pub graph: GraphConfig,
    pub solver: SolverEcho,
    pub cluster_on: ClusterSpace,
    pub restarts: usize,
    pub rank_threshold: f64,
    pub error: f64,
    pub raw_error: Option<f64>,
    /// Alignment of the data covariance with the feature-graph eigenbasis;
    /// absent when the feature graph is too large for a dense eigensolve.
    pub s_r: Option<f64>,
    pub rank: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub sample_sigma2: Option<f64>,
    pub feature_sigma2: Option<f64>,
    pub timings_ms: StageTimings,
}

/// Largest feature count for which `s_r` is computed.
pub const ALIGNMENT_MAX_FEATURES: usize = 2000;

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn cluster_points(u: &DataMatrix, space: ClusterSpace, classes: usize) -> Result<DMatrix<f64>> {
    match space {
        ClusterSpace::U => Ok(u.values().clone()),
        ClusterSpace::W => {
            let keep = classes.min(u.feature_count()).min(u.sample_count());
            Ok(economic_svd(u, Some(keep))?.w.transpose())
        }
    }
}

pub fn run_experiment(x: &DataMatrix, truth: &[usize], cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    let start = Instant::now();
    if truth.len() != x.sample_count() {
        return Err(Error::InconsistentData(format!(
            "{} labels for {} samples",
            truth.len(),
            x.sample_count()
        )));
    }
    cfg.solver.validate()?;
    let classes = truth.iter().collect::<std::collections::BTreeSet<_>>().len();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let corrupted = match &cfg.corruption {
        Some(spec) => corrupt(x, spec)?.0,
        None => x.clone(),
    };
    timings.corrupt = ms(t);

    let t = Instant::now();
    let z = standardize(&corrupted);
    timings.standardize = ms(t);

    let t = Instant::now();
    let g1 = cfg.graph.sample_graph(z.values())?;
    timings.sample_graph = ms(t);
    let t = Instant::now();
    let g2 = cfg.graph.feature_graph(z.values())?;
    timings.feature_graph = ms(t);

    let t = Instant::now();
    let out = fista_solve(&z, &g1, &g2, &cfg.solver)?;
    timings.solve = ms(t);

    let t = Instant::now();
    let points = cluster_points(&out.u, cfg.cluster_on, classes)?;
    let fit = kmeans(&points, classes, cfg.restarts, cfg.seed)?;
    let error = clustering_error(&fit.labels, truth)?;
    let raw_error = if cfg.baseline {
        let raw = kmeans(&cluster_points(&z, cfg.cluster_on, classes)?, classes, cfg.restarts, cfg.seed)?;
        Some(clustering_error(&raw.labels, truth)?)
    } else {
        None
    };
    timings.cluster = ms(t);

    let t = Instant::now();
    let rank = rank_estimate(&economic_svd(&out.u, None)?.sigma, cfg.rank_threshold);
    let s_r = if z.feature_count() <= ALIGNMENT_MAX_FEATURES {
        let p = full_eigs(&g2);
        alignment_ratio(p.vectors(), &covariance(&z)).ok().map(|(_, s)| s)
    } else {
        None
    };
    timings.diagnostics = ms(t);
    timings.total = ms(start);

    Ok(ExperimentRecord {
        name: cfg.name.clone(),
        seed: cfg.seed,
        samples: x.sample_count(),
        features: x.feature_count(),
        classes,
        corruption: cfg.corruption,
        graph: cfg.graph,
        solver: SolverEcho::from(&cfg.solver),
        cluster_on: cfg.cluster_on,
        restarts: cfg.restarts,
        rank_threshold: cfg.rank_threshold,
        error,
        raw_error,
        s_r,
        rank,
        iterations: out.iterations,
        converged: out.converged,
        final_objective: *out.objective_trace.last().expect("non-empty trace"),
        sample_sigma2: g1.sigma2(),
        feature_sigma2: g2.sigma2(),
        timings_ms: timings,
    })
}
