//! K-nearest-neighbor search over the columns of a matrix.
//!
//! [`knn_exact`] is the brute-force O(n^2) search. [`knn_approx`] builds a
//! forest of random projection trees, refines the candidate lists by
//! neighbor-of-neighbor exploration, and keeps adding trees until the recall
//! measured on a probe sample reaches the requested target. Exhausting the
//! budget, or asking for recall 1, falls back to the exact search.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Per-vertex neighbor lists with Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    k: usize,
    lists: Vec<Vec<(usize, f64)>>,
    exact: bool,
}

impl NeighborList {
    /// Validates and wraps raw lists: every list has length `k`, no
    /// self-loops, non-negative distances.
    pub fn new(k: usize, lists: Vec<Vec<(usize, f64)>>, exact: bool) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let n = lists.len();
        for (i, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "vertex {i} has {} neighbors, expected {k}",
                    list.len()
                )));
            }
            for &(j, d) in list {
                if j == i || j >= n || !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "invalid neighbor ({j}, {d}) for vertex {i}"
                    )));
                }
            }
        }
        Ok(NeighborList { k, lists, exact })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vertex_count(&self) -> usize {
        self.lists.len()
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    /// Neighbors of `i` sorted by `(distance, index)`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.lists[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[(usize, f64)]> {
        self.lists.iter().map(|l| l.as_slice())
    }

    /// Fraction of listed neighbors whose distance does not exceed the
    /// reference's K-th distance. Robust to ties, unlike set intersection.
    pub fn recall_against(&self, reference: &NeighborList) -> f64 {
        assert_eq!(self.vertex_count(), reference.vertex_count());
        let mut hits = 0usize;
        for (mine, theirs) in self.lists.iter().zip(&reference.lists) {
            let kth = theirs.last().map(|e| e.1).unwrap_or(0.0);
            let slack = 1e-12 * kth.max(1.0);
            hits += mine.iter().filter(|e| e.1 <= kth + slack).count();
        }
        hits as f64 / (self.vertex_count() * self.k) as f64
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "K = {k} must be smaller than the number of points ({n})"
        )));
    }
    Ok(())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn by_dist_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    fn new(points: &'a DMatrix<f64>) -> Self {
        Points {
            data: points.as_slice(),
            dim: points.nrows(),
        }
    }

    fn col(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.col(i), self.col(j))
    }
}

fn exact_row(pts: &Points, n: usize, i: usize, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (j, pts.sq_dist(i, j)))
        .collect();
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, by_dist_then_index);
        all.truncate(k);
    }
    all.sort_by(by_dist_then_index);
    all.into_iter().map(|(j, d2)| (j, d2.sqrt())).collect()
}

/// Exact K-NN by Euclidean distance between columns. Ties go to the lower index.
pub fn knn_exact(points: &DMatrix<f64>, k: usize) -> Result<NeighborList> {
    let n = points.ncols();
    check_k(n, k)?;
    let pts = Points::new(points);
    let lists = (0..n)
        .into_par_iter()
        .map(|i| exact_row(&pts, n, i, k))
        .collect();
    Ok(NeighborList {
        k,
        lists,
        exact: true,
    })
}

/// Tuning knobs for [`knn_approx_with`].
#[derive(Debug, Clone, Copy)]
pub struct ApproxKnnParams {
    pub seed: u64,
    /// Trees in the first round; doubled on every calibration failure.
    pub initial_trees: usize,
    pub max_trees: usize,
    /// Neighbor-of-neighbor refinement passes per round.
    pub refine_passes: usize,
    /// Points whose exact neighbors are computed to estimate recall.
    pub probe_size: usize,
}

impl Default for ApproxKnnParams {
    fn default() -> Self {
        ApproxKnnParams {
            seed: 0x5eed,
            initial_trees: 4,
            max_trees: 64,
            refine_passes: 2,
            probe_size: 64,
        }
    }
}

/// Approximate K-NN meeting `recall_target` on a probe sample.
pub fn knn_approx(points: &DMatrix<f64>, k: usize, recall_target: f64) -> Result<NeighborList> {
    knn_approx_with(points, k, recall_target, ApproxKnnParams::default())
}

pub fn knn_approx_with(
    points: &DMatrix<f64>,
    k: usize,
    recall_target: f64,
    params: ApproxKnnParams,
) -> Result<NeighborList> {
    let n = points.ncols();
    check_k(n, k)?;
    if !(recall_target > 0.0 && recall_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "recall target {recall_target} outside (0, 1]"
        )));
    }
    let leaf_size = (2 * k).max(16);
    if recall_target >= 1.0 || n <= 2 * leaf_size {
        let mut exact = knn_exact(points, k)?;
        exact.exact = false;
        return Ok(exact);
    }

    let pts = Points::new(points);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let probe: Vec<usize> = sample(&mut rng, n, params.probe_size.min(n)).into_vec();
    let probe_truth: Vec<f64> = probe
        .par_iter()
        .map(|&i| exact_row(&pts, n, i, k).last().unwrap().1)
        .collect();
    // a little headroom so the whole-graph recall clears the target too
    let goal = (recall_target + 0.02).min(1.0);

    let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut trees = 0;
    let mut budget = params.initial_trees.max(1);
    while trees < params.max_trees {
        let add = budget.min(params.max_trees - trees);
        for _ in 0..add {
            let leaves = rp_tree_leaves(&pts, n, leaf_size, &mut rng);
            merge_leaves(&pts, &leaves, k, &mut lists);
        }
        trees += add;
        for _ in 0..params.refine_passes {
            if refine(&pts, k, &mut lists) == 0 {
                break;
            }
        }
        let recall = probe_recall(&lists, &probe, &probe_truth, k);
        if recall >= goal && lists.iter().all(|l| l.len() == k) {
            let lists = lists
                .into_iter()
                .map(|l| l.into_iter().map(|(j, d2)| (j, d2.sqrt())).collect())
                .collect();
            return Ok(NeighborList {
                k,
                lists,
                exact: false,
            });
        }
        budget *= 2;
    }
    let mut exact = knn_exact(points, k)?;
    exact.exact = false;
    Ok(exact)
}

fn probe_recall(lists: &[Vec<(usize, f64)>], probe: &[usize], truth: &[f64], k: usize) -> f64 {
    let mut hits = 0;
    for (&i, &kth) in probe.iter().zip(truth) {
        let kth2 = kth * kth;
        let slack = 1e-12 * kth2.max(1.0);
        hits += lists[i].iter().filter(|e| e.1 <= kth2 + slack).count();
    }
    hits as f64 / (probe.len() * k) as f64
}

/// Leaves of one random projection tree. Each split uses the hyperplane
/// bisecting two random members of the node.
fn rp_tree_leaves(pts: &Points, n: usize, leaf_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut leaves = Vec::new();
    let mut stack = vec![(0..n).collect::<Vec<usize>>()];
    while let Some(node) = stack.pop() {
        if node.len() <= leaf_size {
            leaves.push(node);
            continue;
        }
        let a = node[rng.random_range(0..node.len())];
        let mut b = node[rng.random_range(0..node.len())];
        for _ in 0..4 {
            if pts.sq_dist(a, b) > 0.0 {
                break;
            }
            b = node[rng.random_range(0..node.len())];
        }
        let (xa, xb) = (pts.col(a), pts.col(b));
        let normal: Vec<f64> = xa.iter().zip(xb).map(|(u, v)| u - v).collect();
        let offset: f64 = normal
            .iter()
            .zip(xa.iter().zip(xb))
            .map(|(w, (u, v))| w * 0.5 * (u + v))
            .sum();
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
        for &i in &node {
            let proj: f64 = normal.iter().zip(pts.col(i)).map(|(w, x)| w * x).sum();
            if proj < offset || (proj == offset && rng.random_bool(0.5)) {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        if left.is_empty() || right.is_empty() {
            // degenerate split (duplicates): halve at random
            let mut all = node;
            for i in (1..all.len()).rev() {
                all.swap(i, rng.random_range(0..=i));
            }
            right = all.split_off(all.len() / 2);
            left = all;
        }
        stack.push(left);
        stack.push(right);
    }
    leaves
}

/// Inserts `(j, d2)` into a list kept sorted by `(d2, j)` and capped at `k`.
/// Returns whether the list changed.
fn insert_candidate(list: &mut Vec<(usize, f64)>, k: usize, j: usize, d2: f64) -> bool {
    if list.iter().any(|e| e.0 == j) {
        return false;
    }
    let cand = (j, d2);
    if list.len() == k && by_dist_then_index(&cand, list.last().unwrap()) != Ordering::Less {
        return false;
    }
    let pos = list
        .binary_search_by(|e| by_dist_then_index(e, &cand))
        .unwrap_or_else(|p| p);
    list.insert(pos, cand);
    list.truncate(k);
    true
}

fn merge_leaves(pts: &Points, leaves: &[Vec<usize>], k: usize, lists: &mut [Vec<(usize, f64)>]) {
    let mut owner = vec![0usize; lists.len()];
    for (l, leaf) in leaves.iter().enumerate() {
        for &i in leaf {
            owner[i] = l;
        }
    }
    lists.par_iter_mut().enumerate().for_each(|(i, list)| {
        for &j in &leaves[owner[i]] {
            if j != i {
                insert_candidate(list, k, j, pts.sq_dist(i, j));
            }
        }
    });
}

/// One pass of neighbor-of-neighbor exploration. Returns the number of updates.
fn refine(pts: &Points, k: usize, lists: &mut [Vec<(usize, f64)>]) -> usize {
    let n = lists.len();
    let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, list) in lists.iter().enumerate() {
        for &(j, _) in list {
            reverse[j].push(i);
        }
    }
    let snapshot: Vec<Vec<(usize, f64)>> = lists.to_vec();
    lists
        .par_iter_mut()
        .enumerate()
        .map(|(i, list)| {
            let mut updates = 0;
            let near = snapshot[i].iter().map(|e| e.0).chain(reverse[i].iter().copied());
            for j in near.collect::<Vec<_>>() {
                let second = snapshot[j].iter().map(|e| e.0).chain(reverse[j].iter().copied());
                for m in second {
                    if m != i && insert_candidate(list, k, m, pts.sq_dist(i, m)) {
                        updates += 1;
                    }
                }
            }
            updates
        })
        .sum()
}
