//! Smallest eigenpairs of a graph Laplacian.
//!
//! Graphs up to [`DENSE_EIG_CUTOFF`] vertices use a dense symmetric
//! eigensolver. Larger graphs use Lanczos with full reorthogonalization and
//! locking: each pass runs a fresh Krylov sequence orthogonal to the pairs
//! already locked, so repeated eigenvalues (e.g. one zero per connected
//! component) are recovered one at a time.
//!
//! Whatever the path, results are checked against the residual and
//! orthonormality tolerances before they are returned.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SparseGraph;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DENSE_EIG_CUTOFF: usize = 400;

const RESIDUAL_TOL: f64 = 1e-8;
const ORTHO_TOL: f64 = 1e-10;
const LOCK_TOL: f64 = 1e-10;
const MAX_PASSES_PER_PAIR: usize = 8;

/// Eigenvalues in ascending order with orthonormal eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEigs {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl GraphEigs {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `n x k`, column `i` pairs with `values()[i]`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Builds from a full dense eigendecomposition of a symmetric matrix.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(m.clone());
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut vectors = eig.eigenvectors.select_columns(&order);
        canonical_signs(&mut vectors);
        GraphEigs { values, vectors }
    }

    fn truncate(mut self, k: usize) -> Self {
        self.values.truncate(k);
        self.vectors = self.vectors.columns(0, k).into_owned();
        self
    }
}

/// Flips each column so that its largest-magnitude entry is positive.
fn canonical_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// The `k` algebraically smallest eigenpairs of the graph's Laplacian.
pub fn partial_eigs(graph: &SparseGraph, k: usize) -> Result<GraphEigs> {
    let n = graph.vertex_count();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenpairs of a {n}-vertex graph"
        )));
    }
    let l = graph.laplacian();
    let eigs = if n <= DENSE_EIG_CUTOFF {
        GraphEigs::from_dense(&l.to_dense()).truncate(k)
    } else {
        lanczos_smallest(l, k)?
    };
    verify(l, &eigs)?;
    Ok(eigs)
}

fn operator_norm_bound(l: &CsrMatrix) -> f64 {
    let inf = (0..l.nrows())
        .map(|r| l.row(r).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    inf.clamp(f64::MIN_POSITIVE, 2.0)
}

fn verify(l: &CsrMatrix, eigs: &GraphEigs) -> Result<()> {
    let scale = operator_norm_bound(l);
    for (i, &lambda) in eigs.values.iter().enumerate() {
        let q = eigs.vectors.column(i).into_owned();
        let r = (l.mul_vec(&q) - &q * lambda).norm();
        if r > RESIDUAL_TOL * scale {
            return Err(Error::NoConvergence(format!(
                "eigenpair {i} has residual {r:.3e}"
            )));
        }
    }
    let gram = eigs.vectors.transpose() * &eigs.vectors;
    let dev = (gram - DMatrix::identity(eigs.count(), eigs.count())).amax();
    if dev > ORTHO_TOL {
        return Err(Error::NoConvergence(format!(
            "eigenvectors deviate from orthonormal by {dev:.3e}"
        )));
    }
    Ok(())
}

/// Orthogonalizes `w` against the columns in `basis`, twice.
fn orthogonalize(w: &mut DVector<f64>, sets: &[&[DVector<f64>]]) {
    // Both sets in every sweep: cleaning one after the other lets the
    // three-term recurrence feed locked directions back in.
    for _ in 0..2 {
        for b in sets.iter().flat_map(|s| s.iter()) {
            let c = b.dot(w);
            w.axpy(-c, b, 1.0);
        }
    }
}

fn lanczos_smallest(l: &CsrMatrix, k: usize) -> Result<GraphEigs> {
    let n = l.nrows();
    let scale = operator_norm_bound(l);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a2c);
    let mut locked_vals: Vec<f64> = Vec::with_capacity(k);
    let mut locked: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut krylov = (2 * k + 30).max(60);
    let mut stalls = 0;

    while locked.len() < k {
        let room = n - locked.len();
        let m = krylov.min(room);
        let (basis, alpha, beta, last_beta) = lanczos_pass(l, &locked, m, &mut rng);
        let dim = alpha.len();
        let t = DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let ritz = GraphEigs::from_dense(&t);
        let exhausted = dim == room || last_beta == 0.0;
        // One pair per pass: a single Krylov sequence sees only one direction
        // of a repeated eigenvalue, so locking more could skip its copies.
        let mut newly = 0;
        if dim > 0 {
            let theta = ritz.values[0];
            let res = (last_beta * ritz.vectors[(dim - 1, 0)]).abs();
            if exhausted || res <= LOCK_TOL * scale {
                let mut y = DVector::zeros(n);
                for (j, b) in basis.iter().enumerate() {
                    y.axpy(ritz.vectors[(j, 0)], b, 1.0);
                }
                orthogonalize(&mut y, &[&locked]);
                let norm = y.norm();
                if norm > 0.0 {
                    locked.push(y / norm);
                    locked_vals.push(theta);
                    newly += 1;
                }
            }
        }
        if newly == 0 {
            stalls += 1;
            if stalls > MAX_PASSES_PER_PAIR {
                return Err(Error::NoConvergence(format!(
                    "Lanczos locked {} of {k} eigenpairs",
                    locked.len()
                )));
            }
            krylov = (krylov * 2).min(n);
        } else {
            stalls = 0;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| locked_vals[a].total_cmp(&locked_vals[b]));
    let values: Vec<f64> = order.iter().map(|&i| locked_vals[i]).collect();
    let mut vectors = DMatrix::from_columns(&order.iter().map(|&i| locked[i].clone()).collect::<Vec<_>>());
    canonical_signs(&mut vectors);
    // Rayleigh quotients are at least as accurate as the Ritz values
    let values = values
        .iter()
        .enumerate()
        .map(|(i, _)| l.quadratic_form(&vectors.column(i).into_owned()))
        .collect();
    Ok(GraphEigs { values, vectors })
}

/// Runs up to `m` Lanczos steps in the complement of `locked`. Returns the
/// basis, the tridiagonal coefficients and the trailing residual norm
/// (0 when an invariant subspace was reached).
fn lanczos_pass(
    l: &CsrMatrix,
    locked: &[DVector<f64>],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<DVector<f64>>, Vec<f64>, Vec<f64>, f64) {
    let n = l.nrows();
    let scale = operator_norm_bound(l);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    orthogonalize(&mut v, &[locked]);
    v /= v.norm();

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut last_beta = 0.0;
    for step in 0..m {
        basis.push(v.clone());
        let mut w = l.mul_vec(&v);
        let a = v.dot(&w);
        alpha.push(a);
        orthogonalize(&mut w, &[locked, &basis]);
        let b = w.norm();
        last_beta = b;
        if b <= 1e-12 * scale {
            last_beta = 0.0;
            break;
        }
        if step + 1 < m {
            beta.push(b);
            v = w / b;
        }
    }
    (basis, alpha, beta, last_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, knn_exact, Sigma2};

    fn chain(n: usize) -> SparseGraph {
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.push((i, i + 1, 1.0));
            t.push((i + 1, i, 1.0));
        }
        SparseGraph::from_adjacency(CsrMatrix::from_triplets(n, n, &t).unwrap()).unwrap()
    }

    /// Disjoint union of `c` chains of length `len`.
    fn chains(c: usize, len: usize) -> SparseGraph {
        let n = c * len;
        let mut t = Vec::new();
        for b in 0..c {
            for i in 0..len - 1 {
                let (u, v) = (b * len + i, b * len + i + 1);
                t.push((u, v, 0.5));
                t.push((v, u, 0.5));
            }
        }
        SparseGraph::from_adjacency(CsrMatrix::from_triplets(n, n, &t).unwrap()).unwrap()
    }

    #[test]
    fn null_vector_of_connected_graph() {
        let g = chain(9);
        let e = partial_eigs(&g, 1).unwrap();
        assert!(e.values()[0].abs() < 1e-10);
        let d: Vec<f64> = g.degrees().iter().map(|d| d.sqrt()).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, di) in d.iter().enumerate() {
            assert!((e.vectors()[(i, 0)] - di / norm).abs() < 1e-10);
        }
    }

    #[test]
    fn component_count() {
        let e = partial_eigs(&chains(3, 5), 6).unwrap();
        assert_eq!(e.values().iter().filter(|&&v| v < 1e-10).count(), 3);
    }

    #[test]
    fn full_spectrum_matches_dense_oracle() {
        let g = chain(6);
        let e = partial_eigs(&g, 6).unwrap();
        let mut oracle: Vec<f64> = SymmetricEigen::new(g.laplacian().to_dense()).eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in e.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_k() {
        assert!(partial_eigs(&chain(4), 0).is_err());
        assert!(partial_eigs(&chain(4), 5).is_err());
    }

    #[test]
    fn lanczos_matches_dense_on_large_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // two well separated blobs plus an isolated-looking tail
        let pts = DMatrix::from_fn(3, 700, |_, j| {
            let offset = if j < 350 { 0.0 } else { 50.0 };
            offset + rng.random_range(-1.0..1.0)
        });
        let g = build_graph(&knn_exact(&pts, 6).unwrap(), Sigma2::Fixed(1.0)).unwrap();
        let lanczos = lanczos_smallest(g.laplacian(), 8).unwrap();
        verify(g.laplacian(), &lanczos).unwrap();
        let dense = GraphEigs::from_dense(&g.laplacian().to_dense());
        for i in 0..8 {
            assert!((lanczos.values()[i] - dense.values()[i]).abs() < 1e-8, "pair {i}");
        }
        assert!(lanczos.values()[1] < 1e-10, "two components give two zeros");
    }

    #[test]
    fn lanczos_recovers_multiplicities() {
        let g = chains(6, 80);
        let e = lanczos_smallest(g.laplacian(), 8).unwrap();
        verify(g.laplacian(), &e).unwrap();
        assert_eq!(e.values().iter().filter(|&&v| v < 1e-10).count(), 6);
        assert!(e.values()[6] > 1e-4);
    }
}
