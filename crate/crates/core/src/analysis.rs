//! Spectral diagnostics: economic SVD, covariance alignment with a graph
//! eigenbasis, synthetic low-rank-on-graphs data, the approximation bound
//! check, and subspace-structure summaries.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{partial_eigs, GraphEigs, SparseGraph};
use crate::matrix::DataMatrix;
use crate::solver::{LowRankResult, Loss, SolverConfig};

/// Singular values below this fraction of the largest are dropped by
/// [`economic_svd`]: squaring through the Gram matrix puts an absolute error
/// of about `eps * sigma_0^2` on each eigenvalue, so smaller values are noise.
pub const GRAM_RANK_TOL: f64 = 1e-7;

/// Laplacian eigenvalues at or below this are treated as zero when
/// forming `gamma / eigenvalue`.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-10;

/// Tolerance of the orthonormality check in [`alignment_ratio`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Slack in [`BoundReport::holds`]: `lhs <= rhs + BOUND_SLACK * max(1, rhs)`.
pub const BOUND_SLACK: f64 = 1e-9;

/// `U = V diag(sigma) W^T`, singular values descending.
#[derive(Debug, Clone)]
pub struct SvdTriplet {
    pub v: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub w: DMatrix<f64>,
}

impl SvdTriplet {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut vs = self.v.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            vs.column_mut(j).scale_mut(*s);
        }
        vs * self.w.transpose()
    }
}

/// SVD of a `p x n` matrix through the `p x p` Gram matrix `U U^T`:
/// `U U^T = V S^2 V^T`, then `W = S^{-1} V^T U`. Keeps at most `c`
/// triplets (all when `None`) and only those with non-negligible sigma.
pub fn economic_svd(u: &DataMatrix, c: Option<usize>) -> Result<SvdTriplet> {
    let m = u.values();
    let (p, n) = m.shape();
    let cap = p.min(n);
    let c = c.unwrap_or(cap);
    if c > cap {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {c} singular triplets of a {p}x{n} matrix"
        )));
    }
    let eig = SymmetricEigen::new(m * m.transpose());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sigma0 = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let keep: Vec<usize> = order
        .into_iter()
        .take(c)
        .filter(|&i| {
            let s = eig.eigenvalues[i].max(0.0).sqrt();
            s > 0.0 && s > GRAM_RANK_TOL * sigma0
        })
        .collect();

    let mut v = DMatrix::zeros(p, keep.len());
    let mut sigma = Vec::with_capacity(keep.len());
    for (j, &i) in keep.iter().enumerate() {
        v.set_column(j, &eig.eigenvectors.column(i));
        sigma.push(eig.eigenvalues[i].sqrt());
    }
    let mut w = m.transpose() * &v;
    for (j, s) in sigma.iter().enumerate() {
        w.column_mut(j).unscale_mut(*s);
    }
    Ok(SvdTriplet { v, sigma, w })
}

/// `X~ X~^T / n` with `X~` the data minus its single global mean.
pub fn covariance(x: &DataMatrix) -> DMatrix<f64> {
    let m = x.values();
    let mean = m.mean();
    let centered = m.map(|v| v - mean);
    let mut c = &centered * centered.transpose();
    c /= m.ncols() as f64;
    // Exact symmetry for downstream eigen-solvers.
    let ct = c.transpose();
    (c + ct) * 0.5
}

/// `Gamma = P^T C P` and `s_r = ||diag(Gamma)||_2 / ||Gamma||_F`.
pub fn alignment_ratio(p: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !p.is_square() || c.shape() != p.shape() {
        return Err(Error::DimensionMismatch(format!(
            "eigenbasis is {:?}, covariance is {:?}",
            p.shape(),
            c.shape()
        )));
    }
    let k = p.nrows();
    let dev = (p.transpose() * p - DMatrix::identity(k, k)).amax();
    if dev > ORTHONORMAL_TOL {
        return Err(Error::InvalidArgument(format!(
            "eigenbasis is not orthonormal (max deviation {dev:.3e})"
        )));
    }
    let gamma = p.transpose() * c * p;
    let total = gamma.norm();
    if total == 0.0 {
        return Err(Error::InvalidArgument("covariance is zero; s_r is undefined".into()));
    }
    Ok((gamma.clone(), gamma.diagonal().norm() / total))
}

/// `10 log10(|x|)`, for display of `Gamma`.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.abs().log10()
}

/// Synthetic `X* = P_k2 C Q_k1^T` built from the lowest Laplacian
/// eigenvectors of both graphs.
#[derive(Debug, Clone)]
pub struct LowRankOnGraphs {
    pub xstar: DataMatrix,
    pub k1: usize,
    pub k2: usize,
    pub c: DMatrix<f64>,
    /// Lowest `k1 + 1` (or all, if fewer) eigenpairs of the sample graph.
    pub sample_eigs: GraphEigs,
    /// Lowest `k2 + 1` (or all) eigenpairs of the feature graph.
    pub feature_eigs: GraphEigs,
}

impl LowRankOnGraphs {
    pub fn q_k1(&self) -> DMatrix<f64> {
        self.sample_eigs.vectors().columns(0, self.k1).into_owned()
    }

    pub fn p_k2(&self) -> DMatrix<f64> {
        self.feature_eigs.vectors().columns(0, self.k2).into_owned()
    }
}

pub fn make_lowrank_on_graphs(
    l1: &SparseGraph,
    l2: &SparseGraph,
    k1: usize,
    k2: usize,
    coeff_scale: f64,
    seed: u64,
) -> Result<LowRankOnGraphs> {
    let (n, p) = (l1.vertex_count(), l2.vertex_count());
    if k1 == 0 || k1 > n || k2 == 0 || k2 > p {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k1 <= {n} and 1 <= k2 <= {p}, got k1 = {k1}, k2 = {k2}"
        )));
    }
    if !(coeff_scale > 0.0 && coeff_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("coeff_scale must be > 0, got {coeff_scale}")));
    }
    let sample_eigs = partial_eigs(l1, (k1 + 1).min(n))?;
    let feature_eigs = partial_eigs(l2, (k2 + 1).min(p))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = DMatrix::from_fn(k2, k1, |_, _| rng.random_range(-coeff_scale..=coeff_scale));
    let q = sample_eigs.vectors().columns(0, k1);
    let pk = feature_eigs.vectors().columns(0, k2);
    let xstar = DataMatrix::new(pk * &c * q.transpose())?;
    Ok(LowRankOnGraphs {
        xstar,
        k1,
        k2,
        c,
        sample_eigs,
        feature_eigs,
    })
}

/// Both sides of the approximation bound for one solver run.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    /// `phi(U - X) + g1 ||U Qbar||^2 + g2 ||Pbar^T U||^2` with the solver's
    /// weights `g1 = gamma / lambda_{k1+1}`, `g2 = gamma / omega_{k2+1}`.
    pub lhs: f64,
    /// The same with both weights replaced by `gamma`; this is the quantity
    /// the lower-bounding argument controls directly.
    pub lhs_gamma: f64,
    /// `phi(E) + gamma ||X*||^2 (lambda_k1 / lambda_{k1+1} + omega_k2 / omega_{k2+1})`.
    pub rhs: f64,
    pub holds: bool,
    pub holds_gamma: bool,
    pub sample_gap_ratio: f64,
    pub feature_gap_ratio: f64,
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

fn gap(eigs: &GraphEigs, k: usize, which: &str) -> Result<(f64, f64)> {
    let vals = eigs.values();
    if k >= vals.len() {
        return Err(Error::DegenerateEigengap(format!(
            "{which} graph: no eigenvalue after index {k}"
        )));
    }
    let (kept, next) = (vals[k - 1].max(0.0), vals[k]);
    if next <= ZERO_EIGENVALUE_TOL {
        return Err(Error::DegenerateEigengap(format!(
            "{which} graph: eigenvalue {} is zero, so the weight gamma / eigenvalue is undefined",
            k + 1
        )));
    }
    Ok((kept, next))
}

/// The weights `(gamma / lambda_{k1+1}, gamma / omega_{k2+1})` under which the
/// bound is stated. Eigenvalues are counted from 1 in ascending order.
pub fn theorem_gammas(lr: &LowRankOnGraphs, gamma: f64) -> Result<(f64, f64)> {
    let (_, l_next) = gap(&lr.sample_eigs, lr.k1, "sample")?;
    let (_, w_next) = gap(&lr.feature_eigs, lr.k2, "feature")?;
    Ok((gamma / l_next, gamma / w_next))
}

fn phi(r: &DMatrix<f64>, loss: Loss) -> f64 {
    match loss {
        Loss::L1 => r.iter().map(|v| v.abs()).sum(),
        Loss::FrobeniusSq => r.norm_squared(),
    }
}

pub fn check_theorem_bound(
    lr: &LowRankOnGraphs,
    e: &DataMatrix,
    gamma: f64,
    out: &LowRankResult,
    cfg: &SolverConfig,
) -> Result<BoundReport> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
    }
    let (l_kept, l_next) = gap(&lr.sample_eigs, lr.k1, "sample")?;
    let (w_kept, w_next) = gap(&lr.feature_eigs, lr.k2, "feature")?;
    let (g1, g2) = (gamma / l_next, gamma / w_next);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    if !close(cfg.gamma1, g1) || !close(cfg.gamma2, g2) {
        return Err(Error::InvalidArgument(format!(
            "solver weights ({}, {}) differ from gamma / eigenvalue = ({g1}, {g2})",
            cfg.gamma1, cfg.gamma2
        )));
    }
    let xs = lr.xstar.values();
    let (u, s) = (out.u.values(), out.s.values());
    if e.values().shape() != xs.shape() || u.shape() != xs.shape() {
        return Err(Error::DimensionMismatch(format!(
            "X* is {:?}, E is {:?}, U is {:?}",
            xs.shape(),
            e.values().shape(),
            u.shape()
        )));
    }
    let x = xs + e.values();
    let drift = (u + s - &x).amax();
    if drift > 1e-12 * x.amax().max(1.0) {
        return Err(Error::InconsistentData(format!(
            "solver input differs from X* + E by {drift:.3e}"
        )));
    }

    // Energy outside the kept eigenvectors: ||U Qbar||^2 = ||U||^2 - ||U Q_k1||^2.
    let u2 = u.norm_squared();
    let off_samples = (u2 - (u * lr.q_k1()).norm_squared()).max(0.0);
    let off_features = (u2 - (lr.p_k2().transpose() * u).norm_squared()).max(0.0);
    let fid = phi(&(u - &x), cfg.loss);
    let lhs = fid + g1 * off_samples + g2 * off_features;
    let lhs_gamma = fid + gamma * (off_samples + off_features);
    let (r1, r2) = (l_kept / l_next, w_kept / w_next);
    let rhs = phi(e.values(), cfg.loss) + gamma * xs.norm_squared() * (r1 + r2);
    let slack = BOUND_SLACK * rhs.max(1.0);
    Ok(BoundReport {
        lhs,
        lhs_gamma,
        rhs,
        holds: lhs <= rhs + slack,
        holds_gamma: lhs_gamma <= rhs + slack,
        sample_gap_ratio: r1,
        feature_gap_ratio: r2,
        gamma,
        gamma1: g1,
        gamma2: g2,
    })
}

/// Number of singular values above `threshold * sigma_0`.
pub fn rank_estimate(sigma: &[f64], threshold: f64) -> usize {
    let Some(&s0) = sigma.first() else { return 0 };
    if s0 <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > threshold * s0).count()
}

/// `W W^T`, the projector onto the span of the right singular vectors.
pub fn shape_interaction(w: &DMatrix<f64>) -> DMatrix<f64> {
    w * w.transpose()
}

/// `sum_ij sigma_i^2 (g1 lambda_j (w_i^T q_j)^2 + g2 omega_j (v_i^T p_j)^2)`
/// over full eigenbases; equals `g1 tr(U L1 U^T) + g2 tr(U^T L2 U)`.
pub fn alignment_energy(
    svd: &SvdTriplet,
    sample_eigs: &GraphEigs,
    feature_eigs: &GraphEigs,
    gamma1: f64,
    gamma2: f64,
) -> Result<f64> {
    let (n, p) = (svd.w.nrows(), svd.v.nrows());
    let full = |e: &GraphEigs, dim: usize| e.vectors().nrows() == dim && e.count() == dim;
    if !full(sample_eigs, n) || !full(feature_eigs, p) {
        return Err(Error::DimensionMismatch(format!(
            "need full eigenbases of sizes {n} and {p}, got {}x{} and {}x{}",
            sample_eigs.vectors().nrows(),
            sample_eigs.count(),
            feature_eigs.vectors().nrows(),
            feature_eigs.count()
        )));
    }
    let wq = svd.w.transpose() * sample_eigs.vectors();
    let vp = svd.v.transpose() * feature_eigs.vectors();
    let mut total = 0.0;
    for (i, s) in svd.sigma.iter().enumerate() {
        let mut acc = 0.0;
        for (j, lam) in sample_eigs.values().iter().enumerate() {
            acc += gamma1 * lam * wq[(i, j)].powi(2);
        }
        for (j, om) in feature_eigs.values().iter().enumerate() {
            acc += gamma2 * om * vp[(i, j)].powi(2);
        }
        total += s * s * acc;
    }
    Ok(total)
}

fn write_lines(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_bound_reports_csv(path: impl AsRef<Path>, reports: &[BoundReport]) -> Result<()> {
    write_lines(path.as_ref(), |w| {
        writeln!(
            w,
            "trial,lhs,lhs_gamma,rhs,holds,holds_gamma,sample_gap_ratio,feature_gap_ratio,gamma,gamma1,gamma2"
        )?;
        for (i, r) in reports.iter().enumerate() {
            writeln!(
                w,
                "{i},{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?}",
                r.lhs,
                r.lhs_gamma,
                r.rhs,
                r.holds,
                r.holds_gamma,
                r.sample_gap_ratio,
                r.feature_gap_ratio,
                r.gamma,
                r.gamma1,
                r.gamma2
            )?;
        }
        Ok(())
    })
}

/// One `index,value` row per entry.
pub fn write_spectrum_csv(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    write_lines(path.as_ref(), |w| {
        writeln!(w, "index,value")?;
        for (i, v) in values.iter().enumerate() {
            writeln!(w, "{i},{v:?}")?;
        }
        Ok(())
    })
}
