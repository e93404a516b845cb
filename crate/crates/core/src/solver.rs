//! Low-rank recovery on two graphs: accelerated proximal gradient (FISTA)
//! on `phi(U - X) + g1 tr(U L1 U^T) + g2 tr(U^T L2 U)`, plus dense
//! closed-form solvers used as oracles.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{dense_laplacian, spectral_norm, SparseGraph, SpectralNormMode};
use crate::matrix::DataMatrix;

/// Elementwise work below this many entries stays on one thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Largest side accepted by the dense oracles.
pub const DENSE_ORACLE_MAX: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    L1,
    FrobeniusSq,
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Loss::L1),
            "frobenius_sq" => Ok(Loss::FrobeniusSq),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss `{other}` (expected l1 or frobenius_sq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Step {
    /// `1 / beta'` with `beta' = 2 g1 ||L1|| + 2 g2 ||L2||`.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub loss: Loss,
    pub gamma1: f64,
    pub gamma2: f64,
    pub step: Step,
    pub epsilon: f64,
    pub max_iters: usize,
    pub norm_mode: SpectralNormMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            loss: Loss::L1,
            gamma1: 1.0,
            gamma2: 1.0,
            step: Step::Auto,
            epsilon: 1e-6,
            max_iters: 1000,
            norm_mode: SpectralNormMode::Bound,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    loss: Option<Loss>,
    gamma1: Option<f64>,
    gamma2: Option<f64>,
    step: Option<RawStep>,
    epsilon: Option<f64>,
    max_iters: Option<i64>,
    spectral_norm: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawStep {
    Value(f64),
    Name(String),
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) {
            return bad(format!("gamma1 must be finite and >= 0, got {}", self.gamma1));
        }
        if !(self.gamma2 >= 0.0 && self.gamma2.is_finite()) {
            return bad(format!("gamma2 must be finite and >= 0, got {}", self.gamma2));
        }
        if let Step::Fixed(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("step must be > 0, got {s}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines (TOML syntax). Missing keys keep their
    /// defaults; unknown keys are rejected by name.
    ///
    /// Keys: `loss`, `gamma1`, `gamma2`, `step` (number or `"auto"`),
    /// `epsilon`, `max_iters`, `spectral_norm` (`"bound"` or `"power"`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("solver config: {}", e.message())))?;
        let mut cfg = SolverConfig::default();
        if let Some(l) = raw.loss {
            cfg.loss = l;
        }
        if let Some(g) = raw.gamma1 {
            cfg.gamma1 = g;
        }
        if let Some(g) = raw.gamma2 {
            cfg.gamma2 = g;
        }
        match raw.step {
            None => {}
            Some(RawStep::Value(v)) => cfg.step = Step::Fixed(v),
            Some(RawStep::Name(s)) if s == "auto" => cfg.step = Step::Auto,
            Some(RawStep::Name(s)) => {
                return Err(Error::InvalidArgument(format!("step must be a number or \"auto\", got \"{s}\"")))
            }
        }
        if let Some(e) = raw.epsilon {
            cfg.epsilon = e;
        }
        if let Some(m) = raw.max_iters {
            cfg.max_iters = usize::try_from(m)
                .map_err(|_| Error::InvalidArgument(format!("max_iters must be >= 1, got {m}")))?;
        }
        if let Some(mode) = raw.spectral_norm {
            cfg.norm_mode = parse_norm_mode(&mode)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The step actually used for the given graphs.
    pub fn step_size(&self, l1: &SparseGraph, l2: &SparseGraph) -> f64 {
        match self.step {
            Step::Fixed(s) => s,
            Step::Auto => {
                let beta = 2.0 * self.gamma1 * spectral_norm(l1, self.norm_mode)
                    + 2.0 * self.gamma2 * spectral_norm(l2, self.norm_mode);
                // Without a smooth part any step is a valid one.
                if beta > 0.0 {
                    1.0 / beta
                } else {
                    1.0
                }
            }
        }
    }
}

pub fn parse_norm_mode(s: &str) -> Result<SpectralNormMode> {
    match s {
        "bound" => Ok(SpectralNormMode::Bound),
        "power" => Ok(SpectralNormMode::PowerIteration),
        other => Err(Error::InvalidArgument(format!(
            "spectral_norm must be \"bound\" or \"power\", got \"{other}\""
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct LowRankResult {
    pub u: DataMatrix,
    /// `X - U`.
    pub s: DataMatrix,
    /// Objective at each iterate `U_1, U_2, ...`.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub step: f64,
}

fn check_dims(u: &DMatrix<f64>, l1: &SparseGraph, l2: &SparseGraph) -> Result<()> {
    let (p, n) = u.shape();
    if l1.vertex_count() != n || l2.vertex_count() != p {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {p}x{n} but the sample graph has {} vertices and the feature graph {}",
            l1.vertex_count(),
            l2.vertex_count()
        )));
    }
    Ok(())
}

/// `a += s * b`.
fn add_scaled(a: &mut DMatrix<f64>, s: f64, b: &DMatrix<f64>) {
    for (ai, bi) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *ai += s * bi;
    }
}

fn fidelity(r: &DMatrix<f64>, loss: Loss) -> f64 {
    match loss {
        Loss::L1 => r.iter().map(|v| v.abs()).sum(),
        Loss::FrobeniusSq => r.norm_squared(),
    }
}

/// `(U L1, L2 U)`: the two sparse products shared by the objective and the
/// gradient.
fn smooth_products(u: &DMatrix<f64>, l1: &SparseGraph, l2: &SparseGraph) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((l1.laplacian().right_mul_symmetric(u)?, l2.laplacian().mul_dense(u)?))
}

fn objective_dense(
    u: &DMatrix<f64>,
    x: &DMatrix<f64>,
    l1: &SparseGraph,
    l2: &SparseGraph,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_dims(u, l1, l2)?;
    if u.shape() != x.shape() {
        return Err(Error::DimensionMismatch(format!(
            "U is {:?} but X is {:?}",
            u.shape(),
            x.shape()
        )));
    }
    let (ul1, l2u) = smooth_products(u, l1, l2)?;
    Ok(fidelity(&(u - x), cfg.loss) + cfg.gamma1 * u.dot(&ul1) + cfg.gamma2 * u.dot(&l2u))
}

pub fn objective(u: &DataMatrix, x: &DataMatrix, l1: &SparseGraph, l2: &SparseGraph, cfg: &SolverConfig) -> Result<f64> {
    objective_dense(u.values(), x.values(), l1, l2, cfg)
}

fn gradient_dense(u: &DMatrix<f64>, l1: &SparseGraph, l2: &SparseGraph, gamma1: f64, gamma2: f64) -> Result<DMatrix<f64>> {
    check_dims(u, l1, l2)?;
    let (mut ul1, l2u) = smooth_products(u, l1, l2)?;
    ul1 *= 2.0 * gamma1;
    add_scaled(&mut ul1, 2.0 * gamma2, &l2u);
    Ok(ul1)
}

/// `2 (g1 U L1 + g2 L2 U)`, the gradient of the two graph terms.
pub fn gradient_smooth(u: &DataMatrix, l1: &SparseGraph, l2: &SparseGraph, gamma1: f64, gamma2: f64) -> Result<DataMatrix> {
    let g = gradient_dense(u.values(), l1, l2, gamma1, gamma2)?;
    Ok(u.map_values(g))
}

fn prox_in_place(u: &mut DMatrix<f64>, x: &DMatrix<f64>, lam: f64, loss: Loss) {
    let shrink = 1.0 / (1.0 + 2.0 * lam);
    let f = move |(ui, &xi): (&mut f64, &f64)| {
        let d = *ui - xi;
        *ui = match loss {
            Loss::L1 => xi + d.signum() * (d.abs() - lam).max(0.0),
            // Written around X so that U = X maps to X exactly.
            Loss::FrobeniusSq => xi + d * shrink,
        };
    };
    if u.len() >= PAR_THRESHOLD {
        u.as_mut_slice().par_iter_mut().zip(x.as_slice().par_iter()).for_each(f);
    } else {
        u.as_mut_slice().iter_mut().zip(x.as_slice()).for_each(f);
    }
}

/// Proximal operator of `lam * phi(. - X)`.
pub fn prox_fidelity(u: &DataMatrix, x: &DataMatrix, lam: f64, loss: Loss) -> Result<DataMatrix> {
    if u.values().shape() != x.values().shape() {
        return Err(Error::DimensionMismatch(format!(
            "U is {:?} but X is {:?}",
            u.values().shape(),
            x.values().shape()
        )));
    }
    if !(lam > 0.0) {
        return Err(Error::InvalidArgument(format!("prox parameter must be > 0, got {lam}")));
    }
    let mut out = u.values().clone();
    prox_in_place(&mut out, x.values(), lam, loss);
    Ok(u.map_values(out))
}

/// Runs FISTA from `U_0 = Y_1 = X` until
/// `||Y_{j+1} - Y_j||^2 < eps ||Y_j||^2` or `max_iters`.
pub fn fista_solve(x: &DataMatrix, l1: &SparseGraph, l2: &SparseGraph, cfg: &SolverConfig) -> Result<LowRankResult> {
    cfg.validate()?;
    let xv = x.values();
    check_dims(xv, l1, l2)?;
    let lam = cfg.step_size(l1, l2);

    let mut y = xv.clone();
    let mut u_prev = xv.clone();
    let mut t = 1.0_f64;
    let mut trace = Vec::with_capacity(cfg.max_iters.min(4096));
    let mut converged = false;
    let mut iterations = 0;

    for j in 1..=cfg.max_iters {
        iterations = j;
        let (ul1, l2u) = smooth_products(&y, l1, l2)?;
        let mut u = y.clone();
        add_scaled(&mut u, -2.0 * lam * cfg.gamma1, &ul1);
        add_scaled(&mut u, -2.0 * lam * cfg.gamma2, &l2u);
        prox_in_place(&mut u, xv, lam, cfg.loss);

        let obj = objective_dense(&u, xv, l1, l2, cfg)?;
        if !obj.is_finite() {
            return Err(Error::Diverged { iteration: j });
        }
        trace.push(obj);

        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mut y_next = &u - &u_prev;
        y_next *= (t - 1.0) / t_next;
        y_next += &u;

        let change = (&y_next - &y).norm_squared();
        let size = y.norm_squared();
        if !change.is_finite() || !size.is_finite() {
            return Err(Error::Diverged { iteration: j });
        }
        u_prev = u;
        // The exact-zero case covers X = 0, where the relative test can never fire.
        if change < cfg.epsilon * size || change == 0.0 {
            converged = true;
            break;
        }
        y = y_next;
        t = t_next;
    }

    let s = xv - &u_prev;
    Ok(LowRankResult {
        u: x.map_values(u_prev),
        s: x.map_values(s),
        objective_trace: trace,
        iterations,
        converged,
        step: lam,
    })
}

fn dense_size_check(x: &DMatrix<f64>, l1: &SparseGraph, l2: &SparseGraph) -> Result<()> {
    check_dims(x, l1, l2)?;
    let (p, n) = x.shape();
    if p > DENSE_ORACLE_MAX || n > DENSE_ORACLE_MAX {
        return Err(Error::InvalidArgument(format!(
            "dense solver limited to {DENSE_ORACLE_MAX} per side, got {p}x{n}"
        )));
    }
    Ok(())
}

/// Exact minimizer of `||X - U||_F^2 + g1 tr(U L1 U^T) + g2 tr(U^T L2 U)`
/// through the eigendecompositions of both Laplacians.
pub fn sylvester_solve(x: &DataMatrix, l1: &SparseGraph, l2: &SparseGraph, gamma1: f64, gamma2: f64) -> Result<DataMatrix> {
    let xv = x.values();
    dense_size_check(xv, l1, l2)?;
    let e1 = SymmetricEigen::new(dense_laplacian(l1));
    let e2 = SymmetricEigen::new(dense_laplacian(l2));
    let (q, lam) = (&e1.eigenvectors, &e1.eigenvalues);
    let (p, om) = (&e2.eigenvectors, &e2.eigenvalues);
    let mut m = p.transpose() * xv * q;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            m[(i, j)] /= 1.0 + gamma2 * om[i] + gamma1 * lam[j];
        }
    }
    Ok(x.map_values(p * m * q.transpose()))
}

/// `(I + g2 L2)^{-1} X (I + g1 L1)^{-1}` by two Cholesky solves.
pub fn sequential_prox(x: &DataMatrix, l1: &SparseGraph, l2: &SparseGraph, gamma1: f64, gamma2: f64) -> Result<DataMatrix> {
    let xv = x.values();
    dense_size_check(xv, l1, l2)?;
    let shifted = |g: &SparseGraph, gamma: f64| {
        let n = g.vertex_count();
        DMatrix::identity(n, n) + dense_laplacian(g) * gamma
    };
    let not_pd = || Error::InvalidArgument("regularized Laplacian is not positive definite".into());
    let a2 = Cholesky::new(shifted(l2, gamma2)).ok_or_else(not_pd)?;
    let a1 = Cholesky::new(shifted(l1, gamma1)).ok_or_else(not_pd)?;
    let left = a2.solve(xv);
    // Z A1 = left  <=>  A1 Z^T = left^T, A1 symmetric.
    let out = a1.solve(&left.transpose()).transpose();
    Ok(x.map_values(out))
}

/// Writes `iteration,objective` rows, iterations counted from 1.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "iteration,objective")?;
        for (i, v) in trace.iter().enumerate() {
            writeln!(w, "{},{:?}", i + 1, v)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, knn_exact, Sigma2};
    use crate::sparse::CsrMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> SparseGraph {
        let pts = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
        build_graph(&knn_exact(&pts, 2.min(n - 1)).unwrap(), Sigma2::Fixed(1.0)).unwrap()
    }

    fn random_data(p: usize, n: usize, rng: &mut ChaCha8Rng) -> DataMatrix {
        DataMatrix::new(DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn chain(n: usize) -> SparseGraph {
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.push((i, i + 1, 1.0));
            t.push((i + 1, i, 1.0));
        }
        SparseGraph::from_adjacency(CsrMatrix::from_triplets(n, n, &t).unwrap()).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn objective_matches_dense_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l1, l2) = (random_graph(5, &mut rng), random_graph(4, &mut rng));
        let x = random_data(4, 5, &mut rng);
        let u = random_data(4, 5, &mut rng);
        let cfg = SolverConfig {
            gamma1: 0.7,
            gamma2: 1.3,
            ..Default::default()
        };
        let (d1, d2) = (dense_laplacian(&l1), dense_laplacian(&l2));
        let (uv, xv) = (u.values(), x.values());
        let oracle = (uv - xv).iter().map(|v| v.abs()).sum::<f64>()
            + 0.7 * (uv * &d1 * uv.transpose()).trace()
            + 1.3 * (uv.transpose() * &d2 * uv).trace();
        let got = objective(&u, &x, &l1, &l2, &cfg).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());

        let zero = DataMatrix::new(DMatrix::zeros(4, 5)).unwrap();
        let phi_x: f64 = xv.iter().map(|v| v.abs()).sum();
        assert!((objective(&zero, &x, &l1, &l2, &cfg).unwrap() - phi_x).abs() < 1e-12);
        let at_x = objective(&x, &x, &l1, &l2, &cfg).unwrap();
        let traces = 0.7 * (xv * &d1 * xv.transpose()).trace() + 1.3 * (xv.transpose() * &d2 * xv).trace();
        assert!((at_x - traces).abs() < 1e-12 * traces);
    }

    #[test]
    fn objective_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_data(4, 5, &mut rng);
        let (l1, l2) = (random_graph(4, &mut rng), random_graph(4, &mut rng));
        assert!(matches!(
            objective(&x, &x, &l1, &l2, &SolverConfig::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gradient_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l1, l2) = (random_graph(6, &mut rng), random_graph(5, &mut rng));
        let zero = DataMatrix::new(DMatrix::zeros(5, 6)).unwrap();
        assert_eq!(gradient_smooth(&zero, &l1, &l2, 2.0, 3.0).unwrap().values().amax(), 0.0);
        let u = random_data(5, 6, &mut rng);
        assert_eq!(gradient_smooth(&u, &l1, &l2, 0.0, 0.0).unwrap().values().amax(), 0.0);
    }

    #[test]
    fn prox_examples() {
        let x = DataMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]).unwrap();
        let u = DataMatrix::from_row_slice(1, 3, &[2.0, -0.5, 3.0]).unwrap();
        let out = prox_fidelity(&u, &x, 1.0, Loss::L1).unwrap();
        assert_eq!(out.values().as_slice(), &[1.0, 0.0, 2.0]);
        for loss in [Loss::L1, Loss::FrobeniusSq] {
            assert_eq!(prox_fidelity(&x, &x, 0.3, loss).unwrap(), x);
        }
        // (U + 2 lam X) / (1 + 2 lam) with lam = 0.5
        let out = prox_fidelity(&u, &x, 0.5, Loss::FrobeniusSq).unwrap();
        assert_eq!(out.values().as_slice(), &[1.0, -0.25, 2.0]);
        assert!(prox_fidelity(&u, &x, 0.0, Loss::L1).is_err());
    }

    #[test]
    fn zero_gammas_stop_after_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_data(6, 9, &mut rng);
        let (l1, l2) = (random_graph(9, &mut rng), random_graph(6, &mut rng));
        let cfg = SolverConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            ..Default::default()
        };
        let r = fista_solve(&x, &l1, &l2, &cfg).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.u, x);
        assert_eq!(r.step, 1.0);
    }

    #[test]
    fn zero_data_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DataMatrix::new(DMatrix::zeros(3, 4)).unwrap();
        let (l1, l2) = (random_graph(4, &mut rng), random_graph(3, &mut rng));
        let r = fista_solve(&x, &l1, &l2, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.u.values().amax(), 0.0);
    }

    #[test]
    fn residual_reconstructs_input_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_data(7, 11, &mut rng);
        let (l1, l2) = (random_graph(11, &mut rng), random_graph(7, &mut rng));
        let r = fista_solve(&x, &l1, &l2, &SolverConfig::default()).unwrap();
        assert_eq!(r.s.values(), &(x.values() - r.u.values()));
    }

    #[test]
    fn huge_step_diverges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_data(8, 10, &mut rng);
        let (l1, l2) = (random_graph(10, &mut rng), random_graph(8, &mut rng));
        let cfg = SolverConfig {
            gamma1: 10.0,
            gamma2: 10.0,
            step: Step::Fixed(1e3),
            max_iters: 1000,
            ..Default::default()
        };
        let err = fista_solve(&x, &l1, &l2, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_data(8, 10, &mut rng);
        let (l1, l2) = (random_graph(10, &mut rng), random_graph(8, &mut rng));
        let cfg = SolverConfig {
            epsilon: 1e-300,
            max_iters: 3,
            ..Default::default()
        };
        let r = fista_solve(&x, &l1, &l2, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert_eq!(r.objective_trace.len(), 3);
    }

    #[test]
    fn sylvester_trivial_and_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_data(3, 3, &mut rng);
        let (l1, l2) = (chain(3), chain(3));
        let same = sylvester_solve(&x, &l1, &l2, 0.0, 0.0).unwrap();
        assert!(rel(same.values(), x.values()) < 1e-14);
        let zero = DataMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(sylvester_solve(&zero, &l1, &l2, 1.0, 2.0).unwrap().values().amax(), 0.0);

        let u = sylvester_solve(&x, &l1, &l2, 1.5, 0.5).unwrap();
        let (d1, d2) = (dense_laplacian(&l1), dense_laplacian(&l2));
        let uv = u.values();
        let residual = uv + 0.5 * &d2 * uv + 1.5 * uv * &d1 - x.values();
        assert!(residual.norm() <= 1e-10 * x.values().norm());
    }

    #[test]
    fn sequential_prox_matches_eigen_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_data(9, 12, &mut rng);
        let (l1, l2) = (random_graph(12, &mut rng), random_graph(9, &mut rng));
        let (g1, g2) = (2.0, 0.7);
        let got = sequential_prox(&x, &l1, &l2, g1, g2).unwrap();
        let e1 = SymmetricEigen::new(dense_laplacian(&l1));
        let e2 = SymmetricEigen::new(dense_laplacian(&l2));
        let inv = |e: &SymmetricEigen<f64, nalgebra::Dyn>, g: f64| {
            let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / (1.0 + g * v)));
            &e.eigenvectors * d * e.eigenvectors.transpose()
        };
        let oracle = inv(&e2, g2) * x.values() * inv(&e1, g1);
        assert!(rel(got.values(), &oracle) < 1e-10);
        assert!(rel(sequential_prox(&x, &l1, &l2, 0.0, 0.0).unwrap().values(), x.values()) < 1e-14);
    }

    #[test]
    fn sequential_prox_shrinks_aligned_spectrum() {
        let n = 8;
        let (l1, l2) = (chain(n), chain(n));
        let e1 = GraphEigsLike::new(&l1);
        let e2 = GraphEigsLike::new(&l2);
        let s: Vec<f64> = (0..n).map(|i| 10.0 - i as f64).collect();
        let x = &e2.vectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.clone())) * e1.vectors.transpose();
        let x = DataMatrix::new(x).unwrap();
        let (g1, g2) = (0.8, 1.7);
        let out = sequential_prox(&x, &l1, &l2, g1, g2).unwrap();
        let mut expected: Vec<f64> = (0..n)
            .map(|i| s[i] / ((1.0 + g2 * e2.values[i]) * (1.0 + g1 * e1.values[i])))
            .collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        let mut got: Vec<f64> = out.values().clone().svd(false, false).singular_values.iter().copied().collect();
        got.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    struct GraphEigsLike {
        values: Vec<f64>,
        vectors: DMatrix<f64>,
    }

    impl GraphEigsLike {
        fn new(g: &SparseGraph) -> Self {
            let e = crate::graph::GraphEigs::from_dense(&dense_laplacian(g));
            GraphEigsLike {
                values: e.values().to_vec(),
                vectors: e.vectors().clone(),
            }
        }
    }

    #[test]
    fn fista_frobenius_matches_sylvester() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_data(10, 15, &mut rng);
        let (l1, l2) = (random_graph(15, &mut rng), random_graph(10, &mut rng));
        let cfg = SolverConfig {
            loss: Loss::FrobeniusSq,
            gamma1: 1.2,
            gamma2: 0.6,
            // The relative-change rule can fire at a momentum turnaround well
            // before the iterate is accurate, so the tolerance sits near
            // machine precision.
            epsilon: 1e-24,
            max_iters: 20000,
            ..Default::default()
        };
        let r = fista_solve(&x, &l1, &l2, &cfg).unwrap();
        let oracle = sylvester_solve(&x, &l1, &l2, 1.2, 0.6).unwrap();
        let e = rel(r.u.values(), oracle.values());
        assert!(r.converged && e < 1e-6, "iters {} err {e:.3e}", r.iterations);
    }

    #[test]
    fn dense_solvers_reject_large_inputs() {
        let n = DENSE_ORACLE_MAX + 1;
        let x = DataMatrix::new(DMatrix::zeros(2, n)).unwrap();
        let (l1, l2) = (SparseGraph::edgeless(n), SparseGraph::edgeless(2));
        assert!(sylvester_solve(&x, &l1, &l2, 1.0, 1.0).is_err());
        assert!(sequential_prox(&x, &l1, &l2, 1.0, 1.0).is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = SolverConfig::from_toml_str(
            "loss = \"frobenius_sq\"\ngamma1 = 3\ngamma2 = 0.5\nstep = 0.01\nepsilon = 1e-8\nmax_iters = 50\nspectral_norm = \"power\"\n",
        )
        .unwrap();
        assert_eq!(cfg.loss, Loss::FrobeniusSq);
        assert_eq!(cfg.gamma1, 3.0);
        assert_eq!(cfg.step, Step::Fixed(0.01));
        assert_eq!(cfg.max_iters, 50);
        assert_eq!(cfg.norm_mode, SpectralNormMode::PowerIteration);
        assert_eq!(SolverConfig::from_toml_str("step = \"auto\"").unwrap().step, Step::Auto);
        assert_eq!(SolverConfig::from_toml_str("").unwrap(), SolverConfig::default());

        let err = SolverConfig::from_toml_str("gamma3 = 1").unwrap_err();
        assert!(err.to_string().contains("gamma3"), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(SolverConfig::from_toml_str("gamma1 = -1").is_err());
        assert!(SolverConfig::from_toml_str("max_iters = 0").is_err());
        assert!(SolverConfig::from_toml_str("step = \"fast\"").is_err());
    }

    #[test]
    fn trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &[3.0, 2.5]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "iteration,objective\n1,3.0\n2,2.5\n");
    }
}
