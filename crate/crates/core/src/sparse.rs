//! Compressed sparse row storage with the two sparse-dense products the
//! solver needs: `L * U` and `U * L` for symmetric `L`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many output entries the products run sequentially.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// explicit zeros are kept out of the structure.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::DimensionMismatch(format!(
                    "entry ({r}, {c}) outside {nrows}x{ncols}"
                )));
            }
            sorted.push((r, c, v));
        }
        sorted.sort_by_key(|t| (t.0, t.1));

        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut data: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        };
        m.prune_zeros();
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    fn prune_zeros(&mut self) {
        if self.data.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut indptr = vec![0; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                if v != 0.0 {
                    indices.push(c);
                    data.push(v);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.data = data;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Non-zeros of row `r` as `(column, value)`, columns ascending.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    /// All stored entries as `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.data[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.nrows == self.ncols
            && self
                .triplets()
                .all(|(r, c, v)| (self.get(c, r) - v).abs() <= tol)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in self.indptr[r]..self.indptr[r + 1] {
            acc += self.data[k] * x[self.indices[k]];
        }
        acc
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "vector length mismatch");
        let xs = x.as_slice();
        DVector::from_iterator(self.nrows, (0..self.nrows).map(|r| self.row_dot(r, xs)))
    }

    /// `self * u` for dense `u`, parallel over the columns of `u`.
    pub fn mul_dense(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.nrows() != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "sparse {}x{} times dense {}x{}",
                self.nrows,
                self.ncols,
                u.nrows(),
                u.ncols()
            )));
        }
        let mut out = DMatrix::zeros(self.nrows, u.ncols());
        if self.nrows == 0 || u.ncols() == 0 {
            return Ok(out);
        }
        let src = u.as_slice();
        let k = u.nrows();
        let kernel = |(j, col): (usize, &mut [f64])| {
            let ucol = &src[j * k..(j + 1) * k];
            for (r, o) in col.iter_mut().enumerate() {
                *o = self.row_dot(r, ucol);
            }
        };
        let rows = self.nrows;
        if out.len() >= PAR_THRESHOLD {
            out.as_mut_slice().par_chunks_mut(rows).enumerate().for_each(kernel);
        } else {
            out.as_mut_slice().chunks_mut(rows).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `u * self` for dense `u`, assuming `self` is symmetric so that column
    /// `j` of `self` equals its row `j`. Parallel over output columns.
    pub fn right_mul_symmetric(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.ncols() != self.nrows || self.nrows != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "dense {}x{} times symmetric sparse {}x{}",
                u.nrows(),
                u.ncols(),
                self.nrows,
                self.ncols
            )));
        }
        let p = u.nrows();
        let mut out = DMatrix::zeros(p, self.ncols);
        if p == 0 || self.ncols == 0 {
            return Ok(out);
        }
        let src = u.as_slice();
        let kernel = |(j, col): (usize, &mut [f64])| {
            for (i, v) in self.row(j) {
                let ucol = &src[i * p..(i + 1) * p];
                for (o, &x) in col.iter_mut().zip(ucol) {
                    *o += v * x;
                }
            }
        };
        if out.len() >= PAR_THRESHOLD {
            out.as_mut_slice().par_chunks_mut(p).enumerate().for_each(kernel);
        } else {
            out.as_mut_slice().chunks_mut(p).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `x^T self x`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let xs = x.as_slice();
        (0..self.nrows).map(|r| xs[r] * self.row_dot(r, xs)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            for j in i..n {
                if rng.random_bool(0.3) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push((i, j, v));
                    if i != j {
                        t.push((j, i, v));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn out_of_range_triplet() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, p) in &[(7, 3), (40, 200), (130, 150)] {
            let l = random_symmetric(n, &mut rng);
            let dense = l.to_dense();
            let u = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
            let right = l.right_mul_symmetric(&u).unwrap();
            assert!((right - &u * &dense).norm() < 1e-10);
            let ut = u.transpose();
            let left = l.mul_dense(&ut).unwrap();
            assert!((left - &dense * &ut).norm() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let l = CsrMatrix::identity(3);
        assert!(l.mul_dense(&DMatrix::zeros(2, 2)).is_err());
        assert!(l.right_mul_symmetric(&DMatrix::zeros(2, 2)).is_err());
    }
}
