//! Compressed-row sparse matrices and a direct-factorization shift-invert
//! solver (LU by `faer` behind this module's interface).

use faer::prelude::SpSolver;
use faer::sparse::SparseColMat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("vector length {got} does not match matrix dimension {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("sparse LU factorization failed: {0}")]
    FactorizationFailure(String),
}

/// Square real sparse matrix in compressed row layout. Entries within each
/// row are stored sorted by column; the matrix-vector product sums them in
/// that order.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Row-sorted builder used by the assembly routines.
pub struct CsrBuilder {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        CsrBuilder {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.rows[row].push((col, value));
        }
    }

    pub fn build(mut self) -> CsrMatrix {
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut self.rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            for (c, v) in merged {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n)
            .map(|i| self.row_ptr[i + 1] - self.row_ptr[i])
            .max()
            .unwrap_or(0)
    }

    /// Infinity norm (max absolute row sum); scale reference for residual
    /// tolerances.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, SparseError> {
        if v.len() != self.n {
            return Err(SparseError::LengthMismatch {
                got: v.len(),
                expected: self.n,
            });
        }
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for (c, a) in self.row(i) {
                acc += a * v[c];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `A^T v`, used for left eigenvectors and adjoint checks.
    pub fn matvec_transpose(&self, v: &[f64]) -> Result<Vec<f64>, SparseError> {
        if v.len() != self.n {
            return Err(SparseError::LengthMismatch {
                got: v.len(),
                expected: self.n,
            });
        }
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for (c, a) in self.row(i) {
                out[c] += a * v[i];
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }

    /// Coordinate text export, one `row col value` triplet per line with 17
    /// significant digits.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                s.push_str(&format!("{} {} {:.16e}\n", i, c, v));
            }
        }
        s
    }

    fn to_faer_shifted(&self, shift: f64) -> Result<SparseColMat<usize, f64>, SparseError> {
        let mut triplets = Vec::with_capacity(self.nnz() + self.n);
        for i in 0..self.n {
            let mut saw_diag = false;
            for (c, v) in self.row(i) {
                let v = if c == i {
                    saw_diag = true;
                    v - shift
                } else {
                    v
                };
                triplets.push((i, c, v));
            }
            if !saw_diag && shift != 0.0 {
                triplets.push((i, i, -shift));
            }
        }
        SparseColMat::try_new_from_triplets(self.n, self.n, &triplets)
            .map_err(|e| SparseError::FactorizationFailure(format!("{e:?}")))
    }

    /// LU-factor `A - shift I`.
    pub fn factor_shifted(&self, shift: f64) -> Result<LuFactors, SparseError> {
        let mat = self.to_faer_shifted(shift)?;
        let lu = mat
            .sp_lu()
            .map_err(|e| SparseError::FactorizationFailure(format!("{e:?}")))?;
        Ok(LuFactors {
            lu,
            n: self.n,
            shift,
        })
    }
}

/// Factorization of `A - shift I`; solves both the direct and the transposed
/// system from a single factorization.
pub struct LuFactors {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
    shift: f64,
}

impl LuFactors {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut m = faer::Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(m.as_mut());
        (0..self.n).map(|i| m.read(i, 0)).collect()
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let mut m = faer::Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_transpose_in_place(m.as_mut());
        (0..self.n).map(|i| m.read(i, 0)).collect()
    }

    /// A factorization is usable if solving against a smooth probe stays
    /// finite; exactly singular matrices produce inf/NaN here.
    pub fn is_usable(&self) -> bool {
        let probe = vec![1.0; self.n];
        self.solve(&probe).iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CsrMatrix {
        let mut b = CsrBuilder::new(3);
        b.add(0, 0, 2.0);
        b.add(0, 1, -1.0);
        b.add(1, 0, -1.0);
        b.add(1, 1, 2.0);
        b.add(1, 2, -1.0);
        b.add(2, 1, -1.0);
        b.add(2, 2, 2.0);
        b.build()
    }

    #[test]
    fn matvec_against_dense() {
        let a = small();
        let d = a.to_dense();
        let v = vec![1.0, -2.0, 0.5];
        let got = a.matvec(&v).unwrap();
        let want = d * nalgebra::DVector::from_column_slice(&v);
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-15);
        }
        let gt = a.matvec_transpose(&v).unwrap();
        let wt = a.to_dense().transpose() * nalgebra::DVector::from_column_slice(&v);
        for i in 0..3 {
            assert!((gt[i] - wt[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_maps_to_zero_and_linearity() {
        let a = small();
        assert_eq!(a.matvec(&vec![0.0; 3]).unwrap(), vec![0.0; 3]);
        let u = vec![0.3, 1.0, -0.7];
        let v = vec![-1.1, 0.2, 0.9];
        let lhs = a
            .matvec(&u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect::<Vec<_>>())
            .unwrap();
        let au = a.matvec(&u).unwrap();
        let av = a.matvec(&v).unwrap();
        for i in 0..3 {
            let rhs = 2.0 * au[i] - 3.0 * av[i];
            assert!((lhs[i] - rhs).abs() <= 1e-14 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn lu_solves_direct_and_transpose() {
        let a = small();
        let lu = a.factor_shifted(0.0).unwrap();
        let rhs = vec![1.0, 0.0, -1.0];
        let x = lu.solve(&rhs);
        let back = a.matvec(&x).unwrap();
        for i in 0..3 {
            assert!((back[i] - rhs[i]).abs() < 1e-12);
        }
        let xt = lu.solve_transpose(&rhs);
        let backt = a.matvec_transpose(&xt).unwrap();
        for i in 0..3 {
            assert!((backt[i] - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_entries_are_summed() {
        let mut b = CsrBuilder::new(1);
        b.add(0, 0, 1.5);
        b.add(0, 0, 2.5);
        let a = b.build();
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.matvec(&[1.0]).unwrap(), vec![4.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = small();
        assert!(matches!(
            a.matvec(&[1.0]),
            Err(SparseError::LengthMismatch { .. })
        ));
    }
}
