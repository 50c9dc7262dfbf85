//! Thin wrapper around a sparse symmetric positive-definite solve.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::DVector;

use crate::error::{Error, Result};

/// Symmetric sparse matrix accumulated as triplets; duplicate entries sum.
#[derive(Debug, Clone, Default)]
pub struct TripletMatrix {
    n: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl TripletMatrix {
    pub fn new(n: usize) -> Self {
        TripletMatrix { n, entries: Vec::new() }
    }

    pub fn add(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        if val != 0.0 {
            self.entries.push(Triplet::new(row, col, val));
        }
    }

    /// Add `val` at (row, col) and (col, row).
    pub fn add_sym(&mut self, row: usize, col: usize, val: f64) {
        self.add(row, col, val);
        if row != col {
            self.add(col, row, val);
        }
    }

    /// Solve `A x = b` for symmetric positive definite `A` by sparse
    /// Cholesky.
    pub fn solve_spd(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(b.len(), self.n);
        let mat = SparseColMat::try_new_from_triplets(self.n, self.n, &self.entries)
            .map_err(|e| Error::Factorization(format!("sparse assembly failed: {e:?}")))?;
        let llt = mat
            .sp_cholesky(faer::Side::Lower)
            .map_err(|e| Error::Factorization(format!("sparse Cholesky failed: {e:?}")))?;
        let mut rhs = Mat::<f64>::zeros(self.n, 1);
        for i in 0..self.n {
            rhs[(i, 0)] = b[i];
        }
        let x = llt.solve(&rhs);
        Ok(DVector::from_fn(self.n, |i, _| x[(i, 0)]))
    }

    #[cfg(test)]
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut out = nalgebra::DMatrix::zeros(self.n, self.n);
        for t in &self.entries {
            out[(t.row, t.col)] += t.val;
        }
        out
    }
}
