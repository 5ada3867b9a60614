use std::sync::Arc;

use super::tensor::{axpy, Float, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Compressed sparse row matrix with `f64` coefficients, used as a fixed
/// linear operator `target = S · source`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triples. Entries within a row keep
    /// ascending column order.
    pub fn from_triples(n_rows: usize, n_cols: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triples {
            if r >= n_rows || c >= n_cols {
                return Err(Error::dim(
                    "sparse",
                    format!("entry ({r},{c}) outside {n_rows}x{n_cols}"),
                ));
            }
            counts[r + 1] += 1;
        }
        for r in 0..n_rows {
            counts[r + 1] += counts[r];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0; triples.len()];
        let mut values = vec![0.0; triples.len()];
        let mut sorted: Vec<&(usize, usize, f64)> = triples.iter().collect();
        sorted.sort_by_key(|&&(r, c, _)| (r, c));
        for &&(r, c, v) in &sorted {
            let at = cursor[r];
            indices[at] = c;
            values[at] = v;
            cursor[r] += 1;
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Column indices and coefficients of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[r]..self.offsets[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triples = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triples.push((c, r, v));
            }
        }
        SparseMatrix::from_triples(self.n_cols, self.n_rows, &triples).expect("transpose of a valid matrix is valid")
    }

    /// Dense `n_rows × n_cols` copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in dense.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] += v;
            }
        }
        dense
    }

    /// `S · x`, rows of the result computed independently.
    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rows() != self.n_cols {
            return Err(Error::dim(
                "aggregate",
                format!("operator has {} source rows, input has {}", self.n_cols, x.rows()),
            ));
        }
        let width = x.cols();
        let mut out = Tensor::zeros(self.n_rows, width);
        par::for_each_row(out.data_mut(), width, |r, row| {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                axpy(T::of(v), x.row(c), row);
            }
        });
        Ok(out)
    }
}

/// An operator paired with its transpose, shared by tape nodes.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    pub(crate) forward: Arc<SparseMatrix>,
    pub(crate) adjoint: Arc<SparseMatrix>,
}

impl LinearOperator {
    pub fn new(matrix: SparseMatrix) -> Self {
        let adjoint = matrix.transpose();
        LinearOperator {
            forward: Arc::new(matrix),
            adjoint: Arc::new(adjoint),
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }

    /// The same pair with roles swapped.
    pub fn transposed(&self) -> LinearOperator {
        LinearOperator {
            forward: Arc::clone(&self.adjoint),
            adjoint: Arc::clone(&self.forward),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_swaps_entries() {
        let m = SparseMatrix::from_triples(2, 3, &[(0, 2, 1.5), (1, 0, -2.0), (0, 0, 0.5)]).unwrap();
        let t = m.transpose();
        assert_eq!(t.to_dense(), vec![vec![0.5, -2.0], vec![0.0, 0.0], vec![1.5, 0.0]]);
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn out_of_range_entry_rejected() {
        assert!(SparseMatrix::from_triples(1, 1, &[(0, 1, 1.0)]).is_err());
    }
}
