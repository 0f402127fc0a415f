//! Compressed sparse row matrices.
//!
//! Minimal CSR support for the renormalized adjacency operator: construction
//! from triplets, dense right-multiplication, and row-restricted variants used
//! by the batch-local Hessian-vector products.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sparse matrix in compressed sparse row form.
///
/// Within each row, column indices are strictly ascending, so accumulation
/// order is fixed and products are bit-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    /// Row i spans col_idx[row_ptr[i]..row_ptr[i+1]].
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Triplets may arrive in any
    /// order; duplicates are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::EdgeOutOfRange {
                    u: r,
                    v: c,
                    num_nodes: n_rows.max(n_cols),
                });
            }
        }
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            per_row[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for (r, row) in per_row.iter_mut().enumerate() {
            row.sort_unstable_by_key(|&(c, _)| c);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::DuplicateEdge { u: r, v: w[0].0 });
                }
            }
            for &(c, v) in row.iter() {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
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
        self.col_idx.len()
    }

    /// Entries of row `r` as (column, value) pairs in ascending column order.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Value at (r, c), zero if absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Dense copy, for small oracle-side checks.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out[(r, c)] = v;
            }
        }
        out
    }

    /// Sparse-dense product `self * dense`.
    ///
    /// Each output row accumulates in ascending column order of the CSR row,
    /// independent of any parallel row partitioning.
    pub fn spmm(&self, dense: &Array2<f64>) -> Result<Array2<f64>> {
        if dense.nrows() != self.n_cols {
            return Err(Error::DimensionMismatch {
                context: "spmm",
                expected: format!("{} rows", self.n_cols),
                found: format!("{} rows", dense.nrows()),
            });
        }
        let mut out = Array2::zeros((self.n_rows, dense.ncols()));
        self.spmm_into_rows_unchecked(dense, None, &mut out);
        Ok(out)
    }

    /// Sparse-dense product restricted to the given output rows; all other
    /// rows of `out` are left untouched. Restriction is exact when the caller
    /// knows the remaining rows are zero.
    pub fn spmm_rows(&self, dense: &Array2<f64>, rows: &[usize], out: &mut Array2<f64>) {
        debug_assert_eq!(dense.nrows(), self.n_cols);
        debug_assert_eq!(out.nrows(), self.n_rows);
        debug_assert_eq!(out.ncols(), dense.ncols());
        self.spmm_into_rows_unchecked(dense, Some(rows), out);
    }

    fn spmm_into_rows_unchecked(
        &self,
        dense: &Array2<f64>,
        rows: Option<&[usize]>,
        out: &mut Array2<f64>,
    ) {
        let k = dense.ncols();
        let mut body = |r: usize| {
            let mut acc = vec![0.0; k];
            for (c, v) in self.row(r) {
                let src = dense.row(c);
                for (a, s) in acc.iter_mut().zip(src.iter()) {
                    *a += v * s;
                }
            }
            for (j, a) in acc.into_iter().enumerate() {
                out[(r, j)] = a;
            }
        };
        match rows {
            Some(rows) => rows.iter().for_each(|&r| body(r)),
            None => (0..self.n_rows).for_each(body),
        }
    }

    /// Union of the given rows' column supports, sorted ascending. With a
    /// self-loop in every row this is the closed one-hop neighbourhood.
    pub fn expand_rows(&self, rows: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.n_cols];
        for &r in rows {
            for (c, _) in self.row(r) {
                seen[c] = true;
            }
        }
        seen.iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}
