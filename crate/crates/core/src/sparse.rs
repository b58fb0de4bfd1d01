//! Compressed sparse row matrices used for graph adjacency.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A sparse matrix in CSR form.
///
/// Column indices are strictly increasing within each row and every stored
/// weight is finite. Built from a coordinate list where duplicate
/// `(row, col)` pairs are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, w) in triplets {
            if r >= n_rows {
                return Err(Error::IndexOutOfRange {
                    what: "sparse rows",
                    index: r,
                    size: n_rows,
                });
            }
            if c >= n_cols {
                return Err(Error::IndexOutOfRange {
                    what: "sparse columns",
                    index: c,
                    size: n_cols,
                });
            }
            if !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite weight {w} at ({r}, {c})"
                )));
            }
            entries.push((r, c, w));
        }
        entries.sort_by_key(|e| (e.0, e.1));

        let mut row_ptr = vec![0; n_rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, w) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += w;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(w);
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(t: &Tensor) -> Self {
        let triplets = (0..t.rows()).flat_map(|r| {
            (0..t.cols()).filter_map(move |c| {
                let w = t.get(r, c);
                (w != 0.0).then_some((r, c, w))
            })
        });
        Self::from_triplets(t.rows(), t.cols(), triplets).expect("dense input is in range")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and weights stored in row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn row_degree(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    /// Coordinate-list view, sorted by `(row, col)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &w)| (r, c, w))
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        Self::from_triplets(
            self.n_cols,
            self.n_rows,
            self.triplets().map(|(r, c, w)| (c, r, w)),
        )
        .expect("transpose stays in range")
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n_rows, self.n_cols);
        for (r, c, w) in self.triplets() {
            t.set(r, c, w);
        }
        t
    }

    /// `self · x`.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if self.n_cols != x.rows() {
            return Err(Error::shape("spmm", self.shape(), x.shape()));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.n_rows, d);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let o = out.row_mut(r);
            for (&c, &w) in cols.iter().zip(vals) {
                for (o, &v) in o.iter_mut().zip(x.row(c)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`, the adjoint of [`matmul_dense`](Self::matmul_dense).
    pub fn transpose_matmul_dense(&self, g: &Tensor) -> Result<Tensor> {
        if self.n_rows != g.rows() {
            return Err(Error::shape("spmm_t", self.shape(), g.shape()));
        }
        let d = g.cols();
        let mut out = Tensor::zeros(self.n_cols, d);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let gr = g.row(r);
            for (&c, &w) in cols.iter().zip(vals) {
                for (o, &v) in out.row_mut(c).iter_mut().zip(gr) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// One `row\tcol\tweight` line per stored entry, sorted.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        for (r, c, w) in self.triplets() {
            writeln!(s, "{r}\t{c}\t{w}").unwrap();
        }
        s
    }
}
