//! Compressed sparse row matrices for graph propagation.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    /// Build from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(u32, u32, f64)]) -> Self {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in sorted {
            assert!((r as usize) < n_rows && (c as usize) < n_cols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r as usize + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self::from_triplets(n_rows, n_cols, &[])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn triplets(&self) -> Vec<(u32, u32, f64)> {
        (0..self.n_rows)
            .flat_map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .map(move |(&c, &v)| (r as u32, c, v))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let flipped: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, &flipped)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for (r, c, v) in self.triplets() {
            out[[r as usize, c as usize]] += v;
        }
        out
    }

    /// Sparse-dense product. Rows are accumulated in column-index order, so the
    /// result is bitwise reproducible.
    pub fn matmul(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n_cols, "spmm dimension mismatch");
        let mut out = Array2::zeros((self.n_rows, x.ncols()));
        for (r, mut target) in out.rows_mut().into_iter().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &w) in cols.iter().zip(vals) {
                target.scaled_add(w, &x.row(c as usize));
            }
        }
        out
    }
}
