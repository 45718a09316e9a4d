//! Compressed sparse row storage.

/// Sparse matrix in compressed sparse row format.
///
/// Invariants (checked by [`CsrMatrix::validate`] and upheld by every
/// constructor):
/// * `row_ptr` has `rows + 1` monotonically non-decreasing entries with
///   `row_ptr[0] == 0` and `row_ptr[rows] == col_idx.len() == values.len()`;
/// * column indices are strictly increasing within each row (hence no
///   duplicates) and lie in `0..cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a `rows x cols` matrix from `(row, col, value)` triplets.
    /// Duplicate coordinates are summed; explicit zeros are kept.
    ///
    /// # Panics
    /// Panics if any coordinate is out of range.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(r, c, _) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of {rows}x{cols} bounds");
        }
        // Count entries per row, then fill with a moving cursor and finally
        // sort + merge duplicates within each row.
        let mut counts = vec![0usize; rows];
        for &(r, _, _) in triplets {
            counts[r] += 1;
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for r in 0..rows {
            row_ptr[r + 1] = row_ptr[r] + counts[r];
        }
        let nnz = row_ptr[rows];
        let mut col_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut cursor = row_ptr.clone();
        for &(r, c, v) in triplets {
            col_idx[cursor[r]] = c;
            values[cursor[r]] = v;
            cursor[r] += 1;
        }
        let mut out = CsrMatrix { rows, cols, row_ptr: vec![0; rows + 1], col_idx: Vec::new(), values: Vec::new() };
        let mut merged_cols = Vec::with_capacity(nnz);
        let mut merged_vals = Vec::with_capacity(nnz);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..rows {
            row.clear();
            for k in row_ptr[r]..row_ptr[r + 1] {
                row.push((col_idx[k], values[k]));
            }
            row.sort_unstable_by_key(|&(c, _)| c);
            for &(c, v) in row.iter() {
                if let Some(last) = merged_cols.last() {
                    if *last == c && merged_cols.len() > out.row_ptr[r] {
                        *merged_vals.last_mut().unwrap() += v;
                        continue;
                    }
                }
                merged_cols.push(c);
                merged_vals.push(v);
            }
            out.row_ptr[r + 1] = merged_cols.len();
        }
        out.col_idx = merged_cols;
        out.values = merged_vals;
        debug_assert!(out.validate());
        out
    }

    /// Builds a matrix directly from raw CSR arrays.
    ///
    /// # Panics
    /// Panics if the arrays violate the CSR invariants.
    pub fn from_raw(rows: usize, cols: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Self {
        let m = CsrMatrix { rows, cols, row_ptr, col_idx, values };
        assert!(m.validate(), "raw arrays violate CSR invariants");
        m
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Row pointer array (`rows + 1` entries).
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    /// Column indices, row by row.
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Stored values, row by row.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterator over the `(col, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    /// Checks the structural CSR invariants.
    pub fn validate(&self) -> bool {
        if self.row_ptr.len() != self.rows + 1 || self.row_ptr[0] != 0 {
            return false;
        }
        if *self.row_ptr.last().unwrap() != self.col_idx.len() || self.col_idx.len() != self.values.len() {
            return false;
        }
        for r in 0..self.rows {
            if self.row_ptr[r] > self.row_ptr[r + 1] {
                return false;
            }
            let row = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
            for (k, &c) in row.iter().enumerate() {
                if c >= self.cols || (k > 0 && row[k - 1] >= c) {
                    return false;
                }
            }
        }
        true
    }

    /// Matrix-vector product `A * v` into a fresh vector.
    ///
    /// # Panics
    /// Panics on dimension mismatch.
    pub fn spmv(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.spmv_into(v, &mut out);
        out
    }

    /// Matrix-vector product `A * v` written into `out`.
    ///
    /// # Panics
    /// Panics on dimension mismatch.
    pub fn spmv_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.cols, "spmv: vector length {} != cols {}", v.len(), self.cols);
        assert_eq!(out.len(), self.rows, "spmv: output length {} != rows {}", out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * v[self.col_idx[k]];
            }
            out[r] = acc;
        }
    }

    /// Subtracts `A * v` from `out` (`out -= A * v`), used when accumulating
    /// residuals without intermediate allocations.
    ///
    /// # Panics
    /// Panics on dimension mismatch.
    pub fn spmv_sub(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.cols, "spmv_sub: vector length {} != cols {}", v.len(), self.cols);
        assert_eq!(out.len(), self.rows, "spmv_sub: output length {} != rows {}", out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * v[self.col_idx[k]];
            }
            out[r] -= acc;
        }
    }

    /// Value at `(r, c)`, or zero when the entry is not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.col_idx[lo..hi].binary_search(&c) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// True when the matrix equals its transpose exactly (entrywise).
    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                if self.get(c, r) != v {
                    return false;
                }
            }
        }
        true
    }
}
