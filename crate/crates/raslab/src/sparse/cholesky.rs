//! Envelope (skyline) Cholesky factorization for SPD matrices.
//!
//! Rows of the lower factor `L` are stored packed from their first nonzero
//! column up to the diagonal. Cholesky produces no fill outside the row
//! envelope of `A`, so for grid-ordered Poisson blocks (already banded) this
//! needs no fill-reducing ordering.

use thiserror::Error;

use super::CsrMatrix;

/// The matrix turned out not to be positive definite: the pivot at `row`
/// was zero, negative, or non-finite.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("matrix is not positive definite: pivot at row {row} is not positive")]
pub struct NotSpdError {
    /// Row at which factorization broke down.
    pub row: usize,
}

/// Cholesky factor `L` (with `A = L L^T`) in envelope storage.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    /// `first[i]` is the column of the first stored entry of row `i` of `L`.
    first: Vec<usize>,
    /// `row_start[i]` is the offset of row `i` in `vals`; row `i` occupies
    /// columns `first[i]..=i`, so it has `i - first[i] + 1` entries.
    row_start: Vec<usize>,
    /// Packed rows of `L`, diagonal entry last within each row.
    vals: Vec<f64>,
}

impl SpdFactor {
    /// Matrix dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry `L[i][j]` (zero outside the envelope / above the diagonal).
    pub fn lower(&self, i: usize, j: usize) -> f64 {
        if j > i || j < self.first[i] {
            0.0
        } else {
            self.vals[self.row_start[i] + (j - self.first[i])]
        }
    }

    /// Solves `A x = b` in place: on return `x` holds the solution.
    ///
    /// # Panics
    /// Panics when `x.len() != n`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n, "spd_solve: rhs length {} != n {}", x.len(), self.n);
        // Forward substitution L y = b.
        for i in 0..self.n {
            let fi = self.first[i];
            let base = self.row_start[i];
            let mut acc = x[i];
            for k in fi..i {
                acc -= self.vals[base + (k - fi)] * x[k];
            }
            x[i] = acc / self.vals[base + (i - fi)];
        }
        // Backward substitution L^T x = y, column by column.
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let base = self.row_start[i];
            let xi = x[i] / self.vals[base + (i - fi)];
            x[i] = xi;
            for k in fi..i {
                x[k] -= self.vals[base + (k - fi)] * xi;
            }
        }
    }
}

/// Factorizes a symmetric positive definite matrix, reading its lower
/// triangle. Fails with the breakdown row when a pivot is not positive.
pub fn spd_factor(a: &CsrMatrix) -> Result<SpdFactor, NotSpdError> {
    assert_eq!(a.rows(), a.cols(), "spd_factor: matrix must be square");
    debug_assert!(a.is_symmetric(), "spd_factor: matrix must be symmetric");
    let n = a.rows();

    // Row envelope: first column of each row, clipped to the lower triangle.
    let mut first = vec![0usize; n];
    for i in 0..n {
        let mut fi = i;
        for (c, _) in a.row(i) {
            if c <= i {
                fi = fi.min(c);
                break; // columns are sorted, the first one below the diagonal wins
            }
        }
        first[i] = fi;
    }
    let mut row_start = vec![0usize; n + 1];
    for i in 0..n {
        row_start[i + 1] = row_start[i] + (i - first[i] + 1);
    }

    // Copy the lower triangle of A into the envelope, zero elsewhere.
    let mut vals = vec![0.0; row_start[n]];
    for i in 0..n {
        for (c, v) in a.row(i) {
            if c <= i {
                vals[row_start[i] + (c - first[i])] = v;
            }
        }
    }

    // In-place factorization, row by row (sequential left-to-right
    // accumulation keeps the result bit-reproducible across runs).
    for i in 0..n {
        let (done, cur) = vals.split_at_mut(row_start[i]);
        let fi = first[i];
        for j in fi..i {
            let fj = first[j];
            let lo = fi.max(fj);
            let mut acc = cur[j - fi];
            let ri = &cur[(lo - fi)..(j - fi)];
            let rj = &done[row_start[j] + (lo - fj)..row_start[j] + (j - fj)];
            for (x, y) in ri.iter().zip(rj) {
                acc -= x * y;
            }
            cur[j - fi] = acc / done[row_start[j] + (j - fj)];
        }
        let mut d = cur[i - fi];
        for k in fi..i {
            let l = cur[k - fi];
            d -= l * l;
        }
        if !(d > 0.0) {
            return Err(NotSpdError { row: i });
        }
        cur[i - fi] = d.sqrt();
    }

    Ok(SpdFactor { n, first, row_start, vals })
}

/// Solves `A x = b` given the factor of `A`.
///
/// # Panics
/// Panics when `b.len() != n`.
pub fn spd_solve(factor: &SpdFactor, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    factor.solve_in_place(&mut x);
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csr_from_dense(d: &[&[f64]]) -> CsrMatrix {
        let rows = d.len();
        let cols = d[0].len();
        let mut t = Vec::new();
        for (i, row) in d.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        CsrMatrix::from_triplets(rows, cols, &t)
    }

    /// Plain dense Cholesky, kept deliberately independent of the envelope
    /// code so the two can check each other.
    fn dense_cholesky(d: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let n = d.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = d[i][j];
                for k in 0..j {
                    acc -= l[i][k] * l[j][k];
                }
                if i == j {
                    if acc <= 0.0 {
                        return None;
                    }
                    l[i][j] = acc.sqrt();
                } else {
                    l[i][j] = acc / l[j][j];
                }
            }
        }
        Some(l)
    }

    #[test]
    fn factor_2x2_by_hand() {
        // [[4, 2], [2, 3]] = L L^T with L = [[2, 0], [1, sqrt(2)]].
        let a = csr_from_dense(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = spd_factor(&a).unwrap();
        assert_eq!(f.lower(0, 0), 2.0);
        assert_eq!(f.lower(1, 0), 1.0);
        assert!((f.lower(1, 1) - 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(f.lower(0, 1), 0.0);
    }

    #[test]
    fn solve_2x2_by_hand() {
        let a = csr_from_dense(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = spd_factor(&a).unwrap();
        let x = spd_solve(&f, &[8.0, 7.0]);
        assert!((x[0] - 1.25).abs() < 1e-15);
        assert!((x[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn identity_factor_and_solve() {
        let eye = csr_from_dense(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let f = spd_factor(&eye).unwrap();
        for i in 0..3 {
            assert_eq!(f.lower(i, i), 1.0);
        }
        let b = vec![3.0, -1.0, 0.25];
        assert_eq!(spd_solve(&f, &b), b);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = csr_from_dense(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = spd_factor(&a).unwrap();
        assert_eq!(spd_solve(&f, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_matrix_is_not_spd() {
        let z = CsrMatrix::from_triplets(1, 1, &[(0, 0, 0.0)]);
        let err = spd_factor(&z).unwrap_err();
        assert_eq!(err, NotSpdError { row: 0 });
    }

    #[test]
    fn indefinite_matrix_reports_breakdown_row() {
        let a = csr_from_dense(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let err = spd_factor(&a).unwrap_err();
        assert_eq!(err.row, 1);
    }

    #[test]
    fn matches_dense_cholesky_on_banded_matrix() {
        // Symmetric diagonally dominant pentadiagonal matrix.
        let n = 12;
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = 6.0 + (i as f64) * 0.25;
            if i + 1 < n {
                dense[i][i + 1] = -1.5;
                dense[i + 1][i] = -1.5;
            }
            if i + 2 < n {
                dense[i][i + 2] = 0.5;
                dense[i + 2][i] = 0.5;
            }
        }
        let rows: Vec<&[f64]> = dense.iter().map(|r| r.as_slice()).collect();
        let a = csr_from_dense(&rows);
        let f = spd_factor(&a).unwrap();
        let l = dense_cholesky(&dense).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (f.lower(i, j) - l[i][j]).abs() <= 1e-13,
                    "L[{i}][{j}] envelope {} vs dense {}",
                    f.lower(i, j),
                    l[i][j]
                );
            }
        }
    }

    #[test]
    fn reconstruction_matches_input() {
        // || L L^T - A ||_F <= 1e-12 * ||A||_F on a banded SPD matrix.
        let n = 30;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 5.0 + 0.1 * i as f64));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
            if i + 3 < n {
                t.push((i, i + 3, -0.5));
                t.push((i + 3, i, -0.5));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let f = spd_factor(&a).unwrap();
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut rec = 0.0;
                for k in 0..n {
                    rec += f.lower(i, k) * f.lower(j, k);
                }
                err2 += (rec - a.get(i, j)).powi(2);
                ref2 += a.get(i, j).powi(2);
            }
        }
        assert!(err2.sqrt() <= 1e-12 * ref2.sqrt());
    }

    #[test]
    #[should_panic(expected = "rhs length")]
    fn solve_dimension_mismatch_panics() {
        let a = csr_from_dense(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = spd_factor(&a).unwrap();
        spd_solve(&f, &[1.0]);
    }

    mod random_spd {
        use super::*;
        use proptest::prelude::*;

        /// Diagonally dominant symmetric banded matrix: off-diagonal entries
        /// in [-1, 1], diagonal exceeding the absolute row sum.
        fn banded_spd(n: usize, bw: usize, entries: &[f64]) -> CsrMatrix {
            let mut t = Vec::new();
            let mut row_abs = vec![0.0; n];
            let mut k = 0;
            for i in 0..n {
                for j in (i + 1)..n.min(i + bw + 1) {
                    let v = entries[k % entries.len()];
                    k += 1;
                    if v != 0.0 {
                        t.push((i, j, v));
                        t.push((j, i, v));
                        row_abs[i] += v.abs();
                        row_abs[j] += v.abs();
                    }
                }
            }
            for i in 0..n {
                t.push((i, i, row_abs[i] + 1.0 + 0.01 * i as f64));
            }
            CsrMatrix::from_triplets(n, n, &t)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn solve_residual_is_tiny(
                n in 1usize..=200,
                bw in 1usize..=8,
                entries in proptest::collection::vec(-1.0f64..1.0, 16),
                rhs_seed in -10.0f64..10.0,
            ) {
                let a = banded_spd(n, bw, &entries);
                let f = spd_factor(&a).unwrap();
                let b: Vec<f64> = (0..n).map(|i| rhs_seed + (i as f64 * 0.7).sin()).collect();
                let x = spd_solve(&f, &b);
                let mut r = b.clone();
                a.spmv_sub(&x, &mut r);
                let nb = crate::sparse::norm2(&b);
                let nr = crate::sparse::norm2(&r);
                prop_assert!(nr <= 1e-10 * nb.max(1.0), "relres {} too large", nr / nb.max(1.0));
            }
        }
    }
}
