//! Aggregation coarse space with one unknown per rank.
//!
//! The restriction sums a vector over each rank's owned nodes (Boolean
//! weights, so restriction and the partition-of-unity mask coincide), and
//! the coarse operator is the Galerkin product of the global matrix with
//! that restriction: `(A_0)_{qr}` sums the entries `A_{gj}` whose row is
//! owned by `q` and whose column is owned by `r`. Prolongation copies each
//! rank's coarse value to all nodes it owns.

use crate::sparse::{spd_factor, spd_solve, CsrMatrix, SpdFactor};

use super::ProblemError;

/// Factorized coarse-space operator.
#[derive(Debug, Clone)]
pub struct CoarseOperator {
    /// Number of coarse unknowns (= number of ranks).
    pub p: usize,
    /// Galerkin coarse matrix, `p` by `p`.
    pub a0: CsrMatrix,
    /// Its Cholesky factor.
    factor: SpdFactor,
}

impl CoarseOperator {
    /// Solves `A_0 x_0 = r_0`.
    pub fn solve(&self, r0: &[f64]) -> Vec<f64> {
        spd_solve(&self.factor, r0)
    }
}

/// Builds the aggregated coarse operator from the global matrix and the
/// node-to-rank ownership map.
pub fn build_coarse(a: &CsrMatrix, owner: &[usize], p: usize) -> Result<CoarseOperator, ProblemError> {
    assert_eq!(a.rows(), owner.len(), "ownership map does not match the matrix");
    let mut dense = vec![0.0; p * p];
    for g in 0..a.rows() {
        let q = owner[g];
        assert!(q < p, "owner {q} of node {g} out of range");
        for (col, v) in a.row(g) {
            let r = owner[col];
            dense[q * p + r] += v;
        }
    }
    let mut trip = Vec::new();
    for q in 0..p {
        for r in 0..p {
            let v = dense[q * p + r];
            if v != 0.0 {
                trip.push((q, r, v));
            }
        }
    }
    let a0 = CsrMatrix::from_triplets(p, p, &trip);
    let factor = spd_factor(&a0).map_err(|source| ProblemError::NotSpd {
        context: "coarse operator".to_string(),
        source,
    })?;
    Ok(CoarseOperator { p, a0, factor })
}
