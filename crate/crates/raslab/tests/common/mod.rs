//! Dense reference implementations used by the acceptance tests.
//!
//! Everything here is deliberately independent of the library's sparse
//! kernels: matrices are dense row-major, systems are solved by textbook
//! LU with partial pivoting, and the Schwarz operators are built straight
//! from the decomposition's index sets and the assembled global matrix.

use raslab::problem::ProblemSet;
use raslab::sparse::CsrMatrix;

/// Dense row-major square matrix.
pub struct Dense {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Dense {
    pub fn from_csr(m: &CsrMatrix) -> Dense {
        let n = m.rows();
        assert_eq!(n, m.cols());
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            for (c, v) in m.row(r) {
                a[r * n + c] = v;
            }
        }
        Dense { n, a }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.n + c]
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|r| self.a[r * self.n..(r + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Principal submatrix on the given (global) index set.
    pub fn submatrix(&self, idx: &[usize]) -> Dense {
        let k = idx.len();
        let mut a = vec![0.0; k * k];
        for (r, &gr) in idx.iter().enumerate() {
            for (c, &gc) in idx.iter().enumerate() {
                a[r * k + c] = self.get(gr, gc);
            }
        }
        Dense { n: k, a }
    }
}

/// LU factorization with partial pivoting.
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

pub fn lu_factor(m: Dense) -> Lu {
    let n = m.n;
    let mut a = m.a;
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pk = k;
        for i in k + 1..n {
            if a[i * n + k].abs() > a[pk * n + k].abs() {
                pk = i;
            }
        }
        assert!(a[pk * n + k] != 0.0, "singular matrix in the dense oracle");
        if pk != k {
            piv.swap(k, pk);
            for j in 0..n {
                a.swap(k * n + j, pk * n + j);
            }
        }
        let d = a[k * n + k];
        for i in k + 1..n {
            let m = a[i * n + k] / d;
            a[i * n + k] = m;
            for j in k + 1..n {
                a[i * n + j] -= m * a[k * n + j];
            }
        }
    }
    Lu { n, lu: a, piv }
}

impl Lu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = self.piv.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * y[j];
            }
            y[i] = s / self.lu[i * n + i];
        }
        y
    }
}

/// Dense restricted Schwarz operator: apply() computes
/// `sum_i R~_i^T A_i^{-1} R_i r` with Boolean owned weights, where every
/// `A_i` is a dense principal submatrix of the global matrix factored by
/// the LU above.
pub struct RasOracle {
    n: usize,
    /// Per rank: subdomain index set and the dense factor of its block.
    subs: Vec<(Vec<usize>, Lu)>,
    owner: Vec<usize>,
}

pub fn ras_oracle(ps: &ProblemSet, ad: &Dense) -> RasOracle {
    let subs = ps
        .dec
        .indices
        .iter()
        .map(|idx| (idx.clone(), lu_factor(ad.submatrix(idx))))
        .collect();
    RasOracle { n: ps.n(), subs, owner: ps.dec.owner.clone() }
}

impl RasOracle {
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (rank, (idx, lu)) in self.subs.iter().enumerate() {
            let ri: Vec<f64> = idx.iter().map(|&g| r[g]).collect();
            let di = lu.solve(&ri);
            for (slot, &g) in idx.iter().enumerate() {
                if self.owner[g] == rank {
                    out[g] = di[slot];
                }
            }
        }
        out
    }
}

/// Dense aggregation coarse level: `apply()` computes
/// `R_0^T A_0^{-1} R_0 r` where `A_0` is the dense triple product
/// `R_0 A R_0^T` over the Boolean ownership aggregates.
pub struct CoarseOracle {
    pub p: usize,
    /// Row-major dense `A_0`, kept for direct entry comparisons.
    pub a0: Vec<f64>,
    lu: Lu,
    owner: Vec<usize>,
}

pub fn coarse_oracle(ps: &ProblemSet, ad: &Dense) -> CoarseOracle {
    let p = ps.p();
    let n = ps.n();
    let owner = ps.dec.owner.clone();
    // t = A R_0^T (n x p), then A_0 = R_0 t (p x p).
    let mut t = vec![0.0; n * p];
    for g in 0..n {
        for j in 0..n {
            t[g * p + owner[j]] += ad.get(g, j);
        }
    }
    let mut a0 = vec![0.0; p * p];
    for g in 0..n {
        let q = owner[g];
        for r in 0..p {
            a0[q * p + r] += t[g * p + r];
        }
    }
    let lu = lu_factor(Dense { n: p, a: a0.clone() });
    CoarseOracle { p, a0, lu, owner }
}

impl CoarseOracle {
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut r0 = vec![0.0; self.p];
        for (g, &q) in self.owner.iter().enumerate() {
            r0[q] += r[g];
        }
        let z = self.lu.solve(&r0);
        self.owner.iter().map(|&q| z[q]).collect()
    }
}

/// Iterates of the dense one-level Richardson reference
/// `x <- x + M (b - A x)` from `x = 0`, recorded after every sweep.
pub fn dense_one_level_iterates(ps: &ProblemSet, sweeps: usize) -> Vec<Vec<f64>> {
    let ad = Dense::from_csr(&ps.a);
    let m = ras_oracle(ps, &ad);
    let mut x = vec![0.0; ps.n()];
    let mut out = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        let ax = ad.mul(&x);
        let r: Vec<f64> = ps.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = m.apply(&r);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        out.push(x.clone());
    }
    out
}

/// Iterates of the dense two-level reference
/// `x <- x + 1/2 (M + R_0^T A_0^{-1} R_0)(b - A x)` from `x = 0`.
pub fn dense_two_level_iterates(ps: &ProblemSet, sweeps: usize) -> Vec<Vec<f64>> {
    let ad = Dense::from_csr(&ps.a);
    let m = ras_oracle(ps, &ad);
    let c = coarse_oracle(ps, &ad);
    let mut x = vec![0.0; ps.n()];
    let mut out = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        let ax = ad.mul(&x);
        let r: Vec<f64> = ps.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = m.apply(&r);
        let cx = c.apply(&r);
        for ((xi, d), z) in x.iter_mut().zip(&dx).zip(&cx) {
            *xi += 0.5 * (d + z);
        }
        out.push(x.clone());
    }
    out
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest componentwise deviation between two equal-length vectors.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Median of a sample (midpoint of the two central order statistics).
pub fn median(sample: &[u64]) -> f64 {
    assert!(!sample.is_empty());
    let mut s = sample.to_vec();
    s.sort_unstable();
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m] as f64
    } else {
        (s[m - 1] as f64 + s[m] as f64) / 2.0
    }
}
