//! The 3D Poisson model problem on a box grid.

use crate::sparse::CsrMatrix;

/// Interior grid of the unit cube for `-Δu = g` with zero Dirichlet
/// boundary values, discretized with the 7-point finite-difference stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Interior nodes along x.
    pub nx: usize,
    /// Interior nodes along y.
    pub ny: usize,
    /// Interior nodes along z.
    pub nz: usize,
    /// Uniform source term.
    pub g: f64,
    /// Mesh step. `1 / (n + 1)` with `n` the longest axis, so cubic grids
    /// discretize the unit cube exactly; stretched test grids (chains) reuse
    /// the same step on every axis.
    pub h: f64,
}

impl GridSpec {
    /// Grid with `nx x ny x nz` interior nodes and source `g`.
    pub fn new(nx: usize, ny: usize, nz: usize, g: f64) -> Self {
        assert!(nx > 0 && ny > 0 && nz > 0, "grid axes must be positive");
        let n = nx.max(ny).max(nz);
        GridSpec { nx, ny, nz, g, h: 1.0 / (n as f64 + 1.0) }
    }

    /// Cubic grid with `n` interior nodes per axis.
    pub fn cube(n: usize, g: f64) -> Self {
        Self::new(n, n, n, g)
    }

    /// Total number of unknowns.
    pub fn n(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of node `(i, j, k)`, x fastest.
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    /// Coordinates `(i, j, k)` of a linear index.
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.n());
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    /// `1 / h^2`, computed from the integer axis length (`(n + 1)^2` with
    /// `n` the longest axis) so the stencil coefficients are exact.
    pub fn inv_h2(&self) -> f64 {
        let l = self.nx.max(self.ny).max(self.nz) as f64 + 1.0;
        l * l
    }

    /// The up-to-six stencil neighbors of a node that fall inside the grid.
    pub fn stencil_neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j, k) = self.coords(idx);
        let mut out = [0usize; 6];
        let mut m = 0;
        if i > 0 {
            out[m] = self.idx(i - 1, j, k);
            m += 1;
        }
        if i + 1 < self.nx {
            out[m] = self.idx(i + 1, j, k);
            m += 1;
        }
        if j > 0 {
            out[m] = self.idx(i, j - 1, k);
            m += 1;
        }
        if j + 1 < self.ny {
            out[m] = self.idx(i, j + 1, k);
            m += 1;
        }
        if k > 0 {
            out[m] = self.idx(i, j, k - 1);
            m += 1;
        }
        if k + 1 < self.nz {
            out[m] = self.idx(i, j, k + 1);
            m += 1;
        }
        out.into_iter().take(m)
    }
}

/// Assembles the 7-point Poisson operator and right-hand side on `grid`.
///
/// Every row has `6 / h^2` on the diagonal and `-1 / h^2` for each in-grid
/// axis neighbor; boundary neighbors are eliminated by the zero Dirichlet
/// condition. The uniform load enters as `b_i = g * h^2`. Both coefficients
/// come from the exact integer `1 / h^2` (see [`GridSpec::inv_h2`]), not
/// from squaring the rounded mesh step.
pub fn assemble_poisson(grid: &GridSpec) -> (CsrMatrix, Vec<f64>) {
    let n = grid.n();
    let inv_h2 = grid.inv_h2();
    let mut triplets = Vec::with_capacity(7 * n);
    for idx in 0..n {
        triplets.push((idx, idx, 6.0 * inv_h2));
        for nb in grid.stencil_neighbors(idx) {
            triplets.push((idx, nb, -inv_h2));
        }
    }
    let a = CsrMatrix::from_triplets(n, n, &triplets);
    let b = vec![grid.g / inv_h2; n];
    (a, b)
}
