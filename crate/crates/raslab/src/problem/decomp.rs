//! Overlapping box decomposition of the grid.
//!
//! Each rank owns a box of nodes (near-equal contiguous slabs per axis, any
//! remainder going to the lowest-indexed slabs); the disjoint owned boxes
//! form the Boolean partition of unity. A rank's subdomain is its owned box
//! dilated by `overlap` mesh layers, clipped at the grid boundary.
//!
//! Two kinds of exchange lists are derived:
//!
//! * [`Decomposition::halo`] — the *interface* lists: the stencil ring just
//!   outside the subdomain, grouped by owner. These are exactly the columns
//!   of the coupling matrix `C_i` and drive the regular solution exchange.
//! * [`Decomposition::overlap_sync`] — the *consistency* lists: the non-owned
//!   nodes inside the subdomain (`indices[i] ∩ owned(j)`), refreshed from
//!   their owners whenever a globally consistent local copy is required
//!   (synchronous sweeps and the snapshot exchange of the accurate
//!   asynchronous scheme).

use std::collections::{BTreeMap, BTreeSet};

use super::{GridSpec, ProblemError};

/// Exchange lists between one rank and one neighbor. Indices are global and
/// sorted; `send` holds nodes owned by this rank that the neighbor reads,
/// `recv` holds nodes owned by the neighbor that this rank reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaloList {
    /// The peer rank.
    pub neighbor: usize,
    /// Globally indexed nodes this rank sends (all owned by this rank).
    pub send: Vec<usize>,
    /// Globally indexed nodes this rank receives (all owned by `neighbor`).
    pub recv: Vec<usize>,
}

/// Overlapping decomposition of a grid into `p` box subdomains.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Number of subdomains.
    pub p: usize,
    /// Process box per axis.
    pub proc_grid: [usize; 3],
    /// Overlap width in mesh layers.
    pub overlap: usize,
    /// Total number of global unknowns.
    pub n: usize,
    /// Sorted global indices of each subdomain (owned box dilated by
    /// `overlap`, clipped at the boundary).
    pub indices: Vec<Vec<usize>>,
    /// Sorted global indices owned by each rank (disjoint partition).
    pub owned: Vec<Vec<usize>>,
    /// Owner rank of every global index.
    pub owner: Vec<usize>,
    /// Sorted neighbor ranks of each rank.
    pub neighbors: Vec<Vec<usize>>,
    /// Interface exchange lists per rank, aligned with `neighbors`.
    pub halo: Vec<Vec<HaloList>>,
    /// Overlap-consistency exchange lists per rank, aligned with `neighbors`.
    pub overlap_sync: Vec<Vec<HaloList>>,
}

/// Near-equal split of `n` nodes into `parts` contiguous slabs; the first
/// `n % parts` slabs take the extra node. Returns inclusive `(lo, hi)` pairs.
fn slabs(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let rem = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut lo = 0;
    for s in 0..parts {
        let w = base + usize::from(s < rem);
        out.push((lo, lo + w - 1));
        lo += w;
    }
    out
}

/// Builds the overlapping decomposition of `grid` over a `proc_grid` box of
/// ranks (rank id `cx + px * (cy + py * cz)`).
pub fn build_decomposition(
    grid: &GridSpec,
    proc_grid: [usize; 3],
    overlap: usize,
) -> Result<Decomposition, ProblemError> {
    let [px, py, pz] = proc_grid;
    if px == 0 || py == 0 || pz == 0 {
        return Err(ProblemError::Invalid("process grid axes must be positive".into()));
    }
    if overlap == 0 {
        // With at least one overlap layer, rows of owned nodes never reach
        // outside their subdomain; the restricted solvers rely on this.
        return Err(ProblemError::Invalid("overlap must be at least 1".into()));
    }
    let dims = [grid.nx, grid.ny, grid.nz];
    for (axis, (&nodes, &procs)) in dims.iter().zip(proc_grid.iter()).enumerate() {
        if nodes < procs {
            return Err(ProblemError::InfeasibleProcGrid { axis, nodes, procs });
        }
    }
    let p = px * py * pz;
    let n = grid.n();
    let sx = slabs(grid.nx, px);
    let sy = slabs(grid.ny, py);
    let sz = slabs(grid.nz, pz);

    // Owned boxes and the global ownership map.
    let mut owner = vec![usize::MAX; n];
    let mut owned = vec![Vec::new(); p];
    let mut owned_box = vec![[(0usize, 0usize); 3]; p];
    for cz in 0..pz {
        for cy in 0..py {
            for cx in 0..px {
                let r = cx + px * (cy + py * cz);
                owned_box[r] = [sx[cx], sy[cy], sz[cz]];
                for k in sz[cz].0..=sz[cz].1 {
                    for j in sy[cy].0..=sy[cy].1 {
                        for i in sx[cx].0..=sx[cx].1 {
                            let g = grid.idx(i, j, k);
                            owner[g] = r;
                            owned[r].push(g);
                        }
                    }
                }
                owned[r].sort_unstable();
            }
        }
    }

    // Subdomain index sets: dilated clipped boxes, enumerated in ascending
    // global order.
    let mut indices = vec![Vec::new(); p];
    let mut sub_box = vec![[(0usize, 0usize); 3]; p];
    for r in 0..p {
        let b = owned_box[r];
        let lo = |v: usize| v.saturating_sub(overlap);
        let hi = |v: usize, n: usize| (v + overlap).min(n - 1);
        let bx = (lo(b[0].0), hi(b[0].1, grid.nx));
        let by = (lo(b[1].0), hi(b[1].1, grid.ny));
        let bz = (lo(b[2].0), hi(b[2].1, grid.nz));
        sub_box[r] = [bx, by, bz];
        for k in bz.0..=bz.1 {
            for j in by.0..=by.1 {
                for i in bx.0..=bx.1 {
                    indices[r].push(grid.idx(i, j, k));
                }
            }
        }
    }

    let inside = |r: usize, g: usize| -> bool {
        let (i, j, k) = grid.coords(g);
        let [bx, by, bz] = sub_box[r];
        i >= bx.0 && i <= bx.1 && j >= by.0 && j <= by.1 && k >= bz.0 && k <= bz.1
    };

    // Receive lists. Interface: stencil ring outside the subdomain box,
    // grouped by owner. Consistency: non-owned nodes inside the box, grouped
    // by owner.
    let mut halo_recv: Vec<BTreeMap<usize, BTreeSet<usize>>> = vec![BTreeMap::new(); p];
    let mut sync_recv: Vec<BTreeMap<usize, BTreeSet<usize>>> = vec![BTreeMap::new(); p];
    for r in 0..p {
        for &g in &indices[r] {
            if owner[g] != r {
                sync_recv[r].entry(owner[g]).or_default().insert(g);
            }
            for nb in grid.stencil_neighbors(g) {
                if !inside(r, nb) {
                    debug_assert_ne!(owner[nb], r, "ring node owned by the rank itself");
                    halo_recv[r].entry(owner[nb]).or_default().insert(nb);
                }
            }
        }
    }

    // Neighbors: any rank appearing in either receive map, symmetrized.
    let mut neighbor_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); p];
    for r in 0..p {
        for &j in halo_recv[r].keys().chain(sync_recv[r].keys()) {
            neighbor_sets[r].insert(j);
            neighbor_sets[j].insert(r);
        }
    }

    // Send lists mirror the peer's receive lists.
    let make_lists = |recv: &[BTreeMap<usize, BTreeSet<usize>>]| -> Vec<Vec<HaloList>> {
        (0..p)
            .map(|r| {
                neighbor_sets[r]
                    .iter()
                    .map(|&j| HaloList {
                        neighbor: j,
                        send: recv[j].get(&r).map(|s| s.iter().copied().collect()).unwrap_or_default(),
                        recv: recv[r].get(&j).map(|s| s.iter().copied().collect()).unwrap_or_default(),
                    })
                    .collect()
            })
            .collect()
    };
    let halo = make_lists(&halo_recv);
    let overlap_sync = make_lists(&sync_recv);
    let neighbors = neighbor_sets.into_iter().map(|s| s.into_iter().collect()).collect();

    Ok(Decomposition { p, proc_grid, overlap, n, indices, owned, owner, neighbors, halo, overlap_sync })
}

/// Checks the Boolean partition of unity: every global index is owned by
/// exactly one rank, the owner's subdomain contains it, and the ownership
/// map agrees with the per-rank owned lists.
pub fn verify_partition_of_unity(dec: &Decomposition) -> bool {
    let mut claims = vec![0usize; dec.n];
    for (r, owned) in dec.owned.iter().enumerate() {
        for &g in owned {
            if g >= dec.n || dec.owner[g] != r {
                return false;
            }
            claims[g] += 1;
            // Owned nodes must lie inside the rank's own subdomain.
            if dec.indices[r].binary_search(&g).is_err() {
                return false;
            }
        }
    }
    claims.iter().all(|&c| c == 1)
}
