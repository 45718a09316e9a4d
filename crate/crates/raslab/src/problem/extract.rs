//! Per-subdomain extraction of the global system.
//!
//! For rank `i` with index set `V_i`, the local operator splits the global
//! rows of `V_i` into `A_i` (columns inside `V_i`) and the coupling block
//! `C_i` (columns on the stencil ring outside `V_i`). The residual a rank
//! iterates on is `r_i = b_i - A_i x_i - C_i x_halo`, with `x_halo` laid out
//! exactly like the interface receive lists of the decomposition.

use std::collections::HashMap;

use crate::sparse::CsrMatrix;

use super::{Decomposition, GridSpec, ProblemError};

/// Interface exchange layout of one neighbor, in local coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaloBlock {
    /// Peer rank.
    pub neighbor: usize,
    /// Local slots whose values this rank sends to the peer.
    pub send_slots: Vec<usize>,
    /// Offset of the peer's block inside the halo vector.
    pub recv_offset: usize,
    /// Number of halo values received from the peer.
    pub recv_len: usize,
}

/// Overlap-consistency exchange layout of one neighbor, in local
/// coordinates. Received values overwrite local slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncBlock {
    /// Peer rank.
    pub neighbor: usize,
    /// Local slots whose values this rank sends to the peer.
    pub send_slots: Vec<usize>,
    /// Local slots overwritten by the values received from the peer.
    pub recv_slots: Vec<usize>,
}

/// One rank's share of the global problem.
#[derive(Debug, Clone)]
pub struct SubdomainProblem {
    /// Rank id inside the decomposition.
    pub rank: usize,
    /// Global index of every local slot (sorted).
    pub indices: Vec<usize>,
    /// Local operator `A_i` over the subdomain.
    pub a_local: CsrMatrix,
    /// Coupling block `C_i`: local rows by halo columns.
    pub coupling: CsrMatrix,
    /// Local right-hand side.
    pub b_local: Vec<f64>,
    /// Partition-of-unity mask: true on slots owned by this rank.
    pub owned_mask: Vec<bool>,
    /// Local slots owned by this rank (ascending).
    pub owned_slots: Vec<usize>,
    /// Interface exchange layout, one block per neighbor; the blocks tile
    /// the halo vector in order.
    pub halo_blocks: Vec<HaloBlock>,
    /// Overlap-consistency exchange layout, one block per neighbor.
    pub sync_blocks: Vec<SyncBlock>,
}

impl SubdomainProblem {
    /// Number of local unknowns.
    pub fn n_local(&self) -> usize {
        self.indices.len()
    }

    /// Number of halo (interface) values.
    pub fn n_halo(&self) -> usize {
        self.coupling.cols()
    }

    /// Masked residual energy `r^T B_i r`: the sum of squares over owned
    /// slots, each rank's share of the global `||r||^2`.
    pub fn owned_energy(&self, r: &[f64]) -> f64 {
        self.owned_slots.iter().map(|&s| r[s] * r[s]).sum()
    }

    /// Masked sum over owned slots: this rank's entry of the aggregated
    /// coarse residual.
    pub fn owned_sum(&self, r: &[f64]) -> f64 {
        self.owned_slots.iter().map(|&s| r[s]).sum()
    }
}

/// Extracts rank `id`'s subdomain problem from the assembled global system.
///
/// # Panics
/// Panics when `id` is out of range, when dimensions disagree with the
/// decomposition, or when a coupled column is missing from the interface
/// lists (which would indicate a corrupted decomposition).
pub fn extract_subdomain(a: &CsrMatrix, b: &[f64], dec: &Decomposition, id: usize) -> SubdomainProblem {
    assert!(id < dec.p, "subdomain id {id} out of range (p = {})", dec.p);
    assert_eq!(a.rows(), dec.n, "matrix size does not match the decomposition");
    assert_eq!(b.len(), dec.n, "rhs size does not match the decomposition");

    let indices = dec.indices[id].clone();
    let g2l: HashMap<usize, usize> = indices.iter().enumerate().map(|(l, &g)| (g, l)).collect();

    // Halo layout: neighbor blocks in list order tile the halo vector.
    let mut halo_col: HashMap<usize, usize> = HashMap::new();
    let mut halo_blocks = Vec::with_capacity(dec.halo[id].len());
    let mut offset = 0;
    for hl in &dec.halo[id] {
        for (k, &g) in hl.recv.iter().enumerate() {
            halo_col.insert(g, offset + k);
        }
        halo_blocks.push(HaloBlock {
            neighbor: hl.neighbor,
            send_slots: hl.send.iter().map(|g| g2l[g]).collect(),
            recv_offset: offset,
            recv_len: hl.recv.len(),
        });
        offset += hl.recv.len();
    }
    let n_halo = offset;

    let sync_blocks = dec.overlap_sync[id]
        .iter()
        .map(|sl| SyncBlock {
            neighbor: sl.neighbor,
            send_slots: sl.send.iter().map(|g| g2l[g]).collect(),
            recv_slots: sl.recv.iter().map(|g| g2l[g]).collect(),
        })
        .collect();

    let n_local = indices.len();
    let mut a_trip = Vec::new();
    let mut c_trip = Vec::new();
    for (row, &g) in indices.iter().enumerate() {
        for (col, v) in a.row(g) {
            if let Some(&l) = g2l.get(&col) {
                a_trip.push((row, l, v));
            } else {
                let hc = *halo_col
                    .get(&col)
                    .unwrap_or_else(|| panic!("column {col} of row {g} missing from the interface lists"));
                c_trip.push((row, hc, v));
            }
        }
    }
    let a_local = CsrMatrix::from_triplets(n_local, n_local, &a_trip);
    let coupling = CsrMatrix::from_triplets(n_local, n_halo, &c_trip);

    let owned_mask: Vec<bool> = indices.iter().map(|&g| dec.owner[g] == id).collect();
    let owned_slots = owned_mask
        .iter()
        .enumerate()
        .filter_map(|(s, &m)| m.then_some(s))
        .collect();
    let b_local = indices.iter().map(|&g| b[g]).collect();

    SubdomainProblem {
        rank: id,
        indices,
        a_local,
        coupling,
        b_local,
        owned_mask,
        owned_slots,
        halo_blocks,
        sync_blocks,
    }
}

/// Convenience wrapper: assembles the Poisson system and extracts every
/// subdomain of a fresh decomposition.
pub fn extract_all(
    grid: &GridSpec,
    proc_grid: [usize; 3],
    overlap: usize,
) -> Result<(CsrMatrix, Vec<f64>, Decomposition, Vec<SubdomainProblem>), ProblemError> {
    let (a, b) = super::assemble_poisson(grid);
    let dec = super::build_decomposition(grid, proc_grid, overlap)?;
    let subs = (0..dec.p).map(|i| extract_subdomain(&a, &b, &dec, i)).collect();
    Ok((a, b, dec, subs))
}
