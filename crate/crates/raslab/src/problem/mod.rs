//! Problem generation: the 3D Poisson model problem, its overlapping box
//! decomposition, per-subdomain extraction, and the aggregation coarse space.
//!
//! The global unknowns live on an `nx x ny x nz` grid of interior nodes of
//! the unit cube with zero Dirichlet boundary values. Subdomains are boxes of
//! owned nodes (a disjoint partition) dilated by `overlap` mesh layers; the
//! owned part of each subdomain defines the Boolean partition-of-unity
//! weights used everywhere above.

mod coarse;
mod decomp;
mod extract;
mod grid;

pub use coarse::{build_coarse, CoarseOperator};
pub use decomp::{build_decomposition, verify_partition_of_unity, Decomposition, HaloList};
pub use extract::{extract_all, extract_subdomain, HaloBlock, SubdomainProblem, SyncBlock};
pub use grid::{assemble_poisson, GridSpec};

use thiserror::Error;

use crate::sparse::{spd_factor, CsrMatrix, NotSpdError, SpdFactor};

/// Configuration problems detected while generating a problem or its
/// decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProblemError {
    /// A grid axis holds fewer nodes than the process grid requires.
    #[error("infeasible decomposition: axis {axis} has {nodes} nodes for {procs} process slabs")]
    InfeasibleProcGrid { axis: usize, nodes: usize, procs: usize },
    /// Grid or process counts of zero.
    #[error("invalid configuration: {0}")]
    Invalid(String),
    /// A subdomain or coarse matrix failed to factorize.
    #[error("factorization failed ({context}): {source}")]
    NotSpd {
        context: String,
        #[source]
        source: NotSpdError,
    },
}

/// Everything a solver run needs: the global system, its decomposition, and
/// the factorized subdomain problems.
#[derive(Debug, Clone)]
pub struct ProblemSet {
    /// Grid the problem was assembled on.
    pub grid: GridSpec,
    /// Global operator.
    pub a: CsrMatrix,
    /// Global right-hand side.
    pub b: Vec<f64>,
    /// Overlapping decomposition with ownership and halo lists.
    pub dec: Decomposition,
    /// Extracted subdomain data, one entry per rank.
    pub subdomains: Vec<SubdomainProblem>,
    /// Cholesky factors of the local matrices `A_i`, one per rank.
    pub factors: Vec<SpdFactor>,
}

impl ProblemSet {
    /// Assembles the global Poisson system, decomposes it, extracts and
    /// factorizes every subdomain.
    pub fn build(grid: GridSpec, proc_grid: [usize; 3], overlap: usize) -> Result<Self, ProblemError> {
        let (a, b) = assemble_poisson(&grid);
        let dec = build_decomposition(&grid, proc_grid, overlap)?;
        let mut subdomains = Vec::with_capacity(dec.p);
        let mut factors = Vec::with_capacity(dec.p);
        for i in 0..dec.p {
            let sub = extract_subdomain(&a, &b, &dec, i);
            let f = spd_factor(&sub.a_local).map_err(|source| ProblemError::NotSpd {
                context: format!("subdomain {i}"),
                source,
            })?;
            subdomains.push(sub);
            factors.push(f);
        }
        Ok(ProblemSet { grid, a, b, dec, subdomains, factors })
    }

    /// Number of subdomains.
    pub fn p(&self) -> usize {
        self.dec.p
    }

    /// Number of global unknowns.
    pub fn n(&self) -> usize {
        self.b.len()
    }
}
