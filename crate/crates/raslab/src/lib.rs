//! Workbench for restricted additive Schwarz (RAS) iterations on the 3D
//! Poisson problem, with synchronous and asynchronous execution and an
//! aggregation coarse space.
//!
//! The crate is organized in four layers:
//!
//! * [`sparse`] — CSR storage, dense-free vector kernels, and an envelope
//!   (skyline) Cholesky factorization for the SPD local and coarse matrices.
//! * [`problem`] — assembly of the 7-point Poisson operator, the overlapping
//!   box decomposition with partition-of-unity ownership, per-subdomain
//!   extraction (`A_i`, coupling `C_i`), and the aggregation coarse operator.
//! * [`runtime`] — a deterministic simulated message-passing layer: ranks are
//!   sequential workers driven by a tick scheduler, with non-blocking halo
//!   exchange and collectives, seeded per-message delivery delays, and
//!   request/test semantics.
//! * [`solvers`] — the five iteration variants (synchronous and asynchronous,
//!   one- and two-level, plus the accurate snapshot-based two-level scheme
//!   with a bounded number of corrected updates per coarse solution).

pub mod problem;
pub mod runtime;
pub mod solvers;
pub mod sparse;
