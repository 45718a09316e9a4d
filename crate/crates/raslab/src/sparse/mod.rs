//! Sparse linear-algebra kernels used by every layer above.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are compressed sparse
//! row ([`CsrMatrix`]); SPD systems are solved through an envelope (skyline)
//! Cholesky factorization ([`SpdFactor`]). Grid-ordered Poisson blocks are
//! already banded, so no fill-reducing ordering is applied.

mod cholesky;
mod csr;
mod vec_ops;

pub use cholesky::{spd_factor, spd_solve, NotSpdError, SpdFactor};
pub use csr::CsrMatrix;
pub use vec_ops::{axpy, dot, norm2};
