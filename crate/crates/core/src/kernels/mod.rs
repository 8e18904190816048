//! Forward and backward numeric kernels over flat row-major buffers.
//!
//! Kernels are pure functions; the tape layer owns shape validation and
//! gradient routing. Accumulation order inside each output element is fixed,
//! so results are bitwise reproducible for a given build regardless of the
//! rayon thread count (parallel loops only ever split ownership of disjoint
//! output regions).

pub mod bn;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;
