//! Differentiable operations, implemented as methods on [`Tape`](crate::tape::Tape).

mod conv;
pub(crate) mod elementwise;
mod pool;
mod reduce;
mod shape;

pub use shape::inverse_permutation;
