//! Particle solver, linearization and adjoint gradient for controlled FBSDEs
//! whose coefficients depend on the law of the solution path.
//!
//! The guide in `book/` walks through the pipeline; its code listings run as
//! doc-tests of this crate.

// `!(x > 0.0)` guards are deliberate: they reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod adjoint;
pub mod coefficients;
pub mod control;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod law;
pub mod noise;
mod pairing;
pub mod regression;
pub mod smp;
pub mod solver;
pub mod variational;

pub use error::{Error, Result};

// One module per chapter, so a failing listing names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/coefficients.md")]
    mod coefficients {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/linearization.md")]
    mod linearization {}
    #[doc = include_str!("../../../book/src/adjoint.md")]
    mod adjoint {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
}
