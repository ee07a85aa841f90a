// `!(x > 0.0)` is the idiom for rejecting NaN along with nonpositive values;
// block-matrix loops index several arrays by the same coordinate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod controllability;
pub mod drift;
pub mod error;
pub mod kolmogorov;
pub mod linalg;
pub mod ode;
pub mod operators;
pub mod quad;
pub mod sde_sim;
pub mod semigroup;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/spectra.md")]
    mod spectra {}
    #[doc = include_str!("../../../book/src/controllability.md")]
    mod controllability {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/kolmogorov.md")]
    mod kolmogorov {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
