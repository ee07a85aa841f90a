//! Gramians, Γ norms, null controls, blow-up rates and trace probes.

mod control;
mod gramian;
mod norms;
mod rates;
mod trace;

pub use control::*;
pub use gramian::*;
pub use norms::*;
pub use rates::*;
pub use trace::*;
