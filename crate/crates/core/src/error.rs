use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A parameter lies outside the domain where the model is defined.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The damped mode block is (numerically) not diagonalizable: ρ² ≈ 4μ^{1−2α}.
    #[error("resonant mode {mode}: rho^2 = {rho_sq} is within relative distance {distance:e} of 4 mu^(1-2 alpha) = {threshold}")]
    Resonance {
        mode: usize,
        rho_sq: f64,
        threshold: f64,
        distance: f64,
    },

    /// A finite table (enumerated spectrum, tensor quadrature) is too small for the request.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// The adaptive integrator could not reach the end of the interval.
    #[error("integration failed for mode {mode} at t = {t:e}: {reason}")]
    Integration {
        mode: usize,
        t: f64,
        reason: String,
    },

    /// The vector to be steered is not in the range of the Gramian.
    #[error("controllability violated for mode {mode}: relative solve residual {residual:e}")]
    ControllabilityViolation { mode: usize, residual: f64 },

    /// The blow-up exponent of ‖Γ_t𝒱‖ is ≥ 1, so ∫₀¹‖Γ_t𝒱‖dt diverges.
    #[error("integrability violated: rate exponent {exponent} >= 1 ({condition} fails)")]
    Integrability { exponent: f64, condition: String },

    /// The operation has no meaning for this kind of mode block.
    #[error("unsupported for this model: {0}")]
    Unsupported(String),

    /// Input data are unusable (e.g. non-positive norms in a log-log fit).
    #[error("invalid data: {0}")]
    Data(String),

    /// A simulated state became non-finite.
    #[error("non-finite state in path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
