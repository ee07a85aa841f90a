//! Per-mode controllability Gramians Q_{t,n} = ∫₀ᵗ e^{sa}ggᵀe^{saᵀ}ds and the
//! norms built from them.

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{norm2, ModeMatrix, SymFactor, EIGEN_FLOOR};
use crate::ode::{dopri5, OdeOptions};
use crate::operators::{semigroup_block, ModeBlock};

/// Relative tolerance used by [`GramianMethod::default`].
pub const DEFAULT_GRAMIAN_TOL: f64 = 1e-12;

/// Relative solve residual above which Q⁻¹w is rejected.
pub const RANGE_RESIDUAL_TOL: f64 = 1e-6;

/// How damped Gramians are computed. Heat Gramians always use the scalar
/// closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GramianMethod {
    /// Adaptive integration of Q′ = aQ + Qaᵀ + ggᵀ, Q(0) = 0, with the local
    /// error of each entry measured relative to the entry (diagonal) or to
    /// √(Q₁₁Q₂₂) (off-diagonal).
    Lyapunov { tol: f64 },
    /// Double sum over the eigenvalues, Σᵢⱼ uᵢuⱼᵀ(e^{(λᵢ+λⱼ)t} − 1)/(λᵢ+λⱼ),
    /// evaluated with expm1. Accurate once t‖a‖ is of order one; it loses
    /// digits to cancellation for t‖a‖ ≪ 1.
    Spectral,
    /// Lyapunov when t·|λ|_max ≤ 2, spectral otherwise.
    Auto { tol: f64 },
}

impl Default for GramianMethod {
    fn default() -> Self {
        GramianMethod::Auto { tol: DEFAULT_GRAMIAN_TOL }
    }
}

/// Q_{t,n} together with its eigen-factorization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GramianBlock {
    pub index: usize,
    pub t: f64,
    q: ModeMatrix,
    factor: SymFactor,
}

impl GramianBlock {
    pub fn new(index: usize, t: f64, q: ModeMatrix) -> Self {
        let factor = SymFactor::new(&q);
        Self { index, t, q, factor }
    }

    pub fn q(&self) -> &ModeMatrix {
        &self.q
    }

    pub fn factor(&self) -> &SymFactor {
        &self.factor
    }

    /// Part of `w` the floored factorization cannot represent, relative to ‖w‖.
    fn range_residual(&self, w: &Vector2<f64>) -> f64 {
        let wn = norm2(w);
        if wn == 0.0 {
            return 0.0;
        }
        let values = self.factor.values();
        let inv = self.factor.inv_sqrt_apply(w);
        let back = self.factor.sqrt().apply(&inv);
        // components along eigenvalues below the floor are lost by the round trip
        let lost = if values[self.q.dim() - 1] < EIGEN_FLOOR { norm2(&(back - w)) } else { 0.0 };
        lost / wn
    }

    /// Q^{−1/2}w, failing when w has a component outside the range of Q.
    pub fn inv_sqrt_apply(&self, w: &Vector2<f64>) -> Result<Vector2<f64>> {
        let residual = self.range_residual(w);
        if residual > RANGE_RESIDUAL_TOL {
            return Err(Error::ControllabilityViolation {
                mode: self.index,
                residual,
            });
        }
        Ok(self.factor.inv_sqrt_apply(w))
    }

    /// Q⁻¹w with the same range check.
    pub fn solve(&self, w: &Vector2<f64>) -> Result<Vector2<f64>> {
        let residual = self.range_residual(w);
        if residual > RANGE_RESIDUAL_TOL {
            return Err(Error::ControllabilityViolation {
                mode: self.index,
                residual,
            });
        }
        Ok(self.factor.solve(w))
    }
}

/// ½μ^{−(1+2γ)}(1 − e^{−2tμ}), the Gramian of one heat mode.
pub fn heat_gramian(mu: f64, gamma: f64, t: f64) -> f64 {
    -0.5 * mu.powf(-(1.0 + 2.0 * gamma)) * (-2.0 * t * mu).exp_m1()
}

/// Gramian by Lyapunov integration (the default path for single blocks).
pub fn gramian_block(block: &ModeBlock, t: f64, tol: f64) -> Result<GramianBlock> {
    gramian_block_with(block, t, GramianMethod::Lyapunov { tol })
}

pub fn gramian_block_with(block: &ModeBlock, t: f64, method: GramianMethod) -> Result<GramianBlock> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("Gramian horizon must be positive, got {t}")));
    }
    if !block.damped {
        let gamma_pow = block.g[0] * block.g[0];
        let q = -0.5 * gamma_pow / block.mu * (-2.0 * t * block.mu).exp_m1();
        return Ok(GramianBlock::new(block.index, t, ModeMatrix::scalar(q)));
    }
    let q = match method {
        GramianMethod::Lyapunov { tol } => lyapunov(block, t, tol)?,
        GramianMethod::Spectral => spectral(block, t),
        GramianMethod::Auto { tol } => {
            if t * block.spectral_radius() <= 2.0 {
                lyapunov(block, t, tol)?
            } else {
                spectral(block, t)
            }
        }
    };
    Ok(GramianBlock::new(block.index, t, q))
}

/// Lyapunov integration for any block, heat blocks included (used to check
/// the closed forms).
pub fn lyapunov_gramian(block: &ModeBlock, t: f64, tol: f64) -> Result<ModeMatrix> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("Gramian horizon must be positive, got {t}")));
    }
    if block.damped {
        return lyapunov(block, t, tol);
    }
    let a = block.a.get(0, 0);
    let gg = block.g[0] * block.g[0];
    let opts = OdeOptions {
        initial_step: Some(initial_step(t, block.spectral_radius())),
        ..OdeOptions::default()
    };
    let (y, _) = dopri5(
        |_, q: &[f64; 1]| [2.0 * a * q[0] + gg],
        0.0,
        [0.0],
        t,
        &opts,
        |y0, y1| [tol * y0[0].abs().max(y1[0].abs()) + 1e-300],
    )
    .map_err(|e| integration_error(block.index, e))?;
    Ok(ModeMatrix::scalar(y[0]))
}

fn initial_step(t: f64, radius: f64) -> f64 {
    (0.01 / radius.max(1e-300)).min(t * 1e-3).max(t * 1e-12)
}

fn integration_error(mode: usize, e: crate::ode::OdeFailure) -> Error {
    let t = match e {
        crate::ode::OdeFailure::StepUnderflow { t, .. } => t,
        crate::ode::OdeFailure::TooManySteps { t } => t,
        crate::ode::OdeFailure::NonFinite { t } => t,
    };
    Error::Integration {
        mode,
        t,
        reason: e.to_string(),
    }
}

fn lyapunov(block: &ModeBlock, t: f64, tol: f64) -> Result<ModeMatrix> {
    let s = block.a.get(0, 1);
    let r = -block.a.get(1, 1);
    let g2 = block.g[1] * block.g[1];
    // state (Q₁₁, Q₁₂, Q₂₂)
    let rhs = move |_: f64, q: &[f64; 3]| [2.0 * s * q[1], s * q[2] - s * q[0] - r * q[1], -2.0 * s * q[1] - 2.0 * r * q[2] + g2];
    let scale = move |y0: &[f64; 3], y1: &[f64; 3]| {
        let d0 = y0[0].abs().max(y1[0].abs());
        let d2 = y0[2].abs().max(y1[2].abs());
        [tol * d0 + 1e-300, tol * (d0 * d2).sqrt() + 1e-300, tol * d2 + 1e-300]
    };
    let opts = OdeOptions {
        initial_step: Some(initial_step(t, block.spectral_radius())),
        ..OdeOptions::default()
    };
    let (y, _) = dopri5(rhs, 0.0, [0.0; 3], t, &opts, scale).map_err(|e| integration_error(block.index, e))?;
    Ok(ModeMatrix::new(2, Matrix2::new(y[0], y[1], y[1], y[2])))
}

/// (e^{zt} − 1)/z for complex z, exact at z = 0.
fn exp_ratio(z: Complex64, t: f64) -> Complex64 {
    let w = z * t;
    if w.norm() < 1e-8 {
        return Complex64::new(t, 0.0) * (Complex64::new(1.0, 0.0) + w / 2.0);
    }
    complex_expm1(w) / z
}

fn complex_expm1(w: Complex64) -> Complex64 {
    let (sn, cs) = w.im.sin_cos();
    let half = (0.5 * w.im).sin();
    Complex64::new(w.re.exp_m1() * cs - 2.0 * half * half, w.re.exp() * sn)
}

fn spectral(block: &ModeBlock, t: f64) -> ModeMatrix {
    let s = block.a.get(0, 1);
    let g = block.g[1];
    let (lp, lm) = block.eigs;
    // e^{sa}g = Σᵢ e^{λᵢs}uᵢ with uᵢ = g/(λᵢ − λⱼ)·(s, λᵢ)
    let up = [lp * 0.0 + s, lp].map(|c| c * g / (lp - lm));
    let um = [lm * 0.0 + s, lm].map(|c| c * g / (lm - lp));
    let terms = [(lp, up), (lm, um)];
    let mut q = [[Complex64::new(0.0, 0.0); 2]; 2];
    for (li, ui) in &terms {
        for (lj, uj) in &terms {
            let e = exp_ratio(li + lj, t);
            for r in 0..2 {
                for c in 0..2 {
                    q[r][c] += ui[r] * uj[c] * e;
                }
            }
        }
    }
    let off = 0.5 * (q[0][1].re + q[1][0].re);
    ModeMatrix::new(2, Matrix2::new(q[0][0].re, off, off, q[1][1].re))
}

/// ‖Q_{t,n}^{−1/2}e^{ta}v‖ for the block's drift column.
pub fn gamma_v_norm(block: &ModeBlock, gram: &GramianBlock) -> Result<f64> {
    minimal_energy(block, gram, &block.v)
}

/// Minimal L² energy ‖Q_t^{−1/2}e^{ta}h‖ of a control steering h to 0 at
/// time `gram.t`.
pub fn minimal_energy(block: &ModeBlock, gram: &GramianBlock, h: &Vector2<f64>) -> Result<f64> {
    let w = semigroup_block(block, gram.t).apply(h);
    Ok(norm2(&gram.inv_sqrt_apply(&w)?))
}

/// Spectral norm of Q_{t,n}^{−1/2}e^{ta}, the plain Γ operator on one mode.
pub fn gamma_block_norm(block: &ModeBlock, gram: &GramianBlock) -> Result<f64> {
    let e = semigroup_block(block, gram.t);
    if gram.factor().values()[block.dim() - 1] < EIGEN_FLOOR {
        return Err(Error::ControllabilityViolation {
            mode: block.index,
            residual: 1.0,
        });
    }
    Ok(gram.factor().inv_sqrt().mul(&e).spectral_norm())
}
