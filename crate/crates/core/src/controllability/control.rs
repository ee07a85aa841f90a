//! The explicit null control u(τ) = K₁ψ_t(τ) + K₂ψ_t′(τ) with
//! ψ_t(τ) = −φ_t(τ)e^{τa}h and φ_t(τ) = c̄_m τ^m(t−τ).
//!
//! [g, ag] is invertible on every damped mode, so any 2-vector w can be
//! written as g·(K₁w) + ag·(K₂w). Integrating the ag part by parts (φ_t
//! vanishes at both ends) turns the control into one whose mild solution is
//! Y(t) = (1 − ∫₀ᵗφ_t)e^{ta}h, and c̄_m = (m+1)(m+2)/t^{m+2} makes that zero.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::ode::{dopri5, OdeOptions};
use crate::operators::{build_mode_block, semigroup_block, Dynamics, ModeBlock, SpectrumModel};
use crate::quad::adaptive_gk;

/// Minimum number of stored samples of a profile.
pub const MIN_SAMPLES: usize = 512;
const MAX_SAMPLES: usize = 1 << 16;

/// c̄_m with ∫₀ᵗ c̄_m τ^m(t−τ)dτ = 1.
pub fn normalizing_constant(m: u32, t: f64) -> f64 {
    let m = m as f64;
    (m + 1.0) * (m + 2.0) / t.powf(m + 2.0)
}

/// Smallest m ≥ 1 with m − 2(γ−β)/α > −1 (α ≤ ½) or m − 2(γ−β)/(1−α) > −1
/// (α ≥ ½); 1 for heat modes.
pub fn smoothing_order(dynamics: &Dynamics) -> u32 {
    match dynamics {
        Dynamics::Heat(_) => 1,
        Dynamics::Damped(p) => {
            let need = 2.0 * (p.gamma - p.beta) / p.rate_denominator() - 1.0;
            let mut m = 1u32;
            while (m as f64) <= need {
                m += 1;
            }
            m
        }
    }
}

fn check_order(dynamics: &Dynamics, m: u32) -> Result<()> {
    if m == 0 {
        return Err(Error::Parameter("smoothing order m must be >= 1".into()));
    }
    if let Dynamics::Damped(p) = dynamics {
        let lhs = m as f64 - 2.0 * (p.gamma - p.beta) / p.rate_denominator();
        if lhs <= -1.0 {
            return Err(Error::Parameter(format!(
                "smoothing order m = {m} violates m - 2(gamma-beta)/{} > -1",
                if p.rate_denominator() == p.alpha { "alpha" } else { "(1-alpha)" }
            )));
        }
    }
    Ok(())
}

/// A scalar control for one mode, evaluable exactly at any τ ∈ [0, t].
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProfile {
    pub t: f64,
    pub m: u32,
    pub cbar: f64,
    /// (τ, u(τ)) on a Chebyshev-clustered grid.
    pub samples: Vec<(f64, f64)>,
    /// ∫₀ᵗ u(τ)²dτ.
    pub energy_sq: f64,
    block: ModeBlock,
    h: Vector2<f64>,
    k1: Vector2<f64>,
    k2: Vector2<f64>,
    scale: f64,
}

impl ControlProfile {
    /// φ_t(τ).
    pub fn phi(&self, tau: f64) -> f64 {
        self.cbar * tau.powi(self.m as i32) * (self.t - tau)
    }

    fn phi_prime(&self, tau: f64) -> f64 {
        let m = self.m as i32;
        let lead = if m == 1 { 1.0 } else { tau.powi(m - 1) };
        self.cbar * (self.m as f64 * lead * (self.t - tau) - tau.powi(m))
    }

    /// u(τ), evaluated from the closed-form semigroup.
    pub fn eval(&self, tau: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        let w = semigroup_block(&self.block, tau).apply(&self.h);
        let aw = self.block.a.apply(&w);
        let phi = self.phi(tau);
        let dphi = self.phi_prime(tau);
        self.scale * (-phi * self.k1.dot(&w) - self.k2.dot(&(w * dphi + aw * phi)))
    }

    /// The same control multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ControlProfile {
        let mut out = self.clone();
        out.scale *= c;
        out.samples.iter_mut().for_each(|s| s.1 *= c);
        out.energy_sq *= c * c;
        out
    }

    /// u ≡ 0 on [0, t] for the given block.
    pub fn zero(block: &ModeBlock, t: f64) -> ControlProfile {
        ControlProfile {
            t,
            m: 1,
            cbar: normalizing_constant(1, t),
            samples: chebyshev_grid(t, MIN_SAMPLES).into_iter().map(|x| (x, 0.0)).collect(),
            energy_sq: 0.0,
            block: *block,
            h: Vector2::zeros(),
            k1: Vector2::zeros(),
            k2: Vector2::zeros(),
            scale: 0.0,
        }
    }

    pub fn block(&self) -> &ModeBlock {
        &self.block
    }

    /// The state the control was built to steer.
    pub fn target(&self) -> Vector2<f64> {
        self.h
    }
}

fn chebyshev_grid(t: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let x = 0.5 * t * (1.0 - (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos());
            x.clamp(0.0, t)
        })
        .collect()
}

/// Explicit control steering h = v·v_col to zero at time t, with the
/// smoothing order from [`smoothing_order`].
pub fn explicit_control(block: &ModeBlock, t: f64, v: f64, dynamics: &Dynamics) -> Result<ControlProfile> {
    explicit_control_with_order(block, t, v, dynamics, smoothing_order(dynamics))
}

pub fn explicit_control_with_order(block: &ModeBlock, t: f64, v: f64, dynamics: &Dynamics, m: u32) -> Result<ControlProfile> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("control horizon must be positive, got {t}")));
    }
    check_order(dynamics, m)?;
    let h = block.v * v;
    let (k1, k2) = if block.damped {
        // [g, ag]⁻¹ = μ^γ [[ρμ^{α−½}, 1], [μ^{−½}, 0]]
        let g = block.g[1];
        let s = block.a.get(0, 1);
        let r = -block.a.get(1, 1);
        (Vector2::new(r / (s * g), 1.0 / g), Vector2::new(1.0 / (s * g), 0.0))
    } else {
        (Vector2::new(1.0 / block.g[0], 0.0), Vector2::zeros())
    };
    let mut profile = ControlProfile {
        t,
        m,
        cbar: normalizing_constant(m, t),
        samples: Vec::new(),
        energy_sq: 0.0,
        block: *block,
        h,
        k1,
        k2,
        scale: 1.0,
    };
    let stiffness = t * block.spectral_radius();
    let n = ((8.0 * stiffness).ceil() as usize).clamp(MIN_SAMPLES, MAX_SAMPLES);
    profile.samples = chebyshev_grid(t, n).into_iter().map(|x| (x, profile.eval(x))).collect();
    profile.energy_sq = energy_sq(&profile);
    Ok(profile)
}

fn energy_sq(profile: &ControlProfile) -> f64 {
    if profile.scale == 0.0 {
        return 0.0;
    }
    adaptive_gk(
        |tau| {
            let u = profile.eval(tau);
            u * u
        },
        0.0,
        profile.t,
        0.0,
        1e-12,
        4000,
    )
    .value
}

/// ‖u‖_{L²(0,t)}.
pub fn control_energy(profile: &ControlProfile) -> f64 {
    profile.energy_sq.sqrt()
}

/// Terminal state of Ẏ = aY + gu, Y(0) = h.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteerResult {
    pub terminal: Vector2<f64>,
    /// ‖Y(t)‖/‖h‖ (‖Y(t)‖ when h = 0).
    pub relative_residual: f64,
}

/// Integrates the controlled mode ODE with the exact control values.
pub fn steer(block: &ModeBlock, profile: &ControlProfile, h: &Vector2<f64>) -> Result<SteerResult> {
    let t = profile.t;
    let a = *block.a.raw();
    let g = block.g;
    let hn = norm2(h);
    let atol = 1e-13 * if hn > 0.0 { hn } else { 1.0 };
    let opts = OdeOptions {
        initial_step: Some((0.01 / block.spectral_radius()).min(t * 1e-3)),
        max_step_fraction: 0.01,
        ..OdeOptions::default()
    };
    let (y, _) = dopri5(
        |tau, y: &[f64; 2]| {
            let yv = Vector2::new(y[0], y[1]);
            let d = a * yv + g * profile.eval(tau);
            [d[0], d[1]]
        },
        0.0,
        [h[0], h[1]],
        t,
        &opts,
        |_, _| [atol; 2],
    )
    .map_err(|e| Error::Integration {
        mode: block.index,
        t,
        reason: e.to_string(),
    })?;
    let terminal = Vector2::new(y[0], y[1]);
    let relative_residual = if hn > 0.0 { norm2(&terminal) / hn } else { norm2(&terminal) };
    Ok(SteerResult {
        terminal,
        relative_residual,
    })
}

/// Explicit-control energies (unit v) for modes 1..=n_max.
pub fn explicit_energy_mode_values(model: &SpectrumModel, dynamics: &Dynamics, t: f64, n_max: usize) -> Result<Vec<f64>> {
    (1..=n_max)
        .into_par_iter()
        .map(|n| {
            let block = build_mode_block(model, dynamics, n)?;
            Ok(control_energy(&explicit_control(&block, t, 1.0, dynamics)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllability::gramian::{gramian_block_with, minimal_energy, GramianMethod};
    use crate::operators::{eigen_coeffs, ChiNormalization, DampedParams, HeatParams};
    use approx::assert_relative_eq;
    use num_complex::Complex64;

    fn damped(alpha: f64, rho: f64, beta: f64, gamma: f64) -> Dynamics {
        Dynamics::Damped(DampedParams::new(alpha, rho, beta, gamma).unwrap())
    }

    fn block_at(mu: f64, d: &Dynamics) -> ModeBlock {
        build_mode_block(&SpectrumModel::power_law(mu, 1.0).unwrap(), d, 1).unwrap()
    }

    #[test]
    fn normalizing_constant_example() {
        assert_relative_eq!(normalizing_constant(3, 2.0), 0.625, epsilon = 1e-15);
        // oracle: Gauss–Legendre integral of φ
        let (x, w) = crate::quad::gauss_legendre(20);
        let t = 0.7;
        let c = normalizing_constant(4, t);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| {
            let tau = 0.5 * t * (x + 1.0);
            0.5 * t * w * c * tau.powi(4) * (t - tau)
        }).sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn order_rule() {
        assert_eq!(smoothing_order(&damped(0.4, 1.0, 0.1, 0.6)), 2);
        assert_eq!(smoothing_order(&damped(0.5, 1.0, 0.3, 0.3)), 1);
        assert_eq!(smoothing_order(&damped(0.7, 1.0, 0.0, 0.8)), 5);
        let d = damped(0.4, 1.0, 0.1, 0.6);
        assert!(explicit_control_with_order(&block_at(4.0, &d), 1.0, 1.0, &d, 1).is_err());
    }

    #[test]
    fn endpoints_vanish() {
        let d = damped(0.5, 1.0, 0.5, 1.0);
        let p = explicit_control(&block_at(4.0, &d), 1.0, 1.0, &d).unwrap();
        let b = block_at(4.0, &d);
        assert_eq!(p.eval(0.0), 0.0);
        // at τ = t only φ vanishes; the K₂φ′ term leaves c̄tᵐμ^{γ−½}(e^{ta}h)₁
        let w = semigroup_block(&b, 1.0).apply(&b.v);
        let expected = p.cbar * 4f64.powf(1.0 - 0.5) * w[0];
        assert_relative_eq!(p.eval(1.0), expected, max_relative = 1e-12);
        assert!(p.samples.len() >= MIN_SAMPLES);
        assert_eq!(p.samples[0].0, 0.0);
        assert_eq!(p.samples.last().unwrap().0, 1.0);
    }

    #[test]
    fn steering_reaches_zero() {
        for d in [damped(0.5, 1.0, 0.5, 1.0), damped(0.3, 0.8, 0.0, 0.4), damped(0.75, 1.5, 0.2, 0.1)] {
            for mu in [1.0, 37.0, 1e3, 1e4] {
                let b = block_at(mu, &d);
                for t in [0.1, 1.0] {
                    let p = explicit_control(&b, t, 1.0, &d).unwrap();
                    let r = steer(&b, &p, &b.v).unwrap();
                    assert!(r.relative_residual <= 1e-8, "mu {mu} t {t}: {}", r.relative_residual);
                }
            }
        }
        let heat = Dynamics::Heat(HeatParams::new(0.0, 0.3, 1).unwrap());
        let b = block_at(25.0, &heat);
        let p = explicit_control(&b, 0.5, 2.0, &heat).unwrap();
        assert!(steer(&b, &p, &(b.v * 2.0)).unwrap().relative_residual <= 1e-8);
    }

    #[test]
    fn zero_control_gives_free_flow() {
        let d = damped(0.5, 1.0, 0.0, 0.0);
        let b = block_at(4.0, &d);
        let h = Vector2::new(0.3, -1.0);
        let r = steer(&b, &ControlProfile::zero(&b, 1.0), &h).unwrap();
        let free = semigroup_block(&b, 1.0).apply(&h);
        assert!((r.terminal - free).norm() < 1e-11);
        assert_eq!(control_energy(&ControlProfile::zero(&b, 1.0)), 0.0);
    }

    #[test]
    fn response_is_linear() {
        let d = damped(0.5, 1.0, 0.0, 0.0);
        let b = block_at(4.0, &d);
        let p = explicit_control(&b, 1.0, 1.0, &d).unwrap();
        // Y_{2u}(h) = Y_u(h) + Y_u(0) and Y_u(0) = Y_u(h) − e^{tA}h = −e^{tA}h
        let y2 = steer(&b, &p.scaled(2.0), &b.v).unwrap().terminal;
        let free = semigroup_block(&b, 1.0).apply(&b.v);
        assert!((y2 + free).norm() < 1e-10);
        assert_relative_eq!(control_energy(&p.scaled(-3.0)), 3.0 * control_energy(&p), max_relative = 1e-12);
    }

    #[test]
    fn energy_dominates_minimal_energy() {
        let d = damped(0.4, 1.0, 0.1, 0.6);
        let b = block_at(9.0, &d);
        for t in [0.01, 0.1, 1.0] {
            let p = explicit_control(&b, t, 1.0, &d).unwrap();
            let g = gramian_block_with(&b, t, GramianMethod::default()).unwrap();
            let e_min = minimal_energy(&b, &g, &b.v).unwrap();
            let e = control_energy(&p);
            assert!(e >= e_min * (1.0 - 1e-9) && e <= 50.0 * e_min, "t {t}: {e} vs {e_min}");
        }
    }

    #[test]
    fn real_form_matches_modal_expansion() {
        // e^{τa}h = Σ± b^± e^{λ^±τ}Φ^± with the eigen coefficients
        let d = damped(0.4, 1.0, 0.2, 0.5);
        let b = block_at(16.0, &d);
        let c = eigen_coeffs(&b, 0.2, ChiNormalization::EqualNorm).unwrap();
        for tau in [0.0, 0.03, 0.4] {
            let ep = (b.eigs.0 * tau).exp();
            let em = (b.eigs.1 * tau).exp();
            let pp = c.phi_plus();
            let pm = c.phi_minus();
            let bm = c.b_minus();
            let modal: Vec<Complex64> = (0..2).map(|i| c.b_plus * ep * pp[i] + bm * em * pm[i]).collect();
            let real = semigroup_block(&b, tau).apply(&b.v);
            for i in 0..2 {
                assert!((modal[i].re - real[i]).abs() < 1e-12 && modal[i].im.abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]
            #[test]
            fn explicit_energy_bounds_minimal(mu in 0.5f64..500.0, alpha in 0.1f64..0.9, rho in 0.2f64..2.0,
                                              beta in 0.0f64..0.5, gamma in 0.0f64..0.5, lt in -3.0f64..0.0, v in -2.0f64..2.0) {
                let d = damped(alpha, rho, beta, gamma);
                let b = match build_mode_block(&SpectrumModel::power_law(mu, 1.0).unwrap(), &d, 1) { Ok(b) => b, Err(_) => return Ok(()) };
                let t = 10f64.powf(lt);
                let p = explicit_control(&b, t, v, &d).unwrap();
                let g = gramian_block_with(&b, t, GramianMethod::default()).unwrap();
                let e_min = minimal_energy(&b, &g, &(b.v * v)).unwrap();
                prop_assert!(control_energy(&p) >= e_min * (1.0 - 1e-8));
            }
        }
    }
}
