use nalgebra::Vector2;
use proptest::prelude::*;
use weak_spde::controllability::*;
use weak_spde::operators::*;

fn heat_mode(mu: f64, beta: f64, gamma: f64) -> ModeBlock {
    let model = SpectrumModel::power_law(mu, 1.0).unwrap();
    build_mode_block(&model, &Dynamics::Heat(HeatParams::new(beta, gamma, 1).unwrap()), 1).unwrap()
}

#[test]
fn explicit_and_minimal_energy_rates_agree_at_critical_damping() {
    let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
    let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.1, 0.3).unwrap());
    let times = geometric_times(1e-3, 1e-1, 6);
    let minimal = rate_sweep(&model, &d, &times, SweepQuantity::GammaV, 8, 1 << 16).unwrap();
    let explicit = rate_sweep(&model, &d, &times, SweepQuantity::ExplicitEnergy, 8, 1 << 16).unwrap();
    assert!((minimal.slope - explicit.slope).abs() <= 0.1, "{} vs {}", minimal.slope, explicit.slope);
    // the explicit control is admissible, so never cheaper than the minimal one
    for (e, m) in explicit.norms.iter().zip(&minimal.norms) {
        assert!(*e >= m * (1.0 - 1e-10));
    }
}

#[test]
fn heat_rate_follows_half_plus_gamma_minus_beta() {
    let model = SpectrumModel::cube_dirichlet(1, 1, 1 << 16).unwrap();
    let d = Dynamics::Heat(HeatParams::new(0.1, 0.4, 1).unwrap());
    let fit = rate_sweep(&model, &d, &geometric_times(1e-3, 1e-1, 6), SweepQuantity::GammaV, 8, 1 << 16).unwrap();
    assert!(fit.deviation().unwrap() < 0.05, "slope {}", fit.slope);
    assert!(fit.r_squared > 0.999);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // e^{−μt}μ^{−β} / √(μ^{−2γ}(1 − e^{−2μt})/(2μ))
    #[test]
    fn heat_gamma_v_closed_form(mu in 0.05f64..500.0, beta in 0.0f64..1.0, gamma in 0.0f64..1.0, t in 1e-3f64..3.0) {
        let b = heat_mode(mu, beta, gamma);
        let g = gramian_block(&b, t, DEFAULT_GRAMIAN_TOL).unwrap();
        let q = mu.powf(-2.0 * gamma) * -(-2.0 * mu * t).exp_m1() / (2.0 * mu);
        let closed = (-mu * t).exp() * mu.powf(-beta) / q.sqrt();
        let got = gamma_v_norm(&b, &g).unwrap();
        prop_assert!((got - closed).abs() <= 1e-9 * closed, "{got} vs {closed}");
    }

    #[test]
    fn explicit_control_steers_and_costs_at_least_the_minimum(
        alpha in 0.1f64..0.9,
        rho in 0.3f64..2.5,
        gamma in 0.0f64..0.8,
        n in 1usize..40,
        t in 0.1f64..1.0,
        v in -3.0f64..3.0,
    ) {
        let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(alpha, rho, 0.0, gamma).unwrap());
        // resonant modes (repeated eigenvalue) are rejected by construction
        let Ok(block) = build_mode_block(&model, &d, n) else { return Ok(()) };
        let profile = explicit_control(&block, t, v, &d).unwrap();
        let h: Vector2<f64> = block.v * v;
        let r = steer(&block, &profile, &h).unwrap();
        prop_assert!(r.relative_residual <= 1e-8, "residual {}", r.relative_residual);
        let gram = gramian_block(&block, t, DEFAULT_GRAMIAN_TOL).unwrap();
        prop_assert!(control_energy(&profile) >= minimal_energy(&block, &gram, &h).unwrap() * (1.0 - 1e-10));
    }
}
