use weak_spde::controllability::{gramian_block, DEFAULT_GRAMIAN_TOL};
use weak_spde::drift::DriftField;
use weak_spde::operators::*;
use weak_spde::sde_sim::*;
use weak_spde::semigroup::ScalarField;

fn config(scheme: Scheme, drift: DriftField, dt: f64, paths: usize, seed: u64) -> SchemeConfig {
    SchemeConfig {
        scheme,
        dt,
        horizon: 1.0,
        n_modes: 3,
        paths,
        seed,
        drift,
        x0: vec![1.0, -0.5, 0.5],
        noise_refinement: 0,
    }
}

fn mean_and_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn damped_free_system_matches_gaussian_moments() {
    let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
    let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.1, 0.2).unwrap());
    let cfg = config(Scheme::ExponentialMild, DriftField::zero(), 1.0 / 32.0, 20_000, 11);
    let ens = simulate(&model, &d, &cfg).unwrap();
    let sys = GalerkinSystem::new(&model, &d, 3).unwrap();
    let mean = sys.semigroup_apply(1.0, &[1.0, -0.5, 0.5, 0.0, 0.0, 0.0]);
    for (i, exact) in mean.iter().enumerate() {
        let xs: Vec<f64> = (0..ens.paths).map(|p| ens.state(p, ens.steps)[i]).collect();
        let (m, se) = mean_and_error(&xs);
        assert!((m - exact).abs() <= 4.0 * se, "coordinate {i}: {m} vs {exact}");
    }
    let trace: f64 = sys
        .blocks()
        .iter()
        .map(|b| {
            let q = gramian_block(b, 1.0, DEFAULT_GRAMIAN_TOL).unwrap();
            q.q().get(0, 0) + q.q().get(1, 1)
        })
        .sum();
    let sq: Vec<f64> = (0..ens.paths).map(|p| ens.state(p, ens.steps).iter().map(|v| v * v).sum()).collect();
    let (m2, se2) = mean_and_error(&sq);
    let exact = mean.iter().map(|v| v * v).sum::<f64>() + trace;
    assert!((m2 - exact).abs() <= 4.0 * se2, "{m2} vs {exact}");
}

#[test]
fn euler_bias_against_the_exponential_scheme_shrinks_with_dt() {
    let model = SpectrumModel::cube_dirichlet(1, 1, 4096).unwrap();
    let d = Dynamics::Heat(HeatParams::new(0.0, 0.3, 1).unwrap());
    let g = [ScalarField::new(|x: &[f64]| (x[0] + 0.5 * x[1]).cos())];
    let lambdas = [1.0];
    let b = DriftField::tanh_ridge(1.0);
    // both schemes share the seed and the dt = 1/256 noise, so the gap is
    // the discretization error, not Monte-Carlo noise
    let gap = |dt: f64, refinement: u32| {
        let mk = |scheme| SchemeConfig {
            noise_refinement: refinement,
            ..config(scheme, b.clone(), dt, 4000, 5)
        };
        let e = laplace_functionals(&model, &d, &mk(Scheme::EulerMaruyama), &g, &lambdas).unwrap()[0].value;
        let x = laplace_functionals(&model, &d, &mk(Scheme::ExponentialMild), &g, &lambdas).unwrap()[0].value;
        (e - x).abs()
    };
    let gaps = [gap(1.0 / 16.0, 4), gap(1.0 / 32.0, 3), gap(1.0 / 64.0, 2)];
    assert!(gaps[1] < 0.7 * gaps[0] && gaps[2] < 0.7 * gaps[1], "{gaps:?}");
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let model = SpectrumModel::cube_dirichlet(1, 1, 4096).unwrap();
    let d = Dynamics::Heat(HeatParams::new(0.0, 0.3, 1).unwrap());
    let a = simulate(&model, &d, &config(Scheme::EulerMaruyama, DriftField::tanh_ridge(1.0), 1.0 / 16.0, 50, 3)).unwrap();
    let b = simulate(&model, &d, &config(Scheme::EulerMaruyama, DriftField::tanh_ridge(1.0), 1.0 / 16.0, 50, 3)).unwrap();
    let c = simulate(&model, &d, &config(Scheme::EulerMaruyama, DriftField::tanh_ridge(1.0), 1.0 / 16.0, 50, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
}
