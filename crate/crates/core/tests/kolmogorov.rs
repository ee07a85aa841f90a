use weak_spde::drift::DriftField;
use weak_spde::kolmogorov::*;
use weak_spde::operators::*;
use weak_spde::semigroup::ScalarField;

fn heat() -> (SpectrumModel, Dynamics) {
    (
        SpectrumModel::cube_dirichlet(1, 1, 4096).unwrap(),
        Dynamics::Heat(HeatParams::new(0.2, 0.3, 1).unwrap()),
    )
}

#[test]
fn picard_solution_solves_the_elliptic_equation_on_a_fine_grid() {
    let (model, d) = heat();
    let drift = DriftField::tanh_ridge(1.0);
    let l0 = lambda0_search(&model, &d, drift.sup(), 32).unwrap();
    let constants = contraction_constants(&model, &d, 2.0 * l0.lambda0, 32).unwrap();
    let sys = GalerkinSystem::new(&model, &d, 2).unwrap();
    let spec = GridSpec::stationary(&sys, 129, 4.0).unwrap();
    let g = ScalarField::new(|x: &[f64]| (x[0] + 0.5 * x[1]).cos()).with_sup(1.0);
    let (u, report) = picard_solve(&spec, &sys, &g, &drift, &constants, Some(l0.lambda0), &PicardConfig::default()).unwrap();
    assert!(report.converged && report.bound_holds());

    // λu − Lu = ⟨∇_𝒱u, B⟩ + g with the gradient read from the solution
    let (uf, gf, bf) = (u.clone(), g.clone(), drift.clone());
    let f = ScalarField::new(move |x: &[f64]| {
        let mut vals = [0.0; 3];
        uf.interpolate(x, &mut vals);
        let mut b = [0.0; 2];
        bf.eval(x, 1, &mut b);
        gf.eval(x) + vals[1] * b[0] + vals[2] * b[1]
    });
    // the central half of the box, where clamping never reaches the stencil
    let nodes: Vec<usize> = spec
        .interior_nodes(2)
        .into_iter()
        .filter(|&i| spec.node(i).iter().zip(&spec.half_widths).all(|(x, l)| x.abs() <= 0.5 * l))
        .collect();
    let st = elliptic_residual(&u, &sys, constants.lambda, &f, &nodes).unwrap();
    assert!(st.median_relative <= 5e-2, "median {} max {}", st.median_relative, st.max_relative);
}

#[test]
fn contraction_ratio_shrinks_as_lambda_grows() {
    let (model, d) = heat();
    let drift = DriftField::tanh_ridge(1.0);
    let sys = GalerkinSystem::new(&model, &d, 1).unwrap();
    let spec = GridSpec::stationary(&sys, 33, 4.0).unwrap();
    let cfg = VLambdaConfig::default();
    let ratios: Vec<f64> = [5.0, 20.0, 80.0]
        .iter()
        .map(|&l| empirical_lipschitz(&spec, &sys, &drift, l, &cfg, 4, 3).unwrap())
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    for (&l, r) in [5.0, 20.0, 80.0].iter().zip(&ratios) {
        let q = drift.sup() * contraction_constants(&model, &d, l, 32).unwrap().sum();
        assert!(*r <= q + QUADRATURE_SLACK, "lambda {l}: {r} > {q}");
    }
}
