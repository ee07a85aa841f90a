//! One function per subcommand: run the library routine, flatten the result
//! into long-format rows and decide pass/fail.

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use weak_spde::controllability::*;
use weak_spde::kolmogorov::*;
use weak_spde::operators::{build_mode_block, Dynamics, GalerkinSystem, SpectrumModel};
use weak_spde::sde_sim::*;
use weak_spde::semigroup::*;

use crate::config::{preflight, Annotation, RateQuantity, RunConfig};
use crate::output::Row;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Rates,
    Control,
    Trace,
    OuCheck,
    FixedPoint,
    Simulate,
    Uniqueness,
    Cauchy,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Rates => "rates",
            Experiment::Control => "control",
            Experiment::Trace => "trace",
            Experiment::OuCheck => "ou-check",
            Experiment::FixedPoint => "fixed-point",
            Experiment::Simulate => "simulate",
            Experiment::Uniqueness => "uniqueness",
            Experiment::Cauchy => "cauchy",
        }
    }
}

pub struct Outcome {
    pub rows: Vec<Row>,
    /// Experiment-specific measured and predicted quantities.
    pub details: Value,
    pub pass: bool,
}

struct Setup {
    model: SpectrumModel,
    dynamics: Dynamics,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    Ok(Setup {
        model: cfg.model()?,
        dynamics: cfg.dynamics()?,
    })
}

pub fn run(experiment: Experiment, cfg: &RunConfig) -> Result<Outcome> {
    let s = setup(cfg)?;
    match experiment {
        Experiment::Rates => rates(cfg, &s),
        Experiment::Control => control(cfg, &s),
        Experiment::Trace => trace(cfg, &s),
        Experiment::OuCheck => ou_check(cfg, &s),
        Experiment::FixedPoint => fixed_point(cfg, &s),
        Experiment::Simulate => simulate_moments(cfg, &s),
        Experiment::Uniqueness => uniqueness(cfg, &s),
        Experiment::Cauchy => cauchy(cfg, &s),
    }
}

fn quantity_name(q: RateQuantity) -> &'static str {
    match q {
        RateQuantity::GammaV => "gamma-v",
        RateQuantity::Gamma => "gamma",
        RateQuantity::ExplicitEnergy => "explicit-energy",
    }
}

fn rates(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let r = &cfg.rates;
    if !(r.t_min > 0.0 && r.t_max > r.t_min && r.points >= 2) {
        bail!("rates: need 0 < t_min < t_max and at least two points");
    }
    let times = geometric_times(r.t_min, r.t_max, r.points);
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut pass = true;
    for &q in &r.quantities {
        let quantity = match q {
            RateQuantity::GammaV => SweepQuantity::GammaV,
            RateQuantity::Gamma => SweepQuantity::GammaPlain,
            RateQuantity::ExplicitEnergy => SweepQuantity::ExplicitEnergy,
        };
        let fit = rate_sweep(&s.model, &s.dynamics, &times, quantity, r.n_start, r.n_cap)?;
        let name = quantity_name(q);
        for (t, v) in fit.times.iter().zip(&fit.norms) {
            rows.push(Row::new(format!("{name}/norm"), Some(*t), *v, None));
        }
        let predicted = fit.predicted_exponent.unwrap_or(f64::NAN);
        rows.push(Row::new(format!("{name}/slope"), None, fit.slope, Some(r.tolerance)));
        rows.push(Row::new(format!("{name}/predicted"), None, predicted, None));
        // the damped plain-Γ prediction is an upper envelope, not an asymptotic
        let envelope = q == RateQuantity::Gamma && matches!(s.dynamics, Dynamics::Damped(_));
        let ok = if envelope {
            fit.slope <= predicted + r.tolerance
        } else {
            (fit.slope - predicted).abs() <= r.tolerance
        };
        pass &= ok;
        fits.push(json!({
            "quantity": name,
            "measured": fit.slope,
            "predicted": predicted,
            "comparison": if envelope { "upper-bound" } else { "equal" },
            "tolerance": r.tolerance,
            "r_squared": fit.r_squared,
            "intercept": fit.intercept,
            "pass": ok,
        }));
    }
    Ok(Outcome {
        rows,
        details: json!({ "fits": fits }),
        pass,
    })
}

fn control(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let c = &cfg.control;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    let mut below_minimal = 0usize;
    for &n in &c.modes {
        let block = build_mode_block(&s.model, &s.dynamics, n)?;
        for &t in &c.horizons {
            let p = explicit_control(&block, t, c.amplitude, &s.dynamics)?;
            let h = block.v * c.amplitude;
            let r = steer(&block, &p, &h)?;
            let gram = gramian_block(&block, t, DEFAULT_GRAMIAN_TOL)?;
            let energy = control_energy(&p);
            let minimal = minimal_energy(&block, &gram, &h)?;
            worst = worst.max(r.relative_residual);
            if energy < minimal * (1.0 - 1e-10) {
                below_minimal += 1;
            }
            rows.push(Row::new(format!("residual/n={n}"), Some(t), r.relative_residual, Some(c.residual_tol)));
            rows.push(Row::new(format!("energy/n={n}"), Some(t), energy, None));
            rows.push(Row::new(format!("minimal-energy/n={n}"), Some(t), minimal, None));
        }
    }
    Ok(Outcome {
        rows,
        details: json!({
            "max_relative_residual": worst,
            "residual_tolerance": c.residual_tol,
            "energy_below_minimal": below_minimal,
        }),
        pass: worst <= c.residual_tol && below_minimal == 0,
    })
}

fn trace(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let t = &cfg.trace;
    let probe = trace_probe(&s.model, &s.dynamics, t.eta, t.t, t.n_max)?;
    let annotation = preflight(cfg).into_iter().find(|a| a.name == "trace").expect("trace annotation");
    let verdict = match probe.verdict {
        TraceVerdict::Convergent => "convergent",
        TraceVerdict::Divergent => "divergent",
        TraceVerdict::Inconclusive => "inconclusive",
    };
    // on the boundary the sum diverges logarithmically, so "not convergent" is
    // all a finite probe can show
    let pass = match (annotation.holds, annotation.boundary, probe.verdict) {
        (true, _, v) => v == TraceVerdict::Convergent,
        (false, true, v) => v != TraceVerdict::Convergent,
        (false, false, v) => v == TraceVerdict::Divergent,
    };
    Ok(Outcome {
        rows: vec![
            Row::new("partial", Some(t.n_max as f64), probe.partial, None),
            Row::new("tail-exponent", Some(t.n_max as f64), probe.tail_exponent, Some(INCONCLUSIVE_BAND)),
        ],
        details: json!({
            "verdict": verdict,
            "tail_exponent": probe.tail_exponent,
            "expected": annotation.label(),
            "condition": annotation.condition,
        }),
        pass,
    })
}

fn ou_check(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let o = &cfg.ou_check;
    let sys = GalerkinSystem::new(&s.model, &s.dynamics, o.n_active)?;
    let kernel = OuKernel::new(&sys, o.t, GramianMethod::default())?;
    let rule = gaussian_rule(kernel.grams(), o.order, cfg.seed)?;
    let dim = sys.state_dim();
    let bd = sys.block_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut worst_rel = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for i in 0..o.samples {
        // scale w so ⟨w, Y⟩ has standard deviation in [0.2, 0.6] under the kernel
        let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: f64 = kernel
            .grams()
            .iter()
            .enumerate()
            .map(|(k, g)| (0..bd).flat_map(|a| (0..bd).map(move |b| (a, b))).map(|(a, b)| w[k * bd + a] * g.q().get(a, b) * w[k * bd + b]).sum::<f64>())
            .sum();
        let target = rng.random_range(0.2..0.6);
        w.iter_mut().for_each(|c| *c *= target / var.sqrt());
        let phi = ScalarField::tanh_ridge(w, rng.random_range(-0.5..0.5));
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..o.n_active).map(|_| rng.random_range(-1.0..1.0)).collect();
        let deriv = ou_v_derivative(&phi, &kernel, &x, &v, &rule)?;
        let h = sys.drift_embed(&v);
        let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(&h).map(|(a, b)| a + sign * o.epsilon * b).collect() };
        let fd = (ou_apply(&phi, &kernel, &shifted(1.0), &rule)? - ou_apply(&phi, &kernel, &shifted(-1.0), &rule)?) / (2.0 * o.epsilon);
        let bound = kernel.gamma(&v).iter().map(|c| c * c).sum::<f64>().sqrt();
        let rel = (deriv - fd).abs() / deriv.abs().max(1e-3 * bound);
        worst_rel = worst_rel.max(rel);
        worst_ratio = worst_ratio.max(deriv.abs() / bound);
        rows.push(Row::new("derivative", Some(i as f64), deriv, Some((deriv - fd).abs())));
        rows.push(Row::new("finite-difference", Some(i as f64), fd, None));
        rows.push(Row::new("bound", Some(i as f64), bound, None));
    }
    Ok(Outcome {
        rows,
        details: json!({
            "samples": o.samples,
            "max_relative_gap": worst_rel,
            "tolerance": o.tolerance,
            "max_ratio_to_bound": worst_ratio,
        }),
        pass: worst_rel <= o.tolerance && worst_ratio <= 1.0,
    })
}

fn fixed_point(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let f = &cfg.fixed_point;
    let drift = f.drift.build();
    let l0 = lambda0_search(&s.model, &s.dynamics, drift.sup(), f.n_active)?;
    let lambda = f.lambda_factor * l0.lambda0;
    let constants = contraction_constants(&s.model, &s.dynamics, lambda, f.n_active)?;
    let sys = GalerkinSystem::new(&s.model, &s.dynamics, f.grid_modes)?;
    let spec = GridSpec::stationary(&sys, f.resolution, f.box_factor)?;
    let picard = PicardConfig {
        v_lambda: VLambdaConfig {
            order: f.order,
            time_nodes: f.time_nodes,
            tol: f.tol,
            method: GramianMethod::default(),
        },
        tol: f.tol,
        max_iterations: f.max_iterations,
    };
    let lipschitz = empirical_lipschitz(&spec, &sys, &drift, lambda, &picard.v_lambda, f.lipschitz_trials, cfg.seed)?;
    let dim = sys.state_dim();
    let w: Vec<f64> = (0..dim).map(|i| 1.0 / (i + 1) as f64).collect();
    let wg = w.clone();
    let g = ScalarField::new(move |x: &[f64]| x.iter().zip(&wg).map(|(a, b)| a * b).sum::<f64>().cos()).with_sup(1.0);
    let (u, report) = picard_solve(&spec, &sys, &g, &drift, &constants, Some(l0.lambda0), &picard)?;

    let mut rows = vec![
        Row::new("lambda0", Some(f.n_active as f64), l0.lambda0, None),
        Row::new("lambda0", Some(2.0 * f.n_active as f64), l0.lambda0_double, None),
        Row::new("c1", Some(lambda), constants.c1, None),
        Row::new("c2", Some(lambda), constants.c2, None),
        Row::new("q-theory", Some(lambda), report.q_theory, None),
        Row::new("q-empirical", Some(lambda), lipschitz, Some(QUADRATURE_SLACK)),
        Row::new("u-norm", Some(lambda), report.u_norm, None),
    ];
    for (i, c) in report.changes.iter().enumerate() {
        rows.push(Row::new("picard-change", Some((i + 1) as f64), *c, None));
    }
    let mut residual = Value::Null;
    if f.residual {
        let nodes = spec.interior_nodes(2);
        let uf = u.clone();
        let (gf, bf) = (g.clone(), drift.clone());
        let (n_modes, bd) = (sys.n_modes(), sys.block_dim());
        // f = g + ⟨∇_𝒱u, B⟩ read from the interpolated solution
        let rhs = ScalarField::new(move |x: &[f64]| {
            let mut vals = vec![0.0; 1 + n_modes];
            uf.interpolate(x, &mut vals);
            let mut b = vec![0.0; n_modes];
            bf.eval(x, bd, &mut b);
            gf.eval(x) + vals[1..].iter().zip(&b).map(|(p, q)| p * q).sum::<f64>()
        });
        let st = elliptic_residual(&u, &sys, lambda, &rhs, &nodes)?;
        rows.push(Row::new("residual-median", Some(f.resolution as f64), st.median_relative, None));
        rows.push(Row::new("residual-max", Some(f.resolution as f64), st.max_relative, None));
        residual = json!({ "median_relative": st.median_relative, "max_relative": st.max_relative, "evaluated": st.evaluated });
    }
    let pass = report.converged && lipschitz < 1.0 && lipschitz <= report.q_theory + QUADRATURE_SLACK && report.bound_holds();
    Ok(Outcome {
        rows,
        details: json!({
            "lambda0": l0.lambda0,
            "lambda0_double": l0.lambda0_double,
            "lambda": lambda,
            "c1": constants.c1,
            "c2": constants.c2,
            "q_theory": report.q_theory,
            "q_empirical": lipschitz,
            "iterations": report.iterations,
            "converged": report.converged,
            "u_norm": report.u_norm,
            "g_sup": report.g_sup,
            "clamped": report.clamped,
            "residual": residual,
        }),
        pass,
    })
}

#[allow(clippy::too_many_arguments)]
fn scheme_config(
    scheme: crate::config::SchemeName,
    dt: f64,
    horizon: f64,
    n_modes: usize,
    paths: usize,
    seed: u64,
    drift: &crate::config::DriftConfig,
    x0: &[f64],
) -> SchemeConfig {
    SchemeConfig {
        scheme: scheme.scheme(),
        dt,
        horizon,
        n_modes,
        paths,
        seed,
        drift: drift.build(),
        x0: x0.to_vec(),
        noise_refinement: 0,
    }
}

/// The first `dim` coordinates of `x0`, zero-padded.
fn padded(x0: &[f64], dim: usize) -> Vec<f64> {
    (0..dim).map(|i| x0.get(i).copied().unwrap_or(0.0)).collect()
}

fn simulate_moments(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let m = &cfg.simulate;
    let sc = scheme_config(m.scheme, m.dt, m.horizon, m.n_modes, m.paths, cfg.seed, &m.drift, &m.x0);
    let ens = simulate(&s.model, &s.dynamics, &sc)?;
    let shown = ens.dim.min(4);
    let every = m.record_every.max(1);
    let mut steps: Vec<usize> = (0..=ens.steps).step_by(every).collect();
    if *steps.last().unwrap() != ens.steps {
        steps.push(ens.steps);
    }
    let mut rows = Vec::new();
    let mut last = (0.0, 0.0);
    for &step in &steps {
        let t = step as f64 * ens.dt;
        for i in 0..shown {
            let xs: Vec<f64> = (0..ens.paths).map(|p| ens.state(p, step)[i]).collect();
            let (mean, se) = mean_and_error(&xs);
            rows.push(Row::new(format!("mean/{i}"), Some(t), mean, Some(se)));
        }
        let sq: Vec<f64> = (0..ens.paths).map(|p| ens.state(p, step).iter().map(|v| v * v).sum()).collect();
        let (second, se) = mean_and_error(&sq);
        rows.push(Row::new("second-moment", Some(t), second, Some(se)));
        last = (second, se);
    }
    // with B ≡ 0 the exponential scheme samples the exact Gaussian law
    let mut exact = Value::Null;
    let mut pass = true;
    if sc.drift.sup() == 0.0 && sc.scheme == Scheme::ExponentialMild {
        let sys = GalerkinSystem::new(&s.model, &s.dynamics, m.n_modes)?;
        let mean = sys.semigroup_apply(m.horizon, &padded(&m.x0, sys.state_dim()));
        let variance: f64 = sys
            .blocks()
            .iter()
            .map(|b| -> Result<f64> {
                let q = gramian_block(b, m.horizon, DEFAULT_GRAMIAN_TOL)?;
                Ok((0..b.dim()).map(|i| q.q().get(i, i)).sum())
            })
            .sum::<Result<f64>>()?;
        let second = mean.iter().map(|v| v * v).sum::<f64>() + variance;
        let z = (last.0 - second).abs() / last.1;
        pass = z <= 4.0;
        rows.push(Row::new("exact-second-moment", Some(m.horizon), second, None));
        exact = json!({ "second_moment": second, "estimate": last.0, "std_error": last.1, "z": z });
    }
    Ok(Outcome {
        rows,
        details: json!({
            "scheme": sc.scheme.tag(),
            "paths": ens.paths,
            "steps": ens.steps,
            "dim": ens.dim,
            "final_second_moment": last.0,
            "final_std_error": last.1,
            "exact_check": exact,
        }),
        pass,
    })
}

fn mean_and_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// cos, shifted sine and tanh of ⟨w, x⟩ with w_i = 1/(i+1).
fn test_functions(dim: usize) -> (Vec<String>, Vec<ScalarField>) {
    let w: Vec<f64> = (0..dim).map(|i| 1.0 / (i + 1) as f64).collect();
    let dot = move |x: &[f64]| -> f64 { x.iter().zip(&w).map(|(a, b)| a * b).sum() };
    let (d1, d2) = (dot.clone(), dot.clone());
    (
        vec!["cos".into(), "sin-shift".into(), "tanh".into()],
        vec![
            ScalarField::new(move |x: &[f64]| dot(x).cos()).with_sup(1.0),
            ScalarField::new(move |x: &[f64]| (d1(x) + 0.5).sin()).with_sup(1.0),
            ScalarField::new(move |x: &[f64]| (2.0 * d2(x)).tanh()).with_sup(1.0),
        ],
    )
}

fn table_rows(rows: &mut Vec<Row>, prefix: &str, table: &UniquenessTable) {
    for c in &table.cells {
        rows.push(Row::new(format!("{prefix}/{}/a", c.g_label), Some(c.lambda), c.estimate_a, Some(c.std_error_a)));
        rows.push(Row::new(format!("{prefix}/{}/b", c.g_label), Some(c.lambda), c.estimate_b, Some(c.std_error_b)));
        rows.push(Row::new(format!("{prefix}/{}/difference", c.g_label), Some(c.lambda), c.difference(), Some(c.budget)));
    }
}

fn uniqueness(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let u = &cfg.uniqueness;
    let a = scheme_config(u.scheme_a, u.dt, u.horizon, u.n_modes, u.paths, cfg.seed, &u.drift, &u.x0);
    let b = scheme_config(u.scheme_b, u.dt, u.horizon, u.n_modes, u.paths, cfg.seed.wrapping_add(1), &u.drift, &u.x0);
    let dim = u.n_modes * cfg.dynamics()?.block_dim();
    let (labels, gs) = test_functions(dim);
    let arm = |c: &SchemeConfig| uniqueness_arm(&s.model, &s.dynamics, c, &gs, &u.lambdas, BiasPolicy::InexactOnly);
    let arm_a = arm(&a)?;
    let table = compare_arms(&labels, &u.lambdas, &arm_a, &arm(&b)?)?;
    let mut rows = Vec::new();
    table_rows(&mut rows, "law", &table);
    let mut pass = table.all_pass();
    let mut control = Value::Null;
    if let Some(factor) = u.control_factor {
        let perturbed = SchemeConfig {
            drift: b.drift.scaled(factor),
            ..b.clone()
        };
        let ct = compare_arms(&labels, &u.lambdas, &arm_a, &arm(&perturbed)?)?;
        table_rows(&mut rows, "control", &ct);
        let failed = ct.cells.len() - ct.passed();
        let needed = (u.control_fail_fraction * ct.cells.len() as f64).ceil() as usize;
        pass &= failed >= needed;
        control = json!({ "factor": factor, "failed": failed, "needed": needed, "cells": ct.cells.len() });
    }
    Ok(Outcome {
        rows,
        details: json!({
            "cells": table.cells.len(),
            "passed": table.passed(),
            "control": control,
        }),
        pass,
    })
}

fn cauchy(cfg: &RunConfig, s: &Setup) -> Result<Outcome> {
    let c = &cfg.cauchy;
    let template = scheme_config(c.scheme, c.dt, c.horizon, c.n_ref, c.paths, cfg.seed, &c.drift, &c.x0);
    let table = galerkin_cauchy(&s.model, &s.dynamics, &template, &c.ns, c.n_ref)?;
    let every = c.record_every.max(1);
    let mut rows = Vec::new();
    for gap in &table.gaps {
        rows.push(Row::new("sup-gap", Some(gap.n as f64), gap.sup_gap, Some(gap.std_error)));
        for (step, v) in gap.profile.iter().enumerate().step_by(every) {
            rows.push(Row::new(format!("gap/n={}", gap.n), Some(step as f64 * c.dt), *v, None));
        }
    }
    let monotone = table.monotone();
    let mut pass = monotone;
    let mut tail = Value::Null;
    // B ≡ 0 with the exact scheme: the gap is the Gaussian tail sum
    if template.drift.sup() == 0.0 && template.scheme == Scheme::ExponentialMild {
        let mut worst = 0.0f64;
        for gap in &table.gaps {
            let oracle = (0..gap.profile.len())
                .map(|st| gaussian_tail_gap(&s.model, &s.dynamics, &c.x0, gap.n, c.n_ref, st as f64 * c.dt))
                .collect::<weak_spde::Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            rows.push(Row::new("tail-sum", Some(gap.n as f64), oracle, None));
            worst = worst.max((gap.sup_gap - oracle).abs() / oracle);
        }
        pass &= worst <= c.tail_tolerance;
        tail = json!({ "max_relative_gap": worst, "tolerance": c.tail_tolerance });
    }
    Ok(Outcome {
        rows,
        details: json!({
            "n_ref": table.n_ref,
            "sup_gaps": table.gaps.iter().map(|g| json!({"n": g.n, "sup_gap": g.sup_gap, "std_error": g.std_error})).collect::<Vec<_>>(),
            "monotone": monotone,
            "tail_check": tail,
        }),
        pass,
    })
}

/// Annotations serialized for summaries.
pub fn annotations_json(annotations: &[Annotation]) -> Value {
    Value::Array(
        annotations
            .iter()
            .map(|a| json!({ "name": a.name, "condition": a.condition, "lhs": a.lhs, "rhs": a.rhs, "status": a.label() }))
            .collect(),
    )
}
