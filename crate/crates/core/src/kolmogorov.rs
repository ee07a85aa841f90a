//! The resolvent-type map
//!
//!   V_λ(u)(x) = ∫₀^∞ e^{−λt} R_n(t)[⟨∇_𝒱u, B⟩ + g](x) dt,
//!
//! its contraction constants, the threshold λ₀ and the fixed point
//! u = V_λ(u) on a tensor grid over one or two active modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controllability::{check_integrability, gamma_operator_norm, GammaVariant, GramianMethod};
use crate::drift::DriftField;
use crate::error::{Error, Result};
use crate::operators::{semigroup_operator_norm, Dynamics, GalerkinSystem, SpectrumModel};
use crate::quad::{adaptive_gk, gauss_legendre};
use crate::semigroup::{whitened_quadrature, OuKernel, OuStencil, ScalarField};

/// Largest state dimension of a grid function.
pub const GRID_MAX_DIM: usize = 4;
/// Cap on point evaluations in one application of V_λ.
pub const MAX_EVALUATIONS: u64 = 1 << 34;
/// Slack allowed between measured and theoretical contraction.
pub const QUADRATURE_SLACK: f64 = 0.02;

/// Stationary variance of each state coordinate of mode block `k`.
///
/// Heat: μ^{−2γ}/(2μ). Damped: both coordinates have μ^{−2γ}/(2ρμ^α) and
/// are uncorrelated, since aQ + Qaᵀ = −2ρμ^α·q·e₂e₂ᵀ for Q = q·I.
pub fn stationary_variance(system: &GalerkinSystem, k: usize) -> f64 {
    let b = &system.blocks()[k];
    let g2 = b.g[0] * b.g[0] + b.g[1] * b.g[1];
    if b.dim() == 1 {
        g2 / (2.0 * b.mu)
    } else {
        g2 / (-2.0 * b.a.get(1, 1))
    }
}

/// Box, resolution and mode count of a grid function.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub half_widths: Vec<f64>,
    pub resolution: usize,
    pub n_modes: usize,
    pub block_dim: usize,
}

impl GridSpec {
    pub fn new(half_widths: Vec<f64>, resolution: usize, n_modes: usize, block_dim: usize) -> Result<Self> {
        let dim = half_widths.len();
        if dim != n_modes * block_dim {
            return Err(Error::Parameter(format!("{dim} half widths for {n_modes} modes of block size {block_dim}")));
        }
        if dim == 0 || dim > GRID_MAX_DIM {
            return Err(Error::Capacity(format!("grid functions support 1 to {GRID_MAX_DIM} coordinates, got {dim}")));
        }
        if resolution < 5 {
            return Err(Error::Parameter(format!("resolution must be >= 5, got {resolution}")));
        }
        if half_widths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Parameter("half widths must be positive".into()));
        }
        Ok(Self {
            half_widths,
            resolution,
            n_modes,
            block_dim,
        })
    }

    /// Box of `factor` stationary standard deviations per coordinate.
    pub fn stationary(system: &GalerkinSystem, resolution: usize, factor: f64) -> Result<Self> {
        let mut hw = Vec::new();
        for k in 0..system.n_modes() {
            let s = stationary_variance(system, k).sqrt();
            for _ in 0..system.block_dim() {
                hw.push(factor * s);
            }
        }
        Self::new(hw, resolution, system.n_modes(), system.block_dim())
    }

    pub fn dim(&self) -> usize {
        self.half_widths.len()
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 * self.half_widths[axis] / (self.resolution - 1) as f64
    }

    /// Per-axis indices of flat node `i` (axis 0 varies fastest).
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        for _ in 0..self.dim() {
            idx.push(i % self.resolution);
            i /= self.resolution;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &j| acc * self.resolution + j)
    }

    pub fn node(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .iter()
            .enumerate()
            .map(|(a, &j)| -self.half_widths[a] + j as f64 * self.spacing(a))
            .collect()
    }

    /// Flat indices of nodes at least `margin` nodes from every face.
    pub fn interior_nodes(&self, margin: usize) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&i| self.multi_index(i).iter().all(|&j| j >= margin && j + margin < self.resolution))
            .collect()
    }
}

/// Values and 𝒱-gradient values on a tensor grid, interpolated by local
/// cubic Lagrange stencils (exact at the nodes) and clamped outside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    spec: GridSpec,
    /// Per node: value then one gradient entry per mode.
    data: Vec<f64>,
}

fn lagrange4(u: f64) -> [f64; 4] {
    [
        -u * (u - 1.0) * (u - 2.0) / 6.0,
        (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
        -(u + 1.0) * u * (u - 2.0) / 2.0,
        (u + 1.0) * u * (u - 1.0) / 6.0,
    ]
}

impl GridFunction {
    pub fn zero(spec: &GridSpec) -> Self {
        Self {
            data: vec![0.0; spec.node_count() * (1 + spec.n_modes)],
            spec: spec.clone(),
        }
    }

    /// Samples a function and its 𝒱-gradient at the nodes.
    pub fn from_fn(spec: &GridSpec, value: impl Fn(&[f64]) -> f64, v_grad: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let stride = 1 + spec.n_modes;
        let mut data = vec![0.0; spec.node_count() * stride];
        for i in 0..spec.node_count() {
            let x = spec.node(i);
            data[i * stride] = value(&x);
            let g = v_grad(&x);
            data[i * stride + 1..(i + 1) * stride].copy_from_slice(&g[..spec.n_modes]);
        }
        Self { spec: spec.clone(), data }
    }

    /// Samples a differentiable field; the 𝒱-gradient is 𝒱*∇φ.
    pub fn from_smooth(spec: &GridSpec, system: &GalerkinSystem, phi: &ScalarField) -> Result<Self> {
        if phi.gradient(&vec![0.0; spec.dim()]).is_none() {
            return Err(Error::Parameter("field has no gradient".into()));
        }
        Ok(Self::from_fn(spec, |x| phi.eval(x), |x| system.drift_adjoint(&phi.gradient(x).unwrap())))
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn stride(&self) -> usize {
        1 + self.spec.n_modes
    }

    pub fn value(&self, i: usize) -> f64 {
        self.data[i * self.stride()]
    }

    pub fn v_grad(&self, i: usize) -> &[f64] {
        &self.data[i * self.stride() + 1..(i + 1) * self.stride()]
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().step_by(self.stride()).copied().collect()
    }

    pub fn sup_value(&self) -> f64 {
        (0..self.spec.node_count()).map(|i| self.value(i).abs()).fold(0.0, f64::max)
    }

    pub fn sup_v_grad(&self) -> f64 {
        (0..self.spec.node_count())
            .map(|i| self.v_grad(i).iter().map(|g| g * g).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// sup|u| + sup‖∇_𝒱u‖ over the nodes.
    pub fn c1_norm(&self) -> f64 {
        self.sup_value() + self.sup_v_grad()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::Parameter("grid functions live on different grids".into()));
        }
        Ok(Self {
            spec: self.spec.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Interpolates value and gradient at `y` into `out` (length 1 + modes).
    /// Returns true if `y` lay outside the box and was clamped.
    pub fn interpolate(&self, y: &[f64], out: &mut [f64]) -> bool {
        let d = self.spec.dim();
        let r = self.spec.resolution;
        let stride = self.stride();
        let mut clamped = false;
        let mut base = [0usize; GRID_MAX_DIM];
        let mut w = [[0.0; 4]; GRID_MAX_DIM];
        for a in 0..d {
            let l = self.spec.half_widths[a];
            let mut ya = y[a];
            if ya < -l || ya > l {
                clamped = true;
                ya = ya.clamp(-l, l);
            }
            let s = (ya + l) / self.spec.spacing(a);
            let i = (s.floor() as usize).clamp(1, r - 3);
            base[a] = i - 1;
            w[a] = lagrange4(s - i as f64);
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut idx = [0usize; GRID_MAX_DIM];
        for _ in 0..4usize.pow(d as u32) {
            let mut weight = 1.0;
            let mut flat = 0;
            for a in (0..d).rev() {
                weight *= w[a][idx[a]];
                flat = flat * r + base[a] + idx[a];
            }
            let node = &self.data[flat * stride..(flat + 1) * stride];
            for (o, v) in out.iter_mut().zip(node) {
                *o += weight * v;
            }
            for a in 0..d {
                idx[a] += 1;
                if idx[a] < 4 {
                    break;
                }
                idx[a] = 0;
            }
        }
        clamped
    }

    /// The interpolated value as a field.
    pub fn to_field(&self) -> ScalarField {
        let me = self.clone();
        ScalarField::new(move |y| {
            let mut out = vec![0.0; me.stride()];
            me.interpolate(y, &mut out);
            out[0]
        })
    }
}

/// Numerical knobs of one application of V_λ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VLambdaConfig {
    /// Gauss–Hermite order per axis.
    pub order: usize,
    /// Gauss–Legendre nodes of the time integral (after t = T·s²).
    pub time_nodes: usize,
    /// The truncated time tail is below tol/10 relative to (‖∇_𝒱u‖‖B‖ + ‖g‖)/λ.
    pub tol: f64,
    pub method: GramianMethod,
}

impl Default for VLambdaConfig {
    fn default() -> Self {
        Self {
            order: 12,
            time_nodes: 20,
            tol: 1e-4,
            method: GramianMethod::default(),
        }
    }
}

/// Result of one application of V_λ.
#[derive(Clone, Debug)]
pub struct VLambdaOutput {
    pub u: GridFunction,
    pub t_max: f64,
    /// e^{−λT}(‖∇_𝒱u‖‖B‖ + ‖g‖)/λ, the truncated part of the time integral.
    pub tail_bound: f64,
    /// Quadrature points that fell outside the box.
    pub clamped: u64,
    pub evaluations: u64,
}

fn g_sup(g: &ScalarField, spec: &GridSpec) -> f64 {
    g.sup_hint
        .unwrap_or_else(|| (0..spec.node_count()).map(|i| g.eval(&spec.node(i)).abs()).fold(0.0, f64::max))
}

/// V_λ(u) on the grid of `u`.
pub fn apply_v_lambda(
    u: &GridFunction,
    g: &ScalarField,
    drift: &DriftField,
    system: &GalerkinSystem,
    lambda: f64,
    cfg: &VLambdaConfig,
) -> Result<VLambdaOutput> {
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    let spec = u.spec();
    if spec.dim() != system.state_dim() || spec.n_modes != system.n_modes() {
        return Err(Error::Parameter("grid does not match the Galerkin system".into()));
    }
    let n = spec.n_modes;
    let evaluations = spec.node_count() as u64 * cfg.time_nodes as u64 * (cfg.order as u64).pow(spec.dim() as u32);
    if evaluations > MAX_EVALUATIONS {
        return Err(Error::Capacity(format!("V_lambda needs {evaluations} evaluations, budget is {MAX_EVALUATIONS}")));
    }
    let scale = u.sup_v_grad() * drift.sup() + g_sup(g, spec);
    // the horizon depends on (λ, tol) only, so V_λ stays exactly affine in u
    let t_max = (10.0 / cfg.tol).ln().max(1.0) / lambda;
    let tail_bound = (-lambda * t_max).exp() * scale / lambda;

    // t = T·s² absorbs the t^{−1/2} growth of the whitened directions
    let (sn, sw) = gauss_legendre(cfg.time_nodes);
    let mut stencils = Vec::with_capacity(cfg.time_nodes);
    for (s, w) in sn.iter().zip(&sw) {
        let s = 0.5 * (s + 1.0);
        let t = t_max * s * s;
        let weight = 0.5 * w * 2.0 * s * t_max * (-lambda * t).exp();
        let kernel = OuKernel::new(system, t, cfg.method)?;
        let rule = whitened_quadrature(kernel.grams(), cfg.order)?;
        stencils.push((weight, OuStencil::new(&kernel, &rule)?));
    }

    let bd = system.block_dim();
    let results: Vec<(Vec<f64>, u64)> = (0..spec.node_count())
        .into_par_iter()
        .map(|i| {
            let x = spec.node(i);
            let mut acc = vec![0.0; 1 + n];
            let mut grad = vec![0.0; n];
            let mut interp = vec![0.0; 1 + n];
            let mut b = vec![0.0; n];
            let mut clamped = 0u64;
            for (weight, st) in &stencils {
                let mut value = 0.0;
                st.apply(
                    &x,
                    |y| {
                        if u.interpolate(y, &mut interp) {
                            clamped += 1;
                        }
                        drift.eval(y, bd, &mut b);
                        interp[1..].iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() + g.eval(y)
                    },
                    &mut value,
                    &mut grad,
                );
                acc[0] += weight * value;
                for k in 0..n {
                    acc[1 + k] += weight * grad[k];
                }
            }
            (acc, clamped)
        })
        .collect();
    let mut data = Vec::with_capacity(spec.node_count() * (1 + n));
    let mut clamped = 0;
    for (acc, c) in results {
        data.extend_from_slice(&acc);
        clamped += c;
    }
    Ok(VLambdaOutput {
        u: GridFunction { spec: spec.clone(), data },
        t_max,
        tail_bound,
        clamped,
        evaluations,
    })
}

/// c₁ and c₂ at one λ on the first `n_active` modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionConstants {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub n_active: usize,
    /// Predicted blow-up exponent of ‖Γ_t𝒱‖.
    pub exponent: f64,
}

impl ContractionConstants {
    pub fn sum(&self) -> f64 {
        self.c1 + self.c2
    }
}

/// c₁ = ∫₀¹ e^{−λt}(1 + ‖e^{tA*}‖‖Γ_t𝒱‖)dt and
/// c₂ = (1 + ‖e^{A*}‖‖Γ₁𝒱‖)∫₀^∞ e^{−λt}(1 + ‖e^{tA*}‖)dt.
pub fn contraction_constants(model: &SpectrumModel, dynamics: &Dynamics, lambda: f64, n_active: usize) -> Result<ContractionConstants> {
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    let exponent = check_integrability(dynamics)?;
    let method = GramianMethod::default();
    let e_norm = |t: f64| semigroup_operator_norm(model, dynamics, t, n_active).map(|s| s.value);
    let g_norm = |t: f64| gamma_operator_norm(model, dynamics, t, n_active, GammaVariant::WithDrift, method).map(|s| s.value);

    // t = u^m with m(1−p) = 1 turns the t^{−p} singularity into a bounded factor
    let m = 1.0 / (1.0 - exponent);
    let mut failure = None;
    let c1 = adaptive_gk(
        |s| {
            let t = s.powf(m);
            if t <= 0.0 || failure.is_some() {
                return 0.0;
            }
            match (e_norm(t), g_norm(t)) {
                (Ok(e), Ok(g)) => m * s.powf(m - 1.0) * (-lambda * t).exp() * (1.0 + e * g),
                (Err(err), _) | (_, Err(err)) => {
                    failure = Some(err);
                    0.0
                }
            }
        },
        0.0,
        1.0,
        1e-13,
        1e-10,
        4000,
    )
    .value;
    if let Some(err) = failure {
        return Err(err);
    }
    let head = 1.0 + e_norm(1.0)? * g_norm(1.0)?;
    let horizon = 60.0 / lambda;
    let tail = adaptive_gk(
        |t| {
            match e_norm(t) {
                Ok(e) => (-lambda * t).exp() * (1.0 + e),
                Err(err) => {
                    failure = Some(err);
                    0.0
                }
            }
        },
        0.0,
        horizon,
        1e-14,
        1e-11,
        4000,
    )
    .value;
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(ContractionConstants {
        lambda,
        c1,
        c2: head * tail,
        n_active,
        exponent,
    })
}

/// The threshold found at `n_active` and the check at `2·n_active`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda0 {
    pub lambda0: f64,
    pub lambda0_double: f64,
    pub n_active: usize,
    pub constants: ContractionConstants,
}

impl Lambda0 {
    /// |λ₀(2n) − λ₀(n)| / λ₀(n).
    pub fn relative_gap(&self) -> f64 {
        (self.lambda0_double - self.lambda0).abs() / self.lambda0
    }
}

fn contracts(c: &ContractionConstants, b_sup: f64) -> bool {
    c.sum() < 0.5 && b_sup * c.sum() < 0.5
}

fn search(model: &SpectrumModel, dynamics: &Dynamics, b_sup: f64, n_active: usize) -> Result<(f64, ContractionConstants)> {
    let at = |l: f64| contraction_constants(model, dynamics, l, n_active);
    let mut hi = 1.0;
    let mut c_hi = at(hi)?;
    let mut lo;
    if contracts(&c_hi, b_sup) {
        lo = hi / 2.0;
        loop {
            let c = at(lo)?;
            if !contracts(&c, b_sup) {
                break;
            }
            hi = lo;
            c_hi = c;
            lo /= 2.0;
            if lo < 1e-12 {
                return Ok((hi, c_hi));
            }
        }
    } else {
        loop {
            lo = hi;
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::Capacity("no contracting lambda below 1e12".into()));
            }
            c_hi = at(hi)?;
            if contracts(&c_hi, b_sup) {
                break;
            }
        }
    }
    while hi - lo > 0.01 * hi {
        let mid = 0.5 * (lo + hi);
        let c = at(mid)?;
        if contracts(&c, b_sup) {
            hi = mid;
            c_hi = c;
        } else {
            lo = mid;
        }
    }
    Ok((hi, c_hi))
}

/// Smallest λ (to 1% on a doubling-then-bisection grid) with c₁+c₂ < ½ and
/// ‖B‖_∞(c₁+c₂) < ½.
pub fn lambda0_search(model: &SpectrumModel, dynamics: &Dynamics, b_sup: f64, n_active: usize) -> Result<Lambda0> {
    let (lambda0, constants) = search(model, dynamics, b_sup, n_active)?;
    let (lambda0_double, _) = search(model, dynamics, b_sup, 2 * n_active)?;
    Ok(Lambda0 {
        lambda0,
        lambda0_double,
        n_active,
        constants,
    })
}

/// Knobs of the Picard loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardConfig {
    pub v_lambda: VLambdaConfig,
    /// Stop when the C¹ grid change drops below this.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            v_lambda: VLambdaConfig::default(),
            tol: 1e-4,
            max_iterations: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub b_sup: f64,
    /// ‖B‖_∞(c₁+c₂).
    pub q_theory: f64,
    /// Largest ratio of successive Picard changes, or an empirical
    /// Lipschitz ratio when one was measured.
    pub q_measured: Option<f64>,
    pub lambda0: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// C¹ grid norm of each successive change.
    pub changes: Vec<f64>,
    pub u_norm: f64,
    pub g_sup: f64,
    pub clamped: u64,
}

impl ContractionReport {
    /// ‖u‖ ≤ ‖g‖_∞ up to the quadrature slack.
    pub fn bound_holds(&self) -> bool {
        self.u_norm <= (1.0 + QUADRATURE_SLACK) * self.g_sup
    }
}

/// Iterates u ← V_λ(u) from u = 0.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    spec: &GridSpec,
    system: &GalerkinSystem,
    g: &ScalarField,
    drift: &DriftField,
    constants: &ContractionConstants,
    lambda0: Option<f64>,
    cfg: &PicardConfig,
) -> Result<(GridFunction, ContractionReport)> {
    let lambda = constants.lambda;
    let mut u = GridFunction::zero(spec);
    let mut changes = Vec::new();
    let mut clamped = 0;
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let next = apply_v_lambda(&u, g, drift, system, lambda, &cfg.v_lambda)?;
        clamped += next.clamped;
        let change = next.u.sub(&u)?.c1_norm();
        u = next.u;
        changes.push(change);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    // ratios are meaningful only while changes are above quadrature noise
    let q_measured = changes
        .windows(2)
        .filter(|w| w[0] > 10.0 * cfg.tol * 1e-3 && w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let report = ContractionReport {
        lambda,
        c1: constants.c1,
        c2: constants.c2,
        b_sup: drift.sup(),
        q_theory: drift.sup() * constants.sum(),
        q_measured,
        lambda0,
        iterations: changes.len(),
        converged,
        changes,
        u_norm: u.c1_norm(),
        g_sup: g_sup(g, spec),
        clamped,
    };
    Ok((u, report))
}

/// max over random smooth pairs (u, z) of ‖V_λu − V_λz‖ / ‖u − z‖ in the
/// C¹ grid norm. V_λ is affine with linear part V⁰_λ (g = 0), so the
/// difference is computed as V⁰_λ(u − z).
#[allow(clippy::too_many_arguments)]
pub fn empirical_lipschitz(
    spec: &GridSpec,
    system: &GalerkinSystem,
    drift: &DriftField,
    lambda: f64,
    cfg: &VLambdaConfig,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = ScalarField::constant(0.0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let u = random_smooth(&mut rng, spec);
        let z = random_smooth(&mut rng, spec);
        let du = GridFunction::from_smooth(spec, system, &u)?.sub(&GridFunction::from_smooth(spec, system, &z)?)?;
        let denom = du.c1_norm();
        if denom == 0.0 {
            continue;
        }
        let image = apply_v_lambda(&du, &zero, drift, system, lambda, cfg)?;
        worst = worst.max(image.u.c1_norm() / denom);
    }
    Ok(worst)
}

/// Σ_r a_r tanh(⟨c_r, x⟩ + b_r) with directions scaled to the box.
pub fn random_smooth(rng: &mut ChaCha8Rng, spec: &GridSpec) -> ScalarField {
    let d = spec.dim();
    let terms: Vec<(f64, Vec<f64>, f64)> = (0..3)
        .map(|_| {
            let c = (0..d).map(|a| rng.random_range(-2.0..2.0) / spec.half_widths[a]).collect();
            (rng.random_range(-1.0..1.0), c, rng.random_range(-1.0..1.0))
        })
        .collect();
    let t2 = terms.clone();
    ScalarField::new(move |x| {
        terms
            .iter()
            .map(|(a, c, b)| a * (c.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b).tanh())
            .sum()
    })
    .with_gradient(move |x| {
        let mut g = vec![0.0; x.len()];
        for (a, c, b) in &t2 {
            let s = c.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b;
            let d = a * (1.0 - s.tanh().powi(2));
            for (gi, ci) in g.iter_mut().zip(c) {
                *gi += d * ci;
            }
        }
        g
    })
}

/// Statistics of the elliptic residual relative to ‖f‖_∞ on the sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats {
    pub max_relative: f64,
    pub median_relative: f64,
    pub evaluated: usize,
    /// Requested nodes closer than two nodes to a face.
    pub excluded: usize,
    pub f_sup: f64,
}

/// λu − ½Tr[GGᵀ∇²u] − ⟨Ax, ∇u⟩ − f at the given nodes, with fourth-order
/// central differences of the grid values.
pub fn elliptic_residual(u: &GridFunction, system: &GalerkinSystem, lambda: f64, f: &ScalarField, nodes: &[usize]) -> Result<ResidualStats> {
    let spec = u.spec();
    if spec.dim() != system.state_dim() {
        return Err(Error::Parameter("grid does not match the Galerkin system".into()));
    }
    let d = spec.dim();
    let r = spec.resolution;
    let noise = system.noise_diagonal();
    let mut residuals = Vec::new();
    let mut f_sup = 0.0f64;
    let mut excluded = 0;
    for &i in nodes {
        let idx = spec.multi_index(i);
        if idx.iter().any(|&j| j < 2 || j + 2 >= r) {
            excluded += 1;
            continue;
        }
        let x = spec.node(i);
        let at = |a: usize, off: isize| {
            let mut j = idx.clone();
            j[a] = (j[a] as isize + off) as usize;
            u.value(spec.flat_index(&j))
        };
        let mut grad = vec![0.0; d];
        let mut trace = 0.0;
        for a in 0..d {
            let h = spec.spacing(a);
            let (m2, m1, c, p1, p2) = (at(a, -2), at(a, -1), at(a, 0), at(a, 1), at(a, 2));
            grad[a] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let second = (-p2 + 16.0 * p1 - 30.0 * c + 16.0 * m1 - m2) / (12.0 * h * h);
            trace += noise[a] * second;
        }
        let ax = system.apply_generator(&x);
        let drift: f64 = ax.iter().zip(&grad).map(|(p, q)| p * q).sum();
        let fx = f.eval(&x);
        f_sup = f_sup.max(fx.abs());
        residuals.push(lambda * u.value(i) - 0.5 * trace - drift - fx);
    }
    if residuals.is_empty() {
        return Err(Error::Parameter("no interior sample nodes".into()));
    }
    let scale = if f_sup > 0.0 { f_sup } else { 1.0 };
    let mut rel: Vec<f64> = residuals.iter().map(|v| v.abs() / scale).collect();
    rel.sort_by(|a, b| a.total_cmp(b));
    let median = if rel.len() % 2 == 1 {
        rel[rel.len() / 2]
    } else {
        0.5 * (rel[rel.len() / 2 - 1] + rel[rel.len() / 2])
    };
    Ok(ResidualStats {
        max_relative: *rel.last().unwrap(),
        median_relative: median,
        evaluated: rel.len(),
        excluded,
        f_sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllability::lyapunov_gramian;
    use crate::operators::{DampedParams, HeatParams};
    use approx::assert_relative_eq;

    fn heat_model() -> SpectrumModel {
        SpectrumModel::cube_dirichlet(1, 1, 4096).unwrap()
    }

    fn heat(gamma: f64, beta: f64) -> Dynamics {
        Dynamics::Heat(HeatParams::new(beta, gamma, 1).unwrap())
    }

    fn fast() -> VLambdaConfig {
        VLambdaConfig {
            order: 6,
            time_nodes: 12,
            ..Default::default()
        }
    }

    #[test]
    fn stationary_variance_matches_long_time_gramian() {
        let m = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.0, 0.3).unwrap());
        let sys = GalerkinSystem::new(&m, &d, 2).unwrap();
        for k in 0..2 {
            let q = lyapunov_gramian(&sys.blocks()[k], 80.0, 1e-12).unwrap();
            let v = stationary_variance(&sys, k);
            assert_relative_eq!(q.get(0, 0), v, max_relative = 1e-8);
            assert_relative_eq!(q.get(1, 1), v, max_relative = 1e-8);
            assert!(q.get(0, 1).abs() < 1e-8 * v);
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_on_cubics() {
        let spec = GridSpec::new(vec![1.0, 2.0], 9, 2, 1).unwrap();
        let cubic = |x: &[f64]| x[0].powi(3) - 2.0 * x[0] * x[1] * x[1] + x[1].powi(3) + 0.5;
        let gf = GridFunction::from_fn(&spec, cubic, |x| vec![x[0], x[1]]);
        let mut out = vec![0.0; 3];
        for i in [0, 7, 40, 80] {
            let x = spec.node(i);
            gf.interpolate(&x, &mut out);
            assert_eq!(out[0], gf.value(i));
        }
        for y in [[0.13, -1.7], [-0.99, 1.99], [0.5, 0.5]] {
            assert!(!gf.interpolate(&y, &mut out));
            assert_relative_eq!(out[0], cubic(&y), epsilon = 1e-12);
            assert_relative_eq!(out[2], y[1], epsilon = 1e-12);
        }
        assert!(gf.interpolate(&[1.5, 0.0], &mut out));
        assert_relative_eq!(out[0], cubic(&[1.0, 0.0]), epsilon = 1e-12);
    }

    #[test]
    fn constant_source_gives_one_over_lambda() {
        let sys = GalerkinSystem::new(&heat_model(), &heat(0.3, 0.2), 2).unwrap();
        let spec = GridSpec::stationary(&sys, 9, 4.0).unwrap();
        let out = apply_v_lambda(&GridFunction::zero(&spec), &ScalarField::constant(1.0), &DriftField::tanh_ridge(1.0), &sys, 7.0, &fast()).unwrap();
        for i in 0..spec.node_count() {
            assert!((out.u.value(i) - 1.0 / 7.0).abs() <= 1e-5 / 7.0 + out.tail_bound);
            assert!(out.u.v_grad(i).iter().all(|g| g.abs() < 1e-9));
        }
    }

    #[test]
    fn zero_drift_decouples_from_u() {
        let sys = GalerkinSystem::new(&heat_model(), &heat(0.3, 0.2), 2).unwrap();
        let spec = GridSpec::stationary(&sys, 9, 4.0).unwrap();
        let g = ScalarField::tanh_ridge(vec![2.0, -1.0], 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = GridFunction::from_smooth(&spec, &sys, &random_smooth(&mut rng, &spec)).unwrap();
        let a = apply_v_lambda(&u, &g, &DriftField::zero(), &sys, 20.0, &fast()).unwrap();
        let b = apply_v_lambda(&GridFunction::zero(&spec), &g, &DriftField::zero(), &sys, 20.0, &fast()).unwrap();
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn affine_difference_matches_literal_difference() {
        let sys = GalerkinSystem::new(&heat_model(), &heat(0.3, 0.2), 2).unwrap();
        let spec = GridSpec::stationary(&sys, 9, 4.0).unwrap();
        let g = ScalarField::tanh_ridge(vec![2.0, -1.0], 0.1);
        let b = DriftField::tanh_ridge(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = GridFunction::from_smooth(&spec, &sys, &random_smooth(&mut rng, &spec)).unwrap();
        let z = GridFunction::from_smooth(&spec, &sys, &random_smooth(&mut rng, &spec)).unwrap();
        let cfg = fast();
        let lit = apply_v_lambda(&u, &g, &b, &sys, 30.0, &cfg)
            .unwrap()
            .u
            .sub(&apply_v_lambda(&z, &g, &b, &sys, 30.0, &cfg).unwrap().u)
            .unwrap();
        let aff = apply_v_lambda(&u.sub(&z).unwrap(), &ScalarField::constant(0.0), &b, &sys, 30.0, &cfg).unwrap().u;
        assert!(lit.sub(&aff).unwrap().c1_norm() < 1e-12 * lit.c1_norm().max(1e-3) + 1e-12);
    }

    #[test]
    fn integrability_error_for_divergent_constants() {
        let m = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.1, 0.6).unwrap());
        assert!(matches!(contraction_constants(&m, &d, 10.0, 8), Err(Error::Integrability { .. })));
        let c = contraction_constants(&heat_model(), &heat(0.3, 0.2), 10.0, 16).unwrap();
        assert!(c.c1.is_finite() && c.c1 > 0.0);
        assert_relative_eq!(c.exponent, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn constants_decay_in_lambda() {
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let c = contraction_constants(&heat_model(), &heat(0.0, 0.0), 2f64.powi(k), 16).unwrap();
            assert!(c.sum() < prev);
            prev = c.sum();
        }
        assert!(prev < 0.2);
    }

    #[test]
    fn heat_c1_matches_direct_oracle() {
        // heat β = γ = 0 on one mode: ‖e^{tA}‖ = e^{−μt}, ‖Γ_t𝒱‖ = e^{−μt}√(2μ/(1−e^{−2μt}))
        let model = heat_model();
        let mu = model.eigenvalue(1).unwrap();
        let lambda = 3.0;
        let c = contraction_constants(&model, &heat(0.0, 0.0), lambda, 1).unwrap();
        let f = |s: f64| {
            let t = s * s;
            let g = (-mu * t).exp() * (2.0 * mu / -(-2.0 * mu * t).exp_m1()).sqrt();
            2.0 * s * (-lambda * t).exp() * (1.0 + (-mu * t).exp() * g)
        };
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut simpson = 0.0;
        for i in 0..n {
            let a = i as f64 * h;
            let fa = if i == 0 { 2.0 } else { f(a) };
            simpson += h / 6.0 * (fa + 4.0 * f(a + 0.5 * h) + f(a + h));
        }
        assert_relative_eq!(c.c1, simpson, max_relative = 1e-8);
        let g1 = (-mu).exp() * (2.0 * mu / -(-2.0 * mu).exp_m1()).sqrt();
        let c2 = (1.0 + (-mu).exp() * g1) * (1.0 / lambda + 1.0 / (lambda + mu));
        assert_relative_eq!(c.c2, c2, max_relative = 1e-9);
    }

    #[test]
    fn lambda0_monotone_in_drift_bound() {
        let m = heat_model();
        let d = heat(0.0, 0.0);
        let l0 = lambda0_search(&m, &d, 0.0, 8).unwrap();
        let l1 = lambda0_search(&m, &d, 1.0, 8).unwrap();
        let l2 = lambda0_search(&m, &d, 2.0, 8).unwrap();
        assert_eq!(l0.lambda0, l1.lambda0);
        assert!(l2.lambda0 >= l1.lambda0);
        assert!(l0.constants.sum() < 0.5);
        let again = lambda0_search(&m, &d, 1.0, 8).unwrap();
        assert_eq!(again.lambda0.to_bits(), l1.lambda0.to_bits());
    }

    #[test]
    fn zero_source_fixed_point_is_zero() {
        let sys = GalerkinSystem::new(&heat_model(), &heat(0.3, 0.2), 2).unwrap();
        let spec = GridSpec::stationary(&sys, 9, 4.0).unwrap();
        let c = contraction_constants(sys.model(), sys.dynamics(), 50.0, 8).unwrap();
        let cfg = PicardConfig {
            v_lambda: fast(),
            ..Default::default()
        };
        let (u, rep) = picard_solve(&spec, &sys, &ScalarField::constant(0.0), &DriftField::tanh_ridge(1.0), &c, None, &cfg).unwrap();
        assert_eq!(u.c1_norm(), 0.0);
        assert!(rep.converged);
    }

    #[test]
    fn manufactured_quadratic_residual() {
        let m = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.0, 0.3).unwrap());
        let sys = GalerkinSystem::new(&m, &d, 1).unwrap();
        let spec = GridSpec::stationary(&sys, 17, 4.0).unwrap();
        // u = xᵀMx + 0.3, so ∇u = 2Mx, ∇²u = 2M
        let mm = [[1.0, 0.4], [0.4, -0.7]];
        let u = GridFunction::from_fn(
            &spec,
            |x| (0..2).map(|i| (0..2).map(|j| x[i] * mm[i][j] * x[j]).sum::<f64>()).sum::<f64>() + 0.3,
            |_| vec![0.0],
        );
        let lambda = 2.5;
        let sys2 = sys.clone();
        let f = ScalarField::new(move |x| {
            let uval = (0..2).map(|i| (0..2).map(|j| x[i] * mm[i][j] * x[j]).sum::<f64>()).sum::<f64>() + 0.3;
            let noise = sys2.noise_diagonal();
            let tr: f64 = (0..2).map(|i| noise[i] * 2.0 * mm[i][i]).sum();
            let ax = sys2.apply_generator(x);
            let grad: Vec<f64> = (0..2).map(|i| 2.0 * (mm[i][0] * x[0] + mm[i][1] * x[1])).collect();
            lambda * uval - 0.5 * tr - ax[0] * grad[0] - ax[1] * grad[1]
        });
        let all: Vec<usize> = (0..spec.node_count()).collect();
        let st = elliptic_residual(&u, &sys, lambda, &f, &all).unwrap();
        assert!(st.max_relative <= 1e-8);
        assert_eq!(st.excluded, spec.node_count() - 13 * 13);
    }
}
