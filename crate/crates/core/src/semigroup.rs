//! The Ornstein–Uhlenbeck semigroup R_n(t)φ(x) = E φ(e^{tA_n}x + W_{A,n}(t))
//! of a Galerkin system, its derivative along 𝒱 and the smoothing bounds.
//!
//! Gaussian expectations are taken in whitened coordinates: y = e^{tA}x + Sz
//! with S = Q_t^{1/2} the symmetric root (block diagonal over modes) and z
//! standard normal. The 𝒱-derivative uses Gaussian integration by parts,
//! ⟨∇_𝒱R(t)φ(x), v⟩ = E[⟨Γ_t𝒱v, z⟩ φ(e^{tA}x + Sz)], Γ_t = Q_t^{−1/2}e^{tA}.

use std::sync::Arc;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::controllability::{gamma_operator_norm, gramian_block_with, GammaVariant, GramianBlock, GramianMethod};
use crate::error::{Error, Result};
use crate::linalg::{norm2, ModeMatrix};
use crate::operators::{semigroup_block, semigroup_operator_norm, Dynamics, GalerkinSystem, SpectrumModel};
use crate::quad::gauss_hermite;

/// Largest state dimension integrated with a tensor rule.
pub const TENSOR_MAX_DIM: usize = 6;
/// Largest per-axis order of a tensor rule.
pub const TENSOR_MAX_ORDER: usize = 16;
/// Number of points of the quasi-Monte-Carlo fallback.
pub const QMC_POINTS: usize = 1 << 16;
const QMC_SHIFTS: usize = 16;

type Eval = dyn Fn(&[f64]) -> f64 + Send + Sync;
type Grad = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A real function on the Galerkin state space.
#[derive(Clone)]
pub struct ScalarField {
    eval: Arc<Eval>,
    gradient: Option<Arc<Grad>>,
    pub lipschitz_hint: Option<f64>,
    pub sup_hint: Option<f64>,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("has_gradient", &self.gradient.is_some())
            .field("lipschitz_hint", &self.lipschitz_hint)
            .field("sup_hint", &self.sup_hint)
            .finish()
    }
}

impl ScalarField {
    pub fn new(eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            gradient: None,
            lipschitz_hint: None,
            sup_hint: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        let mut f = Self::new(move |_| c).with_gradient(|x| vec![0.0; x.len()]);
        f.sup_hint = Some(c.abs());
        f.lipschitz_hint = Some(0.0);
        f
    }

    /// x ↦ ⟨w, x⟩.
    pub fn linear(w: Vec<f64>) -> Self {
        let w2 = w.clone();
        Self::new(move |x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).with_gradient(move |_| w2.clone())
    }

    /// x ↦ tanh(⟨w, x⟩ + b), the bounded smooth test family.
    pub fn tanh_ridge(w: Vec<f64>, b: f64) -> Self {
        let w2 = w.clone();
        let lip = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut f = Self::new(move |x| (x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b).tanh()).with_gradient(move |x| {
            let s: f64 = x.iter().zip(&w2).map(|(a, c)| a * c).sum::<f64>() + b;
            let d = 1.0 - s.tanh().powi(2);
            w2.iter().map(|c| c * d).collect()
        });
        f.sup_hint = Some(1.0);
        f.lipschitz_hint = Some(lip);
        f
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_sup(mut self, sup: f64) -> Self {
        self.sup_hint = Some(sup);
        self
    }

    pub fn with_lipschitz(mut self, lip: f64) -> Self {
        self.lipschitz_hint = Some(lip);
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.gradient.as_ref().map(|g| g(x))
    }
}

/// Tensor Gauss–Hermite rule for N(0, Q_t) in whitened coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub dim: usize,
    pub order: usize,
    /// One-dimensional probabilists' nodes (shared by every axis).
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Symmetric square roots S_k of the Gramian blocks.
    pub transform: Vec<ModeMatrix>,
}

/// Quasi-Monte-Carlo rule: randomly shifted Kronecker lattices mapped through
/// the inverse normal CDF.
#[derive(Clone, Debug, PartialEq)]
pub struct QmcRule {
    pub dim: usize,
    pub points_per_shift: usize,
    pub shifts: Vec<Vec<f64>>,
    pub transform: Vec<ModeMatrix>,
    alpha: Vec<f64>,
}

/// A rule for Gaussian expectations: tensor when within budget, QMC otherwise.
#[derive(Clone, Debug, PartialEq)]
pub enum GaussianRule {
    Tensor(QuadratureRule),
    Qmc(QmcRule),
}

/// Value of an expectation and its standard error (zero for tensor rules).
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

fn symmetric_roots(grams: &[GramianBlock]) -> Result<(usize, Vec<ModeMatrix>)> {
    if grams.is_empty() {
        return Err(Error::Parameter("at least one Gramian block is required".into()));
    }
    let t = grams[0].t;
    if grams.iter().any(|g| g.t != t) {
        return Err(Error::Parameter("all Gramian blocks must share the same t".into()));
    }
    let dim = grams.iter().map(|g| g.q().dim()).sum();
    Ok((dim, grams.iter().map(|g| g.factor().sqrt()).collect()))
}

/// Tensor rule of per-axis order `order` for the Gaussian with block
/// covariance given by `grams`.
pub fn whitened_quadrature(grams: &[GramianBlock], order: usize) -> Result<QuadratureRule> {
    let (dim, transform) = symmetric_roots(grams)?;
    if dim > TENSOR_MAX_DIM || order > TENSOR_MAX_ORDER || order == 0 {
        return Err(Error::Capacity(format!(
            "tensor rule of dimension {dim} and order {order} exceeds the budget (dim <= {TENSOR_MAX_DIM}, 1 <= q <= {TENSOR_MAX_ORDER})"
        )));
    }
    let (nodes, weights) = gauss_hermite(order);
    Ok(QuadratureRule {
        dim,
        order,
        nodes,
        weights,
        transform,
    })
}

/// QMC rule with [`QMC_POINTS`] points split over independent random shifts.
pub fn qmc_rule(grams: &[GramianBlock], seed: u64) -> Result<QmcRule> {
    let (dim, transform) = symmetric_roots(grams)?;
    // generalized golden ratio: φ_d is the root of x^{d+1} = x + 1
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alpha = (1..=dim).map(|k| (1.0 / phi.powi(k as i32)).fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts = (0..QMC_SHIFTS).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
    Ok(QmcRule {
        dim,
        points_per_shift: QMC_POINTS / QMC_SHIFTS,
        shifts,
        transform,
        alpha,
    })
}

/// Tensor rule when (dim, order) fit the budget, QMC otherwise.
pub fn gaussian_rule(grams: &[GramianBlock], order: usize, seed: u64) -> Result<GaussianRule> {
    match whitened_quadrature(grams, order) {
        Ok(r) => Ok(GaussianRule::Tensor(r)),
        Err(Error::Capacity(_)) => Ok(GaussianRule::Qmc(qmc_rule(grams, seed)?)),
        Err(e) => Err(e),
    }
}

impl QuadratureRule {
    pub fn node_count(&self) -> usize {
        self.order.pow(self.dim as u32)
    }

    /// Σ_i w_i f(z_i) for a vector-valued integrand of length `k`.
    ///
    /// The first axis is split across threads; partial sums are combined in
    /// index order, so the result does not depend on the thread count.
    pub fn integrate<F>(&self, k: usize, f: F) -> Vec<f64>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let q = self.order;
        let d = self.dim;
        let partials: Vec<Vec<f64>> = (0..q)
            .into_par_iter()
            .map(|first| {
                let mut acc = vec![0.0; k];
                let mut out = vec![0.0; k];
                let mut idx = vec![0usize; d];
                idx[0] = first;
                let mut z = vec![0.0; d];
                loop {
                    let mut w = 1.0;
                    for a in 0..d {
                        z[a] = self.nodes[idx[a]];
                        w *= self.weights[idx[a]];
                    }
                    out.iter_mut().for_each(|o| *o = 0.0);
                    f(&z, &mut out);
                    for j in 0..k {
                        acc[j] += w * out[j];
                    }
                    // odometer over axes 1..d
                    let mut a = 1;
                    while a < d {
                        idx[a] += 1;
                        if idx[a] < q {
                            break;
                        }
                        idx[a] = 0;
                        a += 1;
                    }
                    if a >= d {
                        break;
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; k];
        for p in partials {
            for j in 0..k {
                total[j] += p[j];
            }
        }
        total
    }
}

impl QmcRule {
    pub fn integrate<F>(&self, k: usize, f: F) -> Estimate
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let normal = Normal::standard();
        let per_shift: Vec<Vec<f64>> = self
            .shifts
            .par_iter()
            .map(|shift| {
                let mut acc = vec![0.0; k];
                let mut out = vec![0.0; k];
                let mut z = vec![0.0; self.dim];
                for i in 0..self.points_per_shift {
                    for a in 0..self.dim {
                        let u = (shift[a] + (i as f64 + 1.0) * self.alpha[a]).fract();
                        z[a] = normal.inverse_cdf(u.clamp(1e-16, 1.0 - 1e-16));
                    }
                    out.iter_mut().for_each(|o| *o = 0.0);
                    f(&z, &mut out);
                    for j in 0..k {
                        acc[j] += out[j];
                    }
                }
                acc.iter().map(|a| a / self.points_per_shift as f64).collect()
            })
            .collect();
        let s = per_shift.len() as f64;
        let mut values = vec![0.0; k];
        for p in &per_shift {
            for j in 0..k {
                values[j] += p[j] / s;
            }
        }
        let std_errors = (0..k)
            .map(|j| {
                let var = per_shift.iter().map(|p| (p[j] - values[j]).powi(2)).sum::<f64>() / (s - 1.0);
                (var / s).sqrt()
            })
            .collect();
        Estimate { values, std_errors }
    }
}

impl GaussianRule {
    pub fn dim(&self) -> usize {
        match self {
            GaussianRule::Tensor(r) => r.dim,
            GaussianRule::Qmc(r) => r.dim,
        }
    }

    fn transform(&self) -> &[ModeMatrix] {
        match self {
            GaussianRule::Tensor(r) => &r.transform,
            GaussianRule::Qmc(r) => &r.transform,
        }
    }

    pub fn integrate<F>(&self, k: usize, f: F) -> Estimate
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        match self {
            GaussianRule::Tensor(r) => Estimate {
                values: r.integrate(k, f),
                std_errors: vec![0.0; k],
            },
            GaussianRule::Qmc(r) => r.integrate(k, f),
        }
    }
}

/// Per-t data of R_n(t): mean maps, Gramians and the whitened drift
/// directions γ_k = Q^{−1/2}e^{ta}𝒱e_k.
#[derive(Clone, Debug)]
pub struct OuKernel {
    system: GalerkinSystem,
    pub t: f64,
    means: Vec<ModeMatrix>,
    grams: Vec<GramianBlock>,
    gamma_v: Vec<Vector2<f64>>,
}

impl OuKernel {
    pub fn new(system: &GalerkinSystem, t: f64, method: GramianMethod) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Parameter(format!("t must be positive, got {t}")));
        }
        let mut means = Vec::new();
        let mut grams = Vec::new();
        let mut gamma_v = Vec::new();
        for b in system.blocks() {
            let e = semigroup_block(b, t);
            let g = gramian_block_with(b, t, method)?;
            gamma_v.push(g.inv_sqrt_apply(&e.apply(&b.v))?);
            means.push(e);
            grams.push(g);
        }
        Ok(Self {
            system: system.clone(),
            t,
            means,
            grams,
            gamma_v,
        })
    }

    pub fn system(&self) -> &GalerkinSystem {
        &self.system
    }

    pub fn grams(&self) -> &[GramianBlock] {
        &self.grams
    }

    /// e^{tA_n}x.
    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (k, e) in self.means.iter().enumerate() {
            self.system.store(k, &e.apply(&self.system.load(k, x)), &mut out);
        }
        out
    }

    /// Whitened direction Γ_t𝒱v as a state-space vector.
    pub fn gamma(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.system.state_dim()];
        for (k, g) in self.gamma_v.iter().enumerate() {
            self.system.store(k, &(g * v[k]), &mut out);
        }
        out
    }

    /// ‖Γ_t𝒱e_k‖ for each active mode.
    pub fn gamma_v_norms(&self) -> Vec<f64> {
        self.gamma_v.iter().map(norm2).collect()
    }

    /// ‖Γ_t𝒱‖ on the active modes.
    pub fn gamma_v_operator_norm(&self) -> f64 {
        self.gamma_v_norms().into_iter().fold(0.0, f64::max)
    }

    fn point(&self, mean: &[f64], transform: &[ModeMatrix], z: &[f64], y: &mut [f64]) {
        for (k, s) in transform.iter().enumerate() {
            let sz = s.apply(&self.system.load(k, z));
            let o = self.system.offset(k);
            y[o] = mean[o] + sz[0];
            if self.system.block_dim() == 2 {
                y[o + 1] = mean[o + 1] + sz[1];
            }
        }
    }
}

fn check_rule(kernel: &OuKernel, rule: &GaussianRule) -> Result<()> {
    if rule.dim() != kernel.system.state_dim() {
        return Err(Error::Parameter(format!(
            "rule dimension {} does not match state dimension {}",
            rule.dim(),
            kernel.system.state_dim()
        )));
    }
    Ok(())
}

/// R_n(t)φ(x).
pub fn ou_apply(phi: &ScalarField, kernel: &OuKernel, x: &[f64], rule: &GaussianRule) -> Result<f64> {
    Ok(ou_apply_estimate(phi, kernel, x, rule)?.values[0])
}

pub fn ou_apply_estimate(phi: &ScalarField, kernel: &OuKernel, x: &[f64], rule: &GaussianRule) -> Result<Estimate> {
    check_rule(kernel, rule)?;
    let mean = kernel.mean(x);
    let tr = rule.transform();
    Ok(rule.integrate(1, |z, out| {
        let mut y = vec![0.0; z.len()];
        kernel.point(&mean, tr, z, &mut y);
        out[0] = phi.eval(&y);
    }))
}

/// ⟨∇_𝒱R_n(t)φ(x), v⟩ by Gaussian integration by parts.
pub fn ou_v_derivative(phi: &ScalarField, kernel: &OuKernel, x: &[f64], v: &[f64], rule: &GaussianRule) -> Result<f64> {
    check_rule(kernel, rule)?;
    let mean = kernel.mean(x);
    let gamma = kernel.gamma(v);
    let tr = rule.transform();
    Ok(rule
        .integrate(1, |z, out| {
            let mut y = vec![0.0; z.len()];
            kernel.point(&mean, tr, z, &mut y);
            let g: f64 = gamma.iter().zip(z).map(|(a, b)| a * b).sum();
            out[0] = g * phi.eval(&y);
        })
        .values[0])
}

/// R_n(t)φ(x) together with its full 𝒱-gradient (one entry per active mode),
/// from a single pass over the rule.
pub fn ou_value_and_v_gradient(phi: &ScalarField, kernel: &OuKernel, x: &[f64], rule: &GaussianRule) -> Result<(f64, Vec<f64>)> {
    check_rule(kernel, rule)?;
    let n = kernel.system.n_modes();
    let mean = kernel.mean(x);
    let tr = rule.transform();
    let est = rule.integrate(1 + n, |z, out| {
        let mut y = vec![0.0; z.len()];
        kernel.point(&mean, tr, z, &mut y);
        let f = phi.eval(&y);
        out[0] = f;
        for (k, g) in kernel.gamma_v.iter().enumerate() {
            let zk = kernel.system.load(k, z);
            out[1 + k] = g.dot(&zk) * f;
        }
    });
    let mut v = est.values;
    let grad = v.split_off(1);
    Ok((v[0], grad))
}

/// ⟨∇φ(x), 𝒱v⟩ = ⟨𝒱*∇φ(x), v⟩ for a differentiable φ.
pub fn v_gradient_of_smooth(grad_phi: impl Fn(&[f64]) -> Vec<f64>, system: &GalerkinSystem, x: &[f64], v: &[f64]) -> f64 {
    let g = grad_phi(x);
    system.drift_adjoint(&g).iter().zip(v).map(|(a, b)| a * b).sum()
}

/// The factors of 1 + ‖e^{tA*}‖‖Γ_t𝒱‖ on the first `n_active` modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchauderConstant {
    pub semigroup_norm: f64,
    pub gamma_v_norm: f64,
    pub value: f64,
    /// The semigroup-norm sup was still decreasing over its last modes.
    pub monotone_tail: bool,
}

pub fn schauder_constant(model: &SpectrumModel, dynamics: &Dynamics, t: f64, n_active: usize) -> Result<SchauderConstant> {
    let e = semigroup_operator_norm(model, dynamics, t, n_active)?;
    let g = gamma_operator_norm(model, dynamics, t, n_active, GammaVariant::WithDrift, GramianMethod::default())?;
    Ok(SchauderConstant {
        semigroup_norm: e.value,
        gamma_v_norm: g.value,
        value: 1.0 + e.value * g.value,
        monotone_tail: e.monotone_tail,
    })
}

/// sup|R(t)φ| + sup‖∇_𝒱R(t)φ‖ over the given points.
pub fn measured_c1_norm(phi: &ScalarField, kernel: &OuKernel, points: &[Vec<f64>], rule: &GaussianRule) -> Result<f64> {
    let mut sup_value = 0.0f64;
    let mut sup_grad = 0.0f64;
    for x in points {
        let (v, g) = ou_value_and_v_gradient(phi, kernel, x, rule)?;
        sup_value = sup_value.max(v.abs());
        sup_grad = sup_grad.max(g.iter().map(|c| c * c).sum::<f64>().sqrt());
    }
    Ok(sup_value + sup_grad)
}

/// A tensor rule fused with one kernel: the mean map as a dense matrix, the
/// offsets Sz_i, the weights and the pairings ⟨Γ_t𝒱e_k, z_i⟩ stored flat.
/// Used when the same (t, rule) is applied at many base points.
#[derive(Clone, Debug)]
pub struct OuStencil {
    dim: usize,
    n_modes: usize,
    mean: Vec<f64>,
    offsets: Vec<f64>,
    weights: Vec<f64>,
    pairings: Vec<f64>,
}

impl OuStencil {
    pub fn new(kernel: &OuKernel, rule: &QuadratureRule) -> Result<Self> {
        let sys = &kernel.system;
        let dim = sys.state_dim();
        if rule.dim != dim {
            return Err(Error::Parameter(format!("rule dimension {} does not match state dimension {dim}", rule.dim)));
        }
        let n_modes = sys.n_modes();
        let mut mean = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let col = kernel.mean(&e);
            for i in 0..dim {
                mean[i * dim + j] = col[i];
            }
        }
        let count = rule.node_count();
        let mut offsets = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        let mut pairings = Vec::with_capacity(count * n_modes);
        let zero = vec![0.0; dim];
        let mut idx = vec![0usize; dim];
        let mut z = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        for _ in 0..count {
            let mut w = 1.0;
            for a in 0..dim {
                z[a] = rule.nodes[idx[a]];
                w *= rule.weights[idx[a]];
            }
            kernel.point(&zero, &rule.transform, &z, &mut y);
            offsets.extend_from_slice(&y);
            weights.push(w);
            for (k, g) in kernel.gamma_v.iter().enumerate() {
                pairings.push(g.dot(&sys.load(k, &z)));
            }
            for a in 0..dim {
                idx[a] += 1;
                if idx[a] < rule.order {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self {
            dim,
            n_modes,
            mean,
            offsets,
            weights,
            pairings,
        })
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    /// R(t)f(x) into `value` and ∇_𝒱R(t)f(x) into `grad` (one entry per mode).
    pub fn apply(&self, x: &[f64], mut f: impl FnMut(&[f64]) -> f64, value: &mut f64, grad: &mut [f64]) {
        let d = self.dim;
        let mut m = [0.0; 2 * TENSOR_MAX_DIM];
        for i in 0..d {
            m[i] = (0..d).map(|j| self.mean[i * d + j] * x[j]).sum();
        }
        let mut y = [0.0; 2 * TENSOR_MAX_DIM];
        *value = 0.0;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, w) in self.weights.iter().enumerate() {
            let off = &self.offsets[i * d..(i + 1) * d];
            for a in 0..d {
                y[a] = m[a] + off[a];
            }
            let fw = w * f(&y[..d]);
            *value += fw;
            let p = &self.pairings[i * self.n_modes..(i + 1) * self.n_modes];
            for k in 0..self.n_modes {
                grad[k] += p[k] * fw;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{DampedParams, HeatParams};
    use approx::assert_relative_eq;

    fn heat_system(n: usize) -> GalerkinSystem {
        let m = SpectrumModel::cube_dirichlet(1, 1, 64).unwrap();
        GalerkinSystem::new(&m, &Dynamics::Heat(HeatParams::new(0.0, 0.0, 1).unwrap()), n).unwrap()
    }

    fn damped_system(n: usize) -> GalerkinSystem {
        let m = SpectrumModel::power_law(1.0, 2.0).unwrap();
        GalerkinSystem::new(&m, &Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.2, 0.3).unwrap()), n).unwrap()
    }

    fn tensor(kernel: &OuKernel, q: usize) -> GaussianRule {
        GaussianRule::Tensor(whitened_quadrature(kernel.grams(), q).unwrap())
    }

    #[test]
    fn one_dimensional_rule() {
        let k = OuKernel::new(&heat_system(1), 0.5, GramianMethod::default()).unwrap();
        let r = whitened_quadrature(k.grams(), 3).unwrap();
        assert_relative_eq!(r.nodes[0], -(3f64.sqrt()), epsilon = 1e-13);
        assert_relative_eq!(r.weights[1], 2.0 / 3.0, epsilon = 1e-13);
        assert_relative_eq!(r.weights[0], 1.0 / 6.0, epsilon = 1e-13);
        assert_relative_eq!(r.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let m2 = r.integrate(1, |z, o| o[0] = z[0] * z[0])[0];
        assert_relative_eq!(m2, 1.0, epsilon = 1e-13);
        let r4 = whitened_quadrature(k.grams(), 4).unwrap();
        assert_relative_eq!(r4.integrate(1, |z, o| o[0] = z[0].powi(6))[0], 15.0, epsilon = 1e-11);
    }

    #[test]
    fn budget_is_enforced_and_qmc_takes_over() {
        let k = OuKernel::new(&damped_system(4), 0.5, GramianMethod::default()).unwrap();
        assert!(matches!(whitened_quadrature(k.grams(), 8), Err(Error::Capacity(_))));
        let rule = gaussian_rule(k.grams(), 8, 7).unwrap();
        assert!(matches!(rule, GaussianRule::Qmc(_)));
        let est = rule.integrate(2, |z, o| {
            o[0] = 1.0;
            o[1] = z.iter().map(|v| v * v).sum();
        });
        assert_relative_eq!(est.values[0], 1.0, epsilon = 1e-14);
        assert!((est.values[1] - 8.0).abs() < 5.0 * est.std_errors[1].max(1e-3));
    }

    #[test]
    fn apply_examples() {
        let sys = damped_system(2);
        let k = OuKernel::new(&sys, 0.3, GramianMethod::default()).unwrap();
        let rule = tensor(&k, 6);
        let x = vec![0.4, -0.2, 1.0, 0.3];
        assert_relative_eq!(ou_apply(&ScalarField::constant(1.0), &k, &x, &rule).unwrap(), 1.0, epsilon = 1e-13);
        let w = vec![0.3, 1.0, -0.5, 2.0];
        let mean = k.mean(&x);
        let mw: f64 = mean.iter().zip(&w).map(|(a, b)| a * b).sum();
        let lin = ou_apply(&ScalarField::linear(w.clone()), &k, &x, &rule).unwrap();
        assert_relative_eq!(lin, mw, epsilon = 1e-12);
        // second moment: ⟨e^{tA}x, w⟩² + wᵀQ_t w
        let w2 = w.clone();
        let sq = ScalarField::new(move |y| y.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>().powi(2));
        let mut qw = 0.0;
        for (kk, g) in k.grams().iter().enumerate() {
            let wk = Vector2::new(w[2 * kk], w[2 * kk + 1]);
            qw += wk.dot(&g.q().apply(&wk));
        }
        assert_relative_eq!(ou_apply(&sq, &k, &x, &rule).unwrap(), mw * mw + qw, max_relative = 1e-11);
    }

    #[test]
    fn whitening_reproduces_covariance() {
        let sys = damped_system(2);
        let k = OuKernel::new(&sys, 0.2, GramianMethod::default()).unwrap();
        let GaussianRule::Tensor(rule) = tensor(&k, 3) else { unreachable!() };
        let cov = rule.integrate(16, |z, o| {
            let mut y = vec![0.0; 4];
            k.point(&[0.0; 4], &rule.transform, z, &mut y);
            for i in 0..4 {
                for j in 0..4 {
                    o[4 * i + j] = y[i] * y[j];
                }
            }
        });
        for (kk, g) in k.grams().iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    let v = cov[4 * (2 * kk + i) + 2 * kk + j];
                    assert!((v - g.q().get(i, j)).abs() <= 1e-12 * g.q().get(1, 1).abs().max(1e-300));
                }
            }
        }
        assert!(cov[2].abs() < 1e-15);
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let sys = damped_system(1);
        let k = OuKernel::new(&sys, 0.1, GramianMethod::default()).unwrap();
        let rule = tensor(&k, 10);
        let d = ou_v_derivative(&ScalarField::constant(3.0), &k, &[0.1, 0.2], &[1.0], &rule).unwrap();
        assert!(d.abs() < 1e-13);
    }

    #[test]
    fn derivative_matches_polynomial_oracle() {
        // φ(y) = ⟨y,w⟩³: R(t)φ(x) = m³ + 3m·σ² with m = ⟨e^{tA}x,w⟩, σ² = wᵀQw,
        // so ∂ along 𝒱v is (3m² + 3σ²)·⟨e^{tA}𝒱v, w⟩
        let sys = damped_system(2);
        let k = OuKernel::new(&sys, 0.25, GramianMethod::default()).unwrap();
        let rule = tensor(&k, 3);
        let w = vec![0.5, -1.0, 0.7, 0.2];
        let x = vec![0.3, 0.1, -0.4, 0.6];
        let v = vec![1.0, -2.0];
        let w2 = w.clone();
        let phi = ScalarField::new(move |y| y.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>().powi(3));
        let m: f64 = k.mean(&x).iter().zip(&w).map(|(a, b)| a * b).sum();
        let mut s2 = 0.0;
        for (kk, g) in k.grams().iter().enumerate() {
            let wk = Vector2::new(w[2 * kk], w[2 * kk + 1]);
            s2 += wk.dot(&g.q().apply(&wk));
        }
        let dir = k.mean(&sys.drift_embed(&v));
        let dm: f64 = dir.iter().zip(&w).map(|(a, b)| a * b).sum();
        let exact = (3.0 * m * m + 3.0 * s2) * dm;
        let got = ou_v_derivative(&phi, &k, &x, &v, &rule).unwrap();
        assert_relative_eq!(got, exact, max_relative = 1e-11);
    }

    #[test]
    fn semigroup_property_on_polynomials() {
        let sys = damped_system(2);
        let w = vec![0.5, -1.0, 0.7, 0.2];
        let w2 = w.clone();
        let phi = ScalarField::new(move |y| {
            let s: f64 = y.iter().zip(&w2).map(|(a, b)| a * b).sum();
            s.powi(4) - 2.0 * s * s + y[0]
        });
        let (t, s) = (0.2, 0.15);
        let ks = OuKernel::new(&sys, s, GramianMethod::default()).unwrap();
        let kt = OuKernel::new(&sys, t, GramianMethod::default()).unwrap();
        let kts = OuKernel::new(&sys, t + s, GramianMethod::default()).unwrap();
        let rs = tensor(&ks, 10);
        let rt = tensor(&kt, 10);
        let rts = tensor(&kts, 10);
        let inner = {
            let phi = phi.clone();
            let ks = ks.clone();
            let rs = rs.clone();
            ScalarField::new(move |y| ou_apply(&phi, &ks, y, &rs).unwrap())
        };
        let x = vec![0.3, 0.1, -0.4, 0.6];
        let lhs = ou_apply(&phi, &kts, &x, &rts).unwrap();
        let rhs = ou_apply(&inner, &kt, &x, &rt).unwrap();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0));
    }

    #[test]
    fn smooth_gradient_pairing() {
        let sys = damped_system(2);
        let w = vec![0.5, -1.0, 0.7, 0.2];
        let phi = ScalarField::linear(w.clone());
        let v = vec![2.0, 1.0];
        let got = v_gradient_of_smooth(|x| phi.gradient(x).unwrap(), &sys, &[0.0; 4], &v);
        let vv = sys.drift_embed(&v);
        let exact: f64 = vv.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert_relative_eq!(got, exact, epsilon = 1e-14);
        let heat = heat_system(3);
        let g = v_gradient_of_smooth(|_| vec![1.0, 2.0, 3.0], &heat, &[0.0; 3], &[1.0, 1.0, 1.0]);
        assert_relative_eq!(g, 6.0, epsilon = 1e-14);
    }

    #[test]
    fn small_time_derivative_approaches_smooth_gradient() {
        let sys = heat_system(1);
        let phi = ScalarField::tanh_ridge(vec![1.3], 0.2);
        let k = OuKernel::new(&sys, 1e-6, GramianMethod::default()).unwrap();
        let rule = tensor(&k, 16);
        let x = [0.4];
        let d = ou_v_derivative(&phi, &k, &x, &[1.0], &rule).unwrap();
        let s = v_gradient_of_smooth(|y| phi.gradient(y).unwrap(), &sys, &x, &[1.0]);
        assert!((d - s).abs() <= 1e-3 * s.abs());
    }

    fn random_tanh(rng: &mut ChaCha8Rng, dim: usize) -> ScalarField {
        let w = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        ScalarField::tanh_ridge(w, rng.random_range(-0.5..0.5))
    }

    #[test]
    fn derivative_matches_central_differences_and_stays_bounded() {
        let sys = damped_system(2);
        let k = OuKernel::new(&sys, 0.2, GramianMethod::default()).unwrap();
        let rule = tensor(&k, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let phi = random_tanh(&mut rng, 4);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let d = ou_v_derivative(&phi, &k, &x, &v, &rule).unwrap();
            let h = sys.drift_embed(&v);
            let eps = 1e-4;
            let xp: Vec<f64> = x.iter().zip(&h).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&h).map(|(a, b)| a - eps * b).collect();
            let fd = (ou_apply(&phi, &k, &xp, &rule).unwrap() - ou_apply(&phi, &k, &xm, &rule).unwrap()) / (2.0 * eps);
            assert!((d - fd).abs() <= 1e-4 * d.abs().max(1e-3), "{d} vs {fd}");
            let gv: f64 = k.gamma(&v).iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!(d.abs() <= gv);
        }
    }

    #[test]
    fn measured_c1_norm_below_schauder_bound() {
        let m = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.2, 0.3).unwrap());
        let sys = GalerkinSystem::new(&m, &d, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &[0.05, 0.2, 0.5] {
            let k = OuKernel::new(&sys, t, GramianMethod::default()).unwrap();
            let rule = tensor(&k, 8);
            let bound = schauder_constant(&m, &d, t, 2).unwrap().value;
            let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            for _ in 0..5 {
                let phi = random_tanh(&mut rng, 4);
                assert!(measured_c1_norm(&phi, &k, &pts, &rule).unwrap() <= bound);
            }
        }
    }

    #[test]
    fn stencil_agrees_with_direct_evaluation() {
        let sys = damped_system(2);
        let k = OuKernel::new(&sys, 0.3, GramianMethod::default()).unwrap();
        let GaussianRule::Tensor(r) = tensor(&k, 5) else { unreachable!() };
        let st = OuStencil::new(&k, &r).unwrap();
        let phi = ScalarField::tanh_ridge(vec![0.4, -1.0, 0.3, 0.9], 0.1);
        let x = vec![0.2, 0.5, -0.3, 0.1];
        let (v, g) = ou_value_and_v_gradient(&phi, &k, &x, &GaussianRule::Tensor(r)).unwrap();
        let mut sv = 0.0;
        let mut sg = vec![0.0; 2];
        st.apply(&x, |y| phi.eval(y), &mut sv, &mut sg);
        assert_relative_eq!(sv, v, epsilon = 1e-13);
        assert_relative_eq!(sg[0], g[0], epsilon = 1e-13);
        assert_relative_eq!(sg[1], g[1], epsilon = 1e-13);
    }

    #[test]
    fn schauder_constant_limits() {
        let m = SpectrumModel::cube_dirichlet(1, 1, 64).unwrap();
        let d = Dynamics::Heat(HeatParams::new(0.0, 0.0, 1).unwrap());
        let c = schauder_constant(&m, &d, 40.0, 4).unwrap();
        assert!(c.value > 1.0 && c.value < 1.0 + 1e-6);
        let c = schauder_constant(&m, &d, 1e-3, 16).unwrap();
        assert!(c.value > 10.0);
    }
}
