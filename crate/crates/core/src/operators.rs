//! Spectral data of Λ, the per-mode blocks of the damped and heat generators,
//! their exponentials and eigen-expansions.
//!
//! Coordinates are always orthonormal: mode `n` of the damped system is the
//! pair (x₁, x₂) of coefficients along (e_n/‖e_n‖, 0) and (0, e_n/‖e_n‖).
//! The [`NormProfile`] of a spectrum only matters for reproducing the
//! coefficient asymptotics in [`coefficient_growth`].

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::ModeMatrix;

/// Relative distance between ρ² and 4μ^{1−2α} below which a damped mode is
/// declared resonant.
pub const RESONANCE_TOL: f64 = 1e-9;

/// Convention for ‖e_n‖_U.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormProfile {
    Orthonormal,
    /// ‖e_n‖ = μ_n^{−1/2}, the normalization used by the classical
    /// eigenvector formulas for damped operators.
    MuInverseSqrt,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpectrumKind {
    /// μ_n = c·n^δ.
    PowerLaw { c: f64, delta: f64 },
    /// n-th smallest (¼Σmᵢ²)^k over m ∈ ℕ^d: eigenvalues of (−Δ)^k with
    /// Dirichlet conditions on [0, 2π]^d.
    CubeDirichlet { dim: usize, power: u32 },
}

/// Generator of the eigenvalues μ_n of Λ.
#[derive(Clone, Debug)]
pub struct SpectrumModel {
    kind: SpectrumKind,
    norm_profile: NormProfile,
    table: Option<Arc<Vec<f64>>>,
}

impl PartialEq for SpectrumModel {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.norm_profile == other.norm_profile && self.capacity() == other.capacity()
    }
}

/// Default number of enumerated cube eigenvalues.
pub const DEFAULT_CUBE_CAPACITY: usize = 1 << 16;

impl SpectrumModel {
    pub fn power_law(c: f64, delta: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Parameter(format!("power-law scale c must be positive, got {c}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Parameter(format!("power-law exponent delta must be positive, got {delta}")));
        }
        Ok(Self {
            kind: SpectrumKind::PowerLaw { c, delta },
            norm_profile: NormProfile::Orthonormal,
            table: None,
        })
    }

    /// Enumerates the first `capacity` eigenvalues of (−Δ)^power on the cube.
    pub fn cube_dirichlet(dim: usize, power: u32, capacity: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("cube dimension must be >= 1".into()));
        }
        if !(power == 1 || power == 2) {
            return Err(Error::Parameter(format!("cube power must be 1 or 2, got {power}")));
        }
        if capacity == 0 {
            return Err(Error::Parameter("cube capacity must be >= 1".into()));
        }
        let sums = smallest_square_sums(dim, capacity);
        let table = sums.into_iter().map(|s| (s as f64 / 4.0).powi(power as i32)).collect();
        Ok(Self {
            kind: SpectrumKind::CubeDirichlet { dim, power },
            norm_profile: NormProfile::Orthonormal,
            table: Some(Arc::new(table)),
        })
    }

    pub fn with_norm_profile(mut self, profile: NormProfile) -> Self {
        self.norm_profile = profile;
        self
    }

    pub fn kind(&self) -> &SpectrumKind {
        &self.kind
    }

    pub fn norm_profile(&self) -> NormProfile {
        self.norm_profile
    }

    /// Number of available eigenvalues (unbounded for power laws).
    pub fn capacity(&self) -> Option<usize> {
        self.table.as_ref().map(|t| t.len())
    }

    /// μ_n for n ≥ 1.
    pub fn eigenvalue(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Parameter("mode indices start at 1".into()));
        }
        match (&self.kind, &self.table) {
            (SpectrumKind::PowerLaw { c, delta }, _) => Ok(c * (n as f64).powf(*delta)),
            (SpectrumKind::CubeDirichlet { .. }, Some(table)) => table.get(n - 1).copied().ok_or_else(|| {
                Error::Capacity(format!("cube spectrum enumerated {} modes, mode {n} requested", table.len()))
            }),
            (SpectrumKind::CubeDirichlet { .. }, None) => unreachable!("cube spectra always carry a table"),
        }
    }

    pub fn eigenvalues(&self, n_max: usize) -> Result<Vec<f64>> {
        (1..=n_max).map(|n| self.eigenvalue(n)).collect()
    }

    /// ‖e_n‖_U under the model's norm profile.
    pub fn basis_norm(&self, n: usize) -> Result<f64> {
        Ok(match self.norm_profile {
            NormProfile::Orthonormal => 1.0,
            NormProfile::MuInverseSqrt => self.eigenvalue(n)?.powf(-0.5),
        })
    }

    /// Asymptotic growth exponent δ with μ_n ≍ n^δ.
    pub fn growth_exponent(&self) -> f64 {
        match self.kind {
            SpectrumKind::PowerLaw { delta, .. } => delta,
            SpectrumKind::CubeDirichlet { dim, power } => 2.0 * power as f64 / dim as f64,
        }
    }
}

/// Free-function form of [`SpectrumModel::eigenvalue`].
pub fn spectrum_eigenvalue(model: &SpectrumModel, n: usize) -> Result<f64> {
    model.eigenvalue(n)
}

/// The `count` smallest values of Σmᵢ² over mᵢ ≥ 1, ties broken by the
/// lexicographic order of the multi-index.
fn smallest_square_sums(dim: usize, count: usize) -> Vec<u64> {
    let mut radius_sq: u64 = dim as u64 + 3;
    loop {
        let mut found: Vec<(u64, Vec<u32>)> = Vec::new();
        let mut index = vec![1u32; dim];
        enumerate_ball(dim, radius_sq, 0, 0, &mut index, &mut found);
        if found.len() >= count {
            found.sort();
            found.truncate(count);
            return found.into_iter().map(|(s, _)| s).collect();
        }
        radius_sq *= 2;
    }
}

fn enumerate_ball(dim: usize, limit: u64, axis: usize, partial: u64, index: &mut Vec<u32>, out: &mut Vec<(u64, Vec<u32>)>) {
    if axis == dim {
        out.push((partial, index.clone()));
        return;
    }
    let remaining_min = (dim - axis - 1) as u64;
    let mut m: u64 = 1;
    while partial + m * m + remaining_min <= limit {
        index[axis] = m as u32;
        enumerate_ball(dim, limit, axis + 1, partial + m * m, index, out);
        m += 1;
    }
}

/// Which branch of the α-dependent formulas applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DampingBranch {
    /// α ∈ (0, ½]
    Low,
    /// α ∈ [½, 1)
    High,
}

/// Parameters of the damped equation ÿ = −Λy − ρΛ^α ẏ + Λ^{−β}B + Λ^{−γ}Ẇ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DampedParams {
    pub alpha: f64,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Branch used when α = ½ exactly (both formulas agree there).
    pub half_branch: DampingBranch,
}

impl DampedParams {
    pub fn new(alpha: f64, rho: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = Self {
            alpha,
            rho,
            beta,
            gamma,
            half_branch: DampingBranch::Low,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Parameter(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta and gamma must be nonnegative, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    pub fn branch(&self) -> DampingBranch {
        if self.alpha < 0.5 {
            DampingBranch::Low
        } else if self.alpha > 0.5 {
            DampingBranch::High
        } else {
            self.half_branch
        }
    }

    /// The exponent that converts (γ−β) into a time rate: α on the low
    /// branch, 1−α on the high one.
    pub fn rate_denominator(&self) -> f64 {
        match self.branch() {
            DampingBranch::Low => self.alpha,
            DampingBranch::High => 1.0 - self.alpha,
        }
    }
}

/// Parameters of dX = ΔX dt + (−Δ)^{−β}B dt + (−Δ)^{−γ}dW.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatParams {
    pub beta: f64,
    pub gamma: f64,
    pub dim: usize,
}

impl HeatParams {
    pub fn new(beta: f64, gamma: f64, dim: usize) -> Result<Self> {
        let p = Self { beta, gamma, dim };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta and gamma must be nonnegative, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        if self.dim == 0 {
            return Err(Error::Parameter("spatial dimension must be >= 1".into()));
        }
        Ok(())
    }
}

/// The linear part of the equation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dynamics {
    Heat(HeatParams),
    Damped(DampedParams),
}

impl Dynamics {
    pub fn beta(&self) -> f64 {
        match self {
            Dynamics::Heat(p) => p.beta,
            Dynamics::Damped(p) => p.beta,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Dynamics::Heat(p) => p.gamma,
            Dynamics::Damped(p) => p.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dynamics::Heat(p) => p.validate(),
            Dynamics::Damped(p) => p.validate(),
        }
    }

    /// Dimension of one mode block.
    pub fn block_dim(&self) -> usize {
        match self {
            Dynamics::Heat(_) => 1,
            Dynamics::Damped(_) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    RealSplit,
    ComplexConjugate,
}

/// Per-mode representation of A, G and 𝒱.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeBlock {
    pub index: usize,
    pub mu: f64,
    pub a: ModeMatrix,
    pub g: Vector2<f64>,
    pub v: Vector2<f64>,
    /// (λ⁺, λ⁻); for heat blocks both equal −μ.
    pub eigs: (Complex64, Complex64),
    pub regime: Regime,
    pub damped: bool,
}

impl ModeBlock {
    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// Largest |eigenvalue|, the stiffness scale of the block.
    pub fn spectral_radius(&self) -> f64 {
        self.eigs.0.norm().max(self.eigs.1.norm())
    }
}

/// λ_n^± = (−ρμ^α ± √(ρ²μ^{2α} − 4μ))/2.
///
/// `mode` only labels a resonance error.
pub fn mode_eigenvalues(mu: f64, params: &DampedParams, mode: usize) -> Result<(Complex64, Complex64)> {
    params.validate()?;
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Parameter(format!("mu must be positive, got {mu}")));
    }
    let r = params.rho * mu.powf(params.alpha);
    let disc = r * r - 4.0 * mu;
    let distance = disc.abs() / (4.0 * mu);
    if distance < RESONANCE_TOL {
        return Err(Error::Resonance {
            mode,
            rho_sq: params.rho * params.rho,
            threshold: 4.0 * mu.powf(1.0 - 2.0 * params.alpha),
            distance,
        });
    }
    if disc > 0.0 {
        let s = disc.sqrt();
        let minus = -0.5 * (r + s);
        let plus = mu / minus;
        Ok((Complex64::new(plus, 0.0), Complex64::new(minus, 0.0)))
    } else {
        let w = 0.5 * (-disc).sqrt();
        Ok((Complex64::new(-0.5 * r, w), Complex64::new(-0.5 * r, -w)))
    }
}

/// Builds mode `n` of the given dynamics.
pub fn build_mode_block(model: &SpectrumModel, dynamics: &Dynamics, n: usize) -> Result<ModeBlock> {
    dynamics.validate()?;
    let mu = model.eigenvalue(n)?;
    Ok(match dynamics {
        Dynamics::Heat(p) => ModeBlock {
            index: n,
            mu,
            a: ModeMatrix::scalar(-mu),
            g: Vector2::new(mu.powf(-p.gamma), 0.0),
            v: Vector2::new(mu.powf(-p.beta), 0.0),
            eigs: (Complex64::new(-mu, 0.0), Complex64::new(-mu, 0.0)),
            regime: Regime::RealSplit,
            damped: false,
        },
        Dynamics::Damped(p) => {
            let eigs = mode_eigenvalues(mu, p, n)?;
            let s = mu.sqrt();
            let r = p.rho * mu.powf(p.alpha);
            let regime = if r * r < 4.0 * mu {
                Regime::ComplexConjugate
            } else {
                Regime::RealSplit
            };
            ModeBlock {
                index: n,
                mu,
                a: ModeMatrix::new(2, Matrix2::new(0.0, s, -s, -r)),
                g: Vector2::new(0.0, mu.powf(-p.gamma)),
                v: Vector2::new(0.0, mu.powf(-p.beta)),
                eigs,
                regime,
                damped: true,
            }
        }
    })
}

/// e^{t·a} in closed form: scalar exponential for heat blocks, the
/// divided-difference Sylvester formula for real eigenvalues and the
/// rotation–scaling form e^{σt}(cos ωt·I + sin ωt/ω·(a − σI)) for complex ones.
pub fn semigroup_block(block: &ModeBlock, t: f64) -> ModeMatrix {
    debug_assert!(t >= 0.0);
    if !block.damped {
        return ModeMatrix::scalar((-block.mu * t).exp());
    }
    if t == 0.0 {
        return ModeMatrix::identity(2);
    }
    let a = block.a.raw();
    let (lp, lm) = block.eigs;
    let m = match block.regime {
        Regime::ComplexConjugate => {
            let sigma = lp.re;
            let omega = lp.im.abs();
            let (sn, cs) = (omega * t).sin_cos();
            let shifted = a - Matrix2::identity() * sigma;
            (Matrix2::identity() * cs + shifted * (sn / omega)) * (sigma * t).exp()
        }
        Regime::RealSplit => {
            let (l2, l1) = (lp.re, lm.re);
            let gap = l1 - l2;
            let dd = (l2 * t).exp() * (gap * t).exp_m1() / gap;
            Matrix2::identity() * (l2 * t).exp() + (a - Matrix2::identity() * l2) * dd
        }
    };
    ModeMatrix::new(2, m)
}

/// A supremum over modes together with where it was attained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeSup {
    pub value: f64,
    /// 1-based mode index of the maximizer (smallest index on ties).
    pub argmax: usize,
    /// Per-mode values are non-increasing over the last 10% of modes.
    pub monotone_tail: bool,
}

/// Deterministic max-reduction with smallest-index tie break.
pub(crate) fn sup_over_modes(values: &[f64]) -> ModeSup {
    assert!(!values.is_empty());
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    let n = values.len();
    let start = n - (n / 10).max(1);
    let monotone_tail = values[start..].windows(2).all(|w| w[1] <= w[0]);
    ModeSup {
        value: values[best],
        argmax: best + 1,
        monotone_tail,
    }
}

/// sup over modes 1..=n_max of ‖e^{t·a_n}‖₂, which equals ‖e^{tA}‖ on H_{n_max}
/// (and ‖e^{tA*}‖, the blocks of A* being the transposes).
pub fn semigroup_operator_norm(model: &SpectrumModel, dynamics: &Dynamics, t: f64, n_max: usize) -> Result<ModeSup> {
    if n_max == 0 {
        return Err(Error::Parameter("n_max must be >= 1".into()));
    }
    if t < 0.0 {
        return Err(Error::Parameter(format!("t must be nonnegative, got {t}")));
    }
    let values = (1..=n_max)
        .map(|n| Ok(semigroup_block(&build_mode_block(model, dynamics, n)?, t).spectral_norm()))
        .collect::<Result<Vec<_>>>()?;
    Ok(sup_over_modes(&values))
}

/// How the free scalar χ_n in Φ_n^− = χ_n(μ^{1/2}, λ⁻) is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChiNormalization {
    Unit,
    /// ‖Φ_n^−‖ = ‖Φ_n^+‖.
    #[default]
    EqualNorm,
}

/// Coefficients of (0, μ^{−β}) in the eigenbasis {Φ⁺, Φ⁻} of one damped mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenCoeffs {
    pub index: usize,
    pub b_plus: Complex64,
    /// b⁻·χ, independent of the χ convention.
    pub b_minus_chi: Complex64,
    pub chi: Complex64,
    mu: f64,
    eigs: (Complex64, Complex64),
}

impl EigenCoeffs {
    pub fn b_minus(&self) -> Complex64 {
        self.b_minus_chi / self.chi
    }

    /// Φ⁺ = (μ^{1/2}, λ⁺) in orthonormal coordinates.
    pub fn phi_plus(&self) -> [Complex64; 2] {
        [Complex64::new(self.mu.sqrt(), 0.0), self.eigs.0]
    }

    /// Φ⁻ = χ(μ^{1/2}, λ⁻).
    pub fn phi_minus(&self) -> [Complex64; 2] {
        [self.chi * self.mu.sqrt(), self.chi * self.eigs.1]
    }

    /// b⁺Φ⁺ + b⁻Φ⁻, which should equal (0, μ^{−β}).
    pub fn reconstruct(&self) -> [Complex64; 2] {
        let p = self.phi_plus();
        let m = self.phi_minus();
        let bm = self.b_minus();
        [self.b_plus * p[0] + bm * m[0], self.b_plus * p[1] + bm * m[1]]
    }
}

/// Expands 𝒱 e_n = (0, μ^{−β}) on the eigenvectors of a damped block.
pub fn eigen_coeffs(block: &ModeBlock, beta: f64, chi_normalization: ChiNormalization) -> Result<EigenCoeffs> {
    if !block.damped {
        return Err(Error::Unsupported("eigen coefficients are defined for damped blocks only".into()));
    }
    let (lp, lm) = block.eigs;
    let gap = lp - lm;
    if gap.norm() <= RESONANCE_TOL * block.mu.sqrt() {
        return Err(Error::Resonance {
            mode: block.index,
            rho_sq: f64::NAN,
            threshold: f64::NAN,
            distance: 0.0,
        });
    }
    let target = block.mu.powf(-beta);
    let b_plus = Complex64::new(target, 0.0) / gap;
    let b_minus_chi = -b_plus;
    let chi = match chi_normalization {
        ChiNormalization::Unit => Complex64::new(1.0, 0.0),
        ChiNormalization::EqualNorm => {
            let np = (block.mu + lp.norm_sqr()).sqrt();
            let nm = (block.mu + lm.norm_sqr()).sqrt();
            Complex64::new(np / nm, 0.0)
        }
    };
    Ok(EigenCoeffs {
        index: block.index,
        b_plus,
        b_minus_chi,
        chi,
        mu: block.mu,
        eigs: block.eigs,
    })
}

/// Empirical growth exponents (slopes in log μ) of |b_n^+| and |χ_n| under
/// the spectrum's norm profile, for unit 𝒱-free directions (β = 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthReport {
    pub b_plus_exponent: f64,
    pub chi_exponent: f64,
}

pub fn coefficient_growth(model: &SpectrumModel, params: &DampedParams, modes: std::ops::RangeInclusive<usize>) -> Result<GrowthReport> {
    let dynamics = Dynamics::Damped(*params);
    let mut log_mu = Vec::new();
    let mut log_b = Vec::new();
    let mut log_chi = Vec::new();
    for n in modes {
        let block = build_mode_block(model, &dynamics, n)?;
        let c = eigen_coeffs(&block, 0.0, ChiNormalization::EqualNorm)?;
        let e_norm = model.basis_norm(n)?;
        log_mu.push(block.mu.ln());
        log_b.push((c.b_plus.norm() / e_norm).ln());
        log_chi.push(c.chi.norm().ln());
    }
    if log_mu.len() < 2 {
        return Err(Error::Data("need at least two modes for a growth fit".into()));
    }
    Ok(GrowthReport {
        b_plus_exponent: least_squares_slope(&log_mu, &log_b).0,
        chi_exponent: least_squares_slope(&log_mu, &log_chi).0,
    })
}

/// Ordinary least squares y ≈ slope·x + intercept; returns (slope, intercept, r²).
pub(crate) fn least_squares_slope(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// The Galerkin system on H_n: the first `n_modes` blocks stacked into one
/// state vector (one coordinate per heat mode, two per damped mode).
#[derive(Clone, Debug)]
pub struct GalerkinSystem {
    model: SpectrumModel,
    dynamics: Dynamics,
    blocks: Vec<ModeBlock>,
}

impl GalerkinSystem {
    pub fn new(model: &SpectrumModel, dynamics: &Dynamics, n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::Parameter("a Galerkin system needs at least one mode".into()));
        }
        let blocks = (1..=n_modes).map(|n| build_mode_block(model, dynamics, n)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.clone(),
            dynamics: *dynamics,
            blocks,
        })
    }

    pub fn model(&self) -> &SpectrumModel {
        &self.model
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn blocks(&self) -> &[ModeBlock] {
        &self.blocks
    }

    pub fn n_modes(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_dim(&self) -> usize {
        self.dynamics.block_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.blocks.len() * self.block_dim()
    }

    /// First state coordinate of mode `k` (0-based).
    pub fn offset(&self, k: usize) -> usize {
        k * self.block_dim()
    }

    pub(crate) fn load(&self, k: usize, x: &[f64]) -> Vector2<f64> {
        let o = self.offset(k);
        if self.block_dim() == 1 {
            Vector2::new(x[o], 0.0)
        } else {
            Vector2::new(x[o], x[o + 1])
        }
    }

    pub(crate) fn store(&self, k: usize, v: &Vector2<f64>, out: &mut [f64]) {
        let o = self.offset(k);
        out[o] = v[0];
        if self.block_dim() == 2 {
            out[o + 1] = v[1];
        }
    }

    /// e^{tA_n}x.
    pub fn semigroup_apply(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        for (k, b) in self.blocks.iter().enumerate() {
            let e = semigroup_block(b, t);
            self.store(k, &e.apply(&self.load(k, x)), &mut out);
        }
        out
    }

    /// A_n x.
    pub fn apply_generator(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        for (k, b) in self.blocks.iter().enumerate() {
            self.store(k, &b.a.apply(&self.load(k, x)), &mut out);
        }
        out
    }

    /// 𝒱_n u for u ∈ U_n (one coefficient per mode).
    pub fn drift_embed(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        for (k, b) in self.blocks.iter().enumerate() {
            self.store(k, &(b.v * u[k]), &mut out);
        }
        out
    }

    /// 𝒱_n^* h for h ∈ H_n.
    pub fn drift_adjoint(&self, h: &[f64]) -> Vec<f64> {
        self.blocks.iter().enumerate().map(|(k, b)| b.v.dot(&self.load(k, h))).collect()
    }

    /// Diagonal of G_nG_n^* (it is diagonal in these coordinates).
    pub fn noise_diagonal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        for (k, b) in self.blocks.iter().enumerate() {
            self.store(k, &b.g.component_mul(&b.g), &mut out);
        }
        out
    }
}
