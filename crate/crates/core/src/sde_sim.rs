//! Monte Carlo for the Galerkin systems
//!
//!   dX_n = (A_nX_n + 𝒱_nB(P_nX_n))dt + G_n dW,
//!
//! by an exponential (mild-form) scheme that is exact for B ≡ 0 and by
//! Euler–Maruyama, with Laplace-transform functionals, the two-scheme weak
//! uniqueness comparison and the Galerkin Cauchy gaps.
//!
//! Noise comes from one ChaCha8 stream per (path, mode), so paths are
//! independent work items and adding modes never changes the increments of
//! the modes already present. With `noise_refinement = r` every step
//! aggregates 2^r sub-step draws, which couples a run at dt with refinement
//! r+1 to a run at dt/2 with refinement r.

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::controllability::{gramian_block_with, GramianMethod};
use crate::drift::DriftField;
use crate::error::{Error, Result};
use crate::linalg::ModeMatrix;
use crate::operators::{semigroup_block, Dynamics, GalerkinSystem, ModeBlock, SpectrumModel};
use crate::semigroup::ScalarField;

/// Paths per deterministic reduction chunk.
const CHUNK: usize = 256;
/// Largest stored ensemble, in f64 entries.
pub const MAX_STORED_ENTRIES: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// X ← e^{dt·a}X + (∫₀^{dt}e^{sa}ds)𝒱B(X) + exact OU noise.
    ExponentialMild,
    /// X ← X + dt(aX + 𝒱B(X)) + G ΔW.
    EulerMaruyama,
}

impl Scheme {
    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::ExponentialMild => "exponential-mild",
            Scheme::EulerMaruyama => "euler-maruyama",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub horizon: f64,
    pub n_modes: usize,
    pub paths: usize,
    pub seed: u64,
    pub drift: DriftField,
    /// Initial state; projected onto the first `n_modes` blocks (missing
    /// coordinates are zero).
    pub x0: Vec<f64>,
    pub noise_refinement: u32,
}

impl SchemeConfig {
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::Parameter("dt and horizon must be positive".into()));
        }
        let ratio = self.horizon / self.dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-12 * ratio.max(1.0) || steps < 1.0 {
            return Err(Error::Parameter(format!("dt = {} does not divide T = {}", self.dt, self.horizon)));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<usize> {
        if self.paths < 2 {
            return Err(Error::Parameter("at least two paths are required".into()));
        }
        if self.n_modes == 0 || self.n_modes >= 1 << 16 {
            return Err(Error::Parameter(format!("n_modes must be in 1..65536, got {}", self.n_modes)));
        }
        if self.paths as u64 >= 1 << 47 {
            return Err(Error::Parameter("too many paths".into()));
        }
        if self.noise_refinement > 20 {
            return Err(Error::Parameter("noise refinement above 20".into()));
        }
        self.steps()
    }

    /// Same configuration at half the step, noise-coupled to this one when
    /// this one has refinement ≥ 1.
    pub fn halved(&self) -> Self {
        Self {
            dt: self.dt / 2.0,
            noise_refinement: self.noise_refinement.saturating_sub(1),
            ..self.clone()
        }
    }
}

/// Per-block transition data for an exact OU step of length dt.
#[derive(Clone, Debug)]
pub struct ExactOuStep {
    pub dt: f64,
    /// e^{dt·a} per block.
    pub means: Vec<ModeMatrix>,
    /// Q_dt per block.
    pub covariances: Vec<ModeMatrix>,
    /// Symmetric roots of Q_dt.
    pub factors: Vec<ModeMatrix>,
}

pub fn exact_ou_step(blocks: &[ModeBlock], dt: f64) -> Result<ExactOuStep> {
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
    }
    let mut out = ExactOuStep {
        dt,
        means: Vec::new(),
        covariances: Vec::new(),
        factors: Vec::new(),
    };
    for b in blocks {
        let g = gramian_block_with(b, dt, GramianMethod::default())?;
        out.means.push(semigroup_block(b, dt));
        out.covariances.push(*g.q());
        out.factors.push(g.factor().sqrt());
    }
    Ok(out)
}

/// ∫₀^h e^{sa}ds.
fn phi_integral(block: &ModeBlock, h: f64) -> ModeMatrix {
    let a = block.a.raw();
    let norm = block.a.spectral_norm() * h;
    let m = if norm < 0.5 {
        // Σ h^{k+1}a^k/(k+1)!
        let mut term = Matrix2::identity() * h;
        let mut sum = term;
        for k in 1..30 {
            term = a * term * (h / (k as f64 + 1.0));
            sum += term;
            if term.abs().max() < 1e-18 * sum.abs().max() {
                break;
            }
        }
        sum
    } else {
        let e = semigroup_block(block, h).raw() - Matrix2::identity();
        if block.dim() == 1 {
            Matrix2::new(e[(0, 0)] / a[(0, 0)], 0.0, 0.0, 0.0)
        } else {
            a.try_inverse().expect("mode blocks are invertible") * e
        }
    };
    ModeMatrix::new(block.dim(), m)
}

#[derive(Clone, Debug)]
struct BlockStep {
    /// exponential: e^{dt·a}; Euler: I + dt·a
    advance: [f64; 4],
    /// exponential: Φ·v; Euler: dt·v
    drift: [f64; 2],
    /// exponential: sub-step noise root; Euler: g·√h in the first column
    noise: [f64; 4],
    /// exponential: sub-step e^{h·a} used to aggregate sub-step noise
    sub: [f64; 4],
}

fn flat(m: &ModeMatrix) -> [f64; 4] {
    let r = m.raw();
    [r[(0, 0)], r[(0, 1)], r[(1, 0)], r[(1, 1)]]
}

/// Per-path time stepper shared by all scheme runs.
#[derive(Clone, Debug)]
struct Stepper {
    scheme: Scheme,
    block_dim: usize,
    blocks: Vec<BlockStep>,
    substeps: usize,
    seed: u64,
}

impl Stepper {
    fn new(system: &GalerkinSystem, scheme: Scheme, dt: f64, refinement: u32, seed: u64) -> Result<Self> {
        let substeps = 1usize << refinement;
        let h = dt / substeps as f64;
        let mut blocks = Vec::new();
        for b in system.blocks() {
            let step = match scheme {
                Scheme::ExponentialMild => {
                    let sub = exact_ou_step(std::slice::from_ref(b), h)?;
                    let phi = phi_integral(b, dt);
                    let d = phi.apply(&b.v);
                    BlockStep {
                        advance: flat(&semigroup_block(b, dt)),
                        drift: [d[0], d[1]],
                        noise: flat(&sub.factors[0]),
                        sub: flat(&sub.means[0]),
                    }
                }
                Scheme::EulerMaruyama => {
                    let a = b.a.scale(dt);
                    let id = ModeMatrix::identity(b.dim());
                    let adv = ModeMatrix::new(b.dim(), id.raw() + a.raw());
                    let s = h.sqrt();
                    BlockStep {
                        advance: flat(&adv),
                        drift: [dt * b.v[0], dt * b.v[1]],
                        noise: [b.g[0] * s, 0.0, b.g[1] * s, 0.0],
                        sub: [1.0, 0.0, 0.0, 1.0],
                    }
                }
            };
            blocks.push(step);
        }
        Ok(Self {
            scheme,
            block_dim: system.block_dim(),
            blocks,
            substeps,
            seed,
        })
    }

    fn rngs(&self, path: usize, n: usize) -> Vec<ChaCha8Rng> {
        (0..n)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(self.seed);
                r.set_stream(((path as u64) << 16) | k as u64);
                r
            })
            .collect()
    }

    /// Aggregated noise of one step for modes 0..rngs.len().
    fn noise(&self, rngs: &mut [ChaCha8Rng], out: &mut [f64]) {
        let bd = self.block_dim;
        // Euler uses the single Brownian motion of each mode; the exact
        // scheme needs one normal per state coordinate
        let draws = match self.scheme {
            Scheme::ExponentialMild => bd,
            Scheme::EulerMaruyama => 1,
        };
        for (k, rng) in rngs.iter_mut().enumerate() {
            let b = &self.blocks[k];
            let mut acc = [0.0f64; 2];
            for _ in 0..self.substeps {
                let mut z = [0.0f64; 2];
                for zi in z.iter_mut().take(draws) {
                    *zi = StandardNormal.sample(rng);
                }
                let next0 = b.sub[0] * acc[0] + b.sub[1] * acc[1] + b.noise[0] * z[0] + b.noise[1] * z[1];
                let next1 = b.sub[2] * acc[0] + b.sub[3] * acc[1] + b.noise[2] * z[0] + b.noise[3] * z[1];
                acc = [next0, next1];
            }
            out[k * bd] = acc[0];
            if bd == 2 {
                out[k * bd + 1] = acc[1];
            }
        }
    }

    /// One step of the first `b.len()` modes of `x`.
    fn advance(&self, x: &mut [f64], b: &[f64], noise: &[f64]) {
        let bd = self.block_dim;
        for (k, bk) in b.iter().enumerate() {
            let s = &self.blocks[k];
            let o = k * bd;
            if bd == 1 {
                x[o] = s.advance[0] * x[o] + s.drift[0] * bk + noise[o];
            } else {
                let (x0, x1) = (x[o], x[o + 1]);
                x[o] = s.advance[0] * x0 + s.advance[1] * x1 + s.drift[0] * bk + noise[o];
                x[o + 1] = s.advance[2] * x0 + s.advance[3] * x1 + s.drift[1] * bk + noise[o + 1];
            }
        }
    }

    fn initial(&self, x0: &[f64], n: usize) -> Vec<f64> {
        let dim = n * self.block_dim;
        (0..dim).map(|i| x0.get(i).copied().unwrap_or(0.0)).collect()
    }

    /// Runs one path, visiting (step, state) for step = 0..=steps.
    fn run_path(&self, path: usize, steps: usize, x0: &[f64], drift: &DriftField, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        let n = self.blocks.len();
        let mut x = self.initial(x0, n);
        let mut rngs = self.rngs(path, n);
        let mut b = vec![0.0; n];
        let mut noise = vec![0.0; x.len()];
        visit(0, &x);
        for step in 1..=steps {
            drift.eval(&x, self.block_dim, &mut b);
            self.noise(&mut rngs, &mut noise);
            self.advance(&mut x, &b, &noise);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { path, step });
            }
            visit(step, &x);
        }
        Ok(())
    }
}

fn build(model: &SpectrumModel, dynamics: &Dynamics, cfg: &SchemeConfig) -> Result<(GalerkinSystem, Stepper, usize)> {
    let steps = cfg.validate()?;
    let system = GalerkinSystem::new(model, dynamics, cfg.n_modes)?;
    let stepper = Stepper::new(&system, cfg.scheme, cfg.dt, cfg.noise_refinement, cfg.seed)?;
    Ok((system, stepper, steps))
}

/// Stored paths: `states[(path·(steps+1) + step)·dim + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub scheme: Scheme,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub states: Vec<f64>,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.dim;
        &self.states[o..o + self.dim]
    }

    /// Stream id of (path, mode); the ChaCha8 key is the root seed.
    pub fn substream(path: usize, mode: usize) -> u64 {
        ((path as u64) << 16) | mode as u64
    }
}

/// Simulates and stores every path at every step.
pub fn simulate(model: &SpectrumModel, dynamics: &Dynamics, cfg: &SchemeConfig) -> Result<PathEnsemble> {
    let (system, stepper, steps) = build(model, dynamics, cfg)?;
    let dim = system.state_dim();
    let per_path = (steps + 1) * dim;
    if per_path.saturating_mul(cfg.paths) > MAX_STORED_ENTRIES {
        return Err(Error::Capacity(format!(
            "{} paths of {per_path} entries exceed the stored-ensemble cap; use the streaming functionals",
            cfg.paths
        )));
    }
    let chunks: Vec<Result<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut buf = Vec::with_capacity(per_path);
            stepper.run_path(p, steps, &cfg.x0, &cfg.drift, |_, x| buf.extend_from_slice(x))?;
            Ok(buf)
        })
        .collect();
    let mut states = Vec::with_capacity(per_path * cfg.paths);
    for c in chunks {
        states.extend_from_slice(&c?);
    }
    Ok(PathEnsemble {
        scheme: cfg.scheme,
        seed: cfg.seed,
        dt: cfg.dt,
        horizon: cfg.horizon,
        paths: cfg.paths,
        steps,
        dim,
        states,
    })
}

/// ∫₀ᵀ e^{−λs} Ê[g(X(s))] ds with its path-level standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceEstimate {
    pub lambda: f64,
    pub g_label: String,
    pub value: f64,
    pub std_error: f64,
    /// e^{−λT}‖g‖_∞/λ, the part beyond the horizon (not included in value).
    pub tail_bound: f64,
}

/// Weights (w₀, w₁) with ∫₀^h e^{−λs}((1−s/h)a + (s/h)b)ds = w₀a + w₁b.
fn exp_trapezoid(lambda: f64, h: f64) -> (f64, f64) {
    let x = lambda * h;
    let total = -(-x).exp_m1() / lambda;
    let w1 = if x < 1e-3 {
        h * (0.5 - x / 3.0 + x * x / 8.0 - x * x * x / 30.0)
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (lambda * x)
    };
    (total - w1, w1)
}

/// Step weights e^{−λs_k}(w₀, w₁) for every λ, shared by all paths.
struct LaplacePlan {
    /// weights[j·steps + k] for λ_j on step k → k+1
    weights: Vec<(f64, f64)>,
    steps: usize,
}

impl LaplacePlan {
    fn new(lambdas: &[f64], dt: f64, steps: usize) -> Self {
        let mut weights = Vec::with_capacity(lambdas.len() * steps);
        for &l in lambdas {
            let (w0, w1) = exp_trapezoid(l, dt);
            for k in 0..steps {
                let decay = (-l * k as f64 * dt).exp();
                weights.push((decay * w0, decay * w1));
            }
        }
        Self { weights, steps }
    }
}

/// Accumulates the per-path Laplace integrals of several (g, λ) pairs.
struct LaplaceAccumulator<'a> {
    gs: &'a [ScalarField],
    plan: &'a LaplacePlan,
    n_lambda: usize,
    prev: Vec<f64>,
    sums: Vec<f64>,
}

impl<'a> LaplaceAccumulator<'a> {
    fn new(gs: &'a [ScalarField], plan: &'a LaplacePlan) -> Self {
        let n_lambda = plan.weights.len() / plan.steps;
        Self {
            gs,
            plan,
            n_lambda,
            prev: vec![0.0; gs.len()],
            sums: vec![0.0; gs.len() * n_lambda],
        }
    }

    fn visit(&mut self, step: usize, x: &[f64]) {
        for (i, g) in self.gs.iter().enumerate() {
            let v = g.eval(x);
            if step > 0 {
                for j in 0..self.n_lambda {
                    let (w0, w1) = self.plan.weights[j * self.plan.steps + step - 1];
                    self.sums[i * self.n_lambda + j] += w0 * self.prev[i] + w1 * v;
                }
            }
            self.prev[i] = v;
        }
    }
}

fn summarize(per_path: &[Vec<f64>], gs: &[ScalarField], lambdas: &[f64], horizon: f64) -> Vec<LaplaceEstimate> {
    let m = per_path.len() as f64;
    let mut out = Vec::new();
    for (i, g) in gs.iter().enumerate() {
        for (j, &l) in lambdas.iter().enumerate() {
            let idx = i * lambdas.len() + j;
            // shifted by the first path so identical samples give exactly zero spread
            let shift = per_path[0][idx];
            let dmean = per_path.iter().map(|p| p[idx] - shift).sum::<f64>() / m;
            let mean = shift + dmean;
            let var = per_path.iter().map(|p| (p[idx] - shift - dmean).powi(2)).sum::<f64>() / (m - 1.0);
            let sup = g.sup_hint.unwrap_or(f64::INFINITY);
            out.push(LaplaceEstimate {
                lambda: l,
                g_label: format!("g{i}"),
                value: mean,
                std_error: (var / m).sqrt(),
                tail_bound: (-l * horizon).exp() * sup / l,
            });
        }
    }
    out
}

/// Laplace functional on a stored ensemble.
pub fn laplace_functional(ens: &PathEnsemble, g: &ScalarField, lambda: f64) -> Result<LaplaceEstimate> {
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    let gs = std::slice::from_ref(g);
    let ls = [lambda];
    let plan = LaplacePlan::new(&ls, ens.dt, ens.steps);
    let per_path: Vec<Vec<f64>> = (0..ens.paths)
        .map(|p| {
            let mut acc = LaplaceAccumulator::new(gs, &plan);
            for s in 0..=ens.steps {
                acc.visit(s, ens.state(p, s));
            }
            acc.sums
        })
        .collect();
    Ok(summarize(&per_path, gs, &ls, ens.horizon).remove(0))
}

/// Laplace functionals for every (g, λ) pair (g-major order) without
/// storing paths. Bit-identical to [`laplace_functional`] on the stored
/// ensemble of the same configuration.
pub fn laplace_functionals(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    cfg: &SchemeConfig,
    gs: &[ScalarField],
    lambdas: &[f64],
) -> Result<Vec<LaplaceEstimate>> {
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Parameter("lambdas must be positive".into()));
    }
    let (_, stepper, steps) = build(model, dynamics, cfg)?;
    let plan = LaplacePlan::new(lambdas, cfg.dt, steps);
    let per_path: Vec<Result<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|p| {
            let mut acc = LaplaceAccumulator::new(gs, &plan);
            stepper.run_path(p, steps, &cfg.x0, &cfg.drift, |s, x| acc.visit(s, x))?;
            Ok(acc.sums)
        })
        .collect();
    let per_path = per_path.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(&per_path, gs, lambdas, cfg.horizon))
}

/// Laplace functionals together with a Richardson estimate of their O(dt)
/// bias: the run at dt (noise refined once more, so it is coupled to the
/// run at dt/2) supplies the estimates, and the bias is twice its distance
/// to the run at dt/2.
pub fn richardson_bias(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    cfg: &SchemeConfig,
    gs: &[ScalarField],
    lambdas: &[f64],
) -> Result<(Vec<LaplaceEstimate>, Vec<f64>)> {
    let coarse = SchemeConfig {
        noise_refinement: cfg.noise_refinement + 1,
        ..cfg.clone()
    };
    let fine = coarse.halved();
    let a = laplace_functionals(model, dynamics, &coarse, gs, lambdas)?;
    let b = laplace_functionals(model, dynamics, &fine, gs, lambdas)?;
    let bias = a.iter().zip(&b).map(|(x, y)| 2.0 * (x.value - y.value).abs()).collect();
    Ok((a, bias))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniquenessCell {
    pub g_label: String,
    pub lambda: f64,
    pub estimate_a: f64,
    pub estimate_b: f64,
    pub std_error_a: f64,
    pub std_error_b: f64,
    pub bias_a: f64,
    pub bias_b: f64,
    /// 3·√(σ_a² + σ_b²) + bias_a + bias_b.
    pub budget: f64,
    pub pass: bool,
}

impl UniquenessCell {
    pub fn difference(&self) -> f64 {
        (self.estimate_a - self.estimate_b).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniquenessTable {
    pub cells: Vec<UniquenessCell>,
}

impl UniquenessTable {
    pub fn passed(&self) -> usize {
        self.cells.iter().filter(|c| c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.passed() == self.cells.len()
    }
}

/// Which configurations get a Richardson bias term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasPolicy {
    /// Every configuration.
    Richardson,
    /// Only configurations that are not exact: Euler always, the
    /// exponential scheme when the drift is nonzero.
    InexactOnly,
}

/// Estimates and bias terms of one side of a uniqueness comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct UniquenessArm {
    pub scheme: Scheme,
    pub horizon: f64,
    pub n_modes: usize,
    pub x0: Vec<f64>,
    pub estimates: Vec<LaplaceEstimate>,
    pub bias: Vec<f64>,
}

pub fn uniqueness_arm(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    cfg: &SchemeConfig,
    gs: &[ScalarField],
    lambdas: &[f64],
    policy: BiasPolicy,
) -> Result<UniquenessArm> {
    let exact = cfg.scheme == Scheme::ExponentialMild && cfg.drift.sup() == 0.0;
    let (estimates, bias) = if policy == BiasPolicy::InexactOnly && exact {
        (laplace_functionals(model, dynamics, cfg, gs, lambdas)?, vec![0.0; gs.len() * lambdas.len()])
    } else {
        richardson_bias(model, dynamics, cfg, gs, lambdas)?
    };
    Ok(UniquenessArm {
        scheme: cfg.scheme,
        horizon: cfg.horizon,
        n_modes: cfg.n_modes,
        x0: cfg.x0.clone(),
        estimates,
        bias,
    })
}

/// Cell-by-cell comparison of two arms computed on the same (g, λ) grid.
pub fn compare_arms(labels: &[String], lambdas: &[f64], a: &UniquenessArm, b: &UniquenessArm) -> Result<UniquenessTable> {
    if a.horizon != b.horizon || a.n_modes != b.n_modes || a.x0 != b.x0 {
        return Err(Error::Parameter("arms must share horizon, modes and initial state".into()));
    }
    let cells_expected = labels.len() * lambdas.len();
    if a.estimates.len() != cells_expected || b.estimates.len() != cells_expected {
        return Err(Error::Parameter("arms were computed on a different (g, lambda) grid".into()));
    }
    let mut cells = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        for (j, &l) in lambdas.iter().enumerate() {
            let k = i * lambdas.len() + j;
            let (ea, eb) = (&a.estimates[k], &b.estimates[k]);
            let budget = 3.0 * ea.std_error.hypot(eb.std_error) + a.bias[k] + b.bias[k];
            cells.push(UniquenessCell {
                g_label: label.clone(),
                lambda: l,
                estimate_a: ea.value,
                estimate_b: eb.value,
                std_error_a: ea.std_error,
                std_error_b: eb.std_error,
                bias_a: a.bias[k],
                bias_b: b.bias[k],
                budget,
                pass: (ea.value - eb.value).abs() <= budget,
            });
        }
    }
    Ok(UniquenessTable { cells })
}

/// Compares the Laplace functionals of two runs of the same system.
pub fn uniqueness_experiment(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    cfg_a: &SchemeConfig,
    cfg_b: &SchemeConfig,
    gs: &[(String, ScalarField)],
    lambdas: &[f64],
    policy: BiasPolicy,
) -> Result<UniquenessTable> {
    if cfg_a.horizon != cfg_b.horizon || cfg_a.n_modes != cfg_b.n_modes || cfg_a.x0 != cfg_b.x0 {
        return Err(Error::Parameter("configurations must share horizon, modes and initial state".into()));
    }
    let labels: Vec<String> = gs.iter().map(|(l, _)| l.clone()).collect();
    let fields: Vec<ScalarField> = gs.iter().map(|(_, g)| g.clone()).collect();
    let a = uniqueness_arm(model, dynamics, cfg_a, &fields, lambdas, policy)?;
    let b = uniqueness_arm(model, dynamics, cfg_b, &fields, lambdas, policy)?;
    compare_arms(&labels, lambdas, &a, &b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CauchyGap {
    pub n: usize,
    /// sup over the time grid of Ê‖X_n(t) − X_ref(t)‖².
    pub sup_gap: f64,
    pub sup_time: f64,
    pub std_error: f64,
    /// The mean-square gap at every step.
    pub profile: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CauchyTable {
    pub n_ref: usize,
    pub gaps: Vec<CauchyGap>,
}

impl CauchyTable {
    /// Gaps strictly decrease along the n list.
    pub fn monotone(&self) -> bool {
        self.gaps.windows(2).all(|w| w[1].sup_gap < w[0].sup_gap)
    }
}

/// Mean-square gaps between the systems with n ∈ `ns` modes and the one with
/// `n_ref` modes, all driven by the same per-mode noise. `template.n_modes`
/// is ignored.
pub fn galerkin_cauchy(model: &SpectrumModel, dynamics: &Dynamics, template: &SchemeConfig, ns: &[usize], n_ref: usize) -> Result<CauchyTable> {
    if ns.iter().any(|&n| n == 0 || n > n_ref) {
        return Err(Error::Parameter(format!("every n must lie in 1..={n_ref}")));
    }
    let cfg = SchemeConfig {
        n_modes: n_ref,
        ..template.clone()
    };
    let (system, stepper, steps) = build(model, dynamics, &cfg)?;
    let bd = system.block_dim();
    let dim = system.state_dim();
    let k = ns.len();
    let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..cfg.paths)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = vec![0.0; (steps + 1) * k];
            let mut sumsq = vec![0.0; (steps + 1) * k];
            for &p in chunk {
                let mut rngs = stepper.rngs(p, n_ref);
                let mut xr = stepper.initial(&cfg.x0, n_ref);
                let mut xs: Vec<Vec<f64>> = ns.iter().map(|&n| stepper.initial(&cfg.x0, n)).collect();
                let mut noise = vec![0.0; dim];
                let mut b = vec![0.0; n_ref];
                for step in 0..=steps {
                    if step > 0 {
                        stepper.noise(&mut rngs, &mut noise);
                        cfg.drift.eval(&xr, bd, &mut b);
                        stepper.advance(&mut xr, &b, &noise);
                        for (x, &n) in xs.iter_mut().zip(ns) {
                            cfg.drift.eval(x, bd, &mut b[..n]);
                            stepper.advance(x, &b[..n], &noise);
                        }
                        if xr.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite { path: p, step });
                        }
                    }
                    for (j, x) in xs.iter().enumerate() {
                        let mut gap: f64 = x.iter().zip(&xr).map(|(a, b)| (a - b) * (a - b)).sum();
                        gap += xr[x.len()..].iter().map(|v| v * v).sum::<f64>();
                        sum[step * k + j] += gap;
                        sumsq[step * k + j] += gap * gap;
                    }
                }
            }
            Ok((sum, sumsq))
        })
        .collect();
    let mut sum = vec![0.0; (steps + 1) * k];
    let mut sumsq = vec![0.0; (steps + 1) * k];
    for c in chunks {
        let (s, q) = c?;
        for i in 0..sum.len() {
            sum[i] += s[i];
            sumsq[i] += q[i];
        }
    }
    let m = cfg.paths as f64;
    let gaps = ns
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let profile: Vec<f64> = (0..=steps).map(|s| sum[s * k + j] / m).collect();
            let (best, value) = profile
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (s, &v)| if v > acc.1 { (s, v) } else { acc });
            let var = ((sumsq[best * k + j] / m - value * value) * m / (m - 1.0)).max(0.0);
            CauchyGap {
                n,
                sup_gap: value,
                sup_time: best as f64 * cfg.dt,
                std_error: (var / m).sqrt(),
                profile,
            }
        })
        .collect();
    Ok(CauchyTable { n_ref, gaps })
}

/// Closed form of E‖X_n(t) − X_ref(t)‖² for B ≡ 0: the energy of modes
/// n+1..=n_ref, Σ ‖e^{ta}x0_k‖² + tr Q_{t,k}.
pub fn gaussian_tail_gap(model: &SpectrumModel, dynamics: &Dynamics, x0: &[f64], n: usize, n_ref: usize, t: f64) -> Result<f64> {
    let system = GalerkinSystem::new(model, dynamics, n_ref)?;
    let bd = system.block_dim();
    let mut total = 0.0;
    for k in n..n_ref {
        let b = &system.blocks()[k];
        let x = nalgebra::Vector2::new(
            x0.get(k * bd).copied().unwrap_or(0.0),
            if bd == 2 { x0.get(k * bd + 1).copied().unwrap_or(0.0) } else { 0.0 },
        );
        total += semigroup_block(b, t).apply(&x).norm_squared();
        if t == 0.0 {
            continue;
        }
        let q = gramian_block_with(b, t, GramianMethod::default())?;
        total += q.q().get(0, 0) + if bd == 2 { q.q().get(1, 1) } else { 0.0 };
    }
    Ok(total)
}
