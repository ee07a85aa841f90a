//! Run configuration: JSON schema, defaults, environment overrides and the
//! parameter-regime preflight.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use weak_spde::drift::DriftField;
use weak_spde::operators::{DampedParams, Dynamics, HeatParams, SpectrumModel};

/// Environment variables `WEAK_SPDE_CFG__SECTION__KEY=value` override config
/// entries; the value is parsed as JSON and falls back to a string.
pub const ENV_OVERRIDE_PREFIX: &str = "WEAK_SPDE_CFG__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Equation {
    Heat,
    /// Damped wave: Λ = −Δ on the cube.
    Wave,
    /// Damped Euler–Bernoulli beam: Λ = Δ² on the cube.
    Beam,
    /// Damped equation with μ_n = c·n^δ.
    AbstractDamped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpectrumConfig {
    PowerLaw { c: f64, delta: f64 },
    CubeDirichlet { dim: usize, power: u32, capacity: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub alpha: f64,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dim: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            rho: 1.0,
            beta: 0.0,
            gamma: 0.0,
            dim: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftConfig {
    Zero,
    /// B(x)_k = amplitude·(√6/π)/k·tanh(Σ_j x_j/j).
    TanhRidge { amplitude: f64 },
    Constant { values: Vec<f64> },
}

impl DriftConfig {
    pub fn build(&self) -> DriftField {
        match self {
            DriftConfig::Zero => DriftField::zero(),
            DriftConfig::TanhRidge { amplitude } => DriftField::tanh_ridge(*amplitude),
            DriftConfig::Constant { values } => DriftField::constant(values.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateQuantity {
    GammaV,
    Gamma,
    ExplicitEnergy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    pub n_start: usize,
    pub n_cap: usize,
    pub quantities: Vec<RateQuantity>,
    pub tolerance: f64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            t_min: 1e-3,
            t_max: 1e-1,
            points: 8,
            n_start: 8,
            n_cap: 1 << 16,
            quantities: vec![RateQuantity::GammaV, RateQuantity::Gamma],
            tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub modes: Vec<usize>,
    pub horizons: Vec<f64>,
    pub amplitude: f64,
    pub residual_tol: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            modes: vec![1, 2, 5, 10, 50],
            horizons: vec![0.1, 0.5, 1.0],
            amplitude: 1.0,
            residual_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub eta: f64,
    pub t: f64,
    pub n_max: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            t: 1.0,
            n_max: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuCheckConfig {
    pub n_active: usize,
    pub t: f64,
    pub order: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for OuCheckConfig {
    fn default() -> Self {
        Self {
            n_active: 2,
            t: 0.2,
            order: 12,
            samples: 50,
            epsilon: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Modes carried by the grid (dimension = modes × block size ≤ 4).
    pub grid_modes: usize,
    pub resolution: usize,
    pub box_factor: f64,
    /// Modes entering c₁, c₂ and the λ₀ search.
    pub n_active: usize,
    /// λ = lambda_factor·λ₀.
    pub lambda_factor: f64,
    pub drift: DriftConfig,
    /// g(x) = cos(⟨w, x⟩) with w_i = 1/(i+1).
    pub order: usize,
    pub time_nodes: usize,
    pub tol: f64,
    pub max_iterations: usize,
    pub lipschitz_trials: usize,
    /// Also evaluate the elliptic residual on interior nodes.
    pub residual: bool,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            grid_modes: 2,
            resolution: 33,
            box_factor: 4.0,
            n_active: 32,
            lambda_factor: 2.0,
            drift: DriftConfig::TanhRidge { amplitude: 1.0 },
            order: 12,
            time_nodes: 20,
            tol: 1e-4,
            max_iterations: 100,
            lipschitz_trials: 5,
            residual: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    ExponentialMild,
    EulerMaruyama,
}

impl SchemeName {
    pub fn scheme(self) -> weak_spde::sde_sim::Scheme {
        match self {
            SchemeName::ExponentialMild => weak_spde::sde_sim::Scheme::ExponentialMild,
            SchemeName::EulerMaruyama => weak_spde::sde_sim::Scheme::EulerMaruyama,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scheme: SchemeName,
    pub dt: f64,
    pub horizon: f64,
    pub n_modes: usize,
    pub paths: usize,
    pub drift: DriftConfig,
    pub x0: Vec<f64>,
    /// Moments are written every this many steps.
    pub record_every: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeName::ExponentialMild,
            dt: 1.0 / 256.0,
            horizon: 1.0,
            n_modes: 8,
            paths: 2000,
            drift: DriftConfig::Zero,
            x0: vec![1.0],
            record_every: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniquenessConfig {
    pub scheme_a: SchemeName,
    pub scheme_b: SchemeName,
    /// Scheme b uses seed + 1.
    pub dt: f64,
    pub horizon: f64,
    pub n_modes: usize,
    pub paths: usize,
    pub drift: DriftConfig,
    pub x0: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// When set, scheme b is also run with the drift scaled by this factor
    /// and those cells are expected to fail.
    pub control_factor: Option<f64>,
    /// Fraction of control cells that must fail.
    pub control_fail_fraction: f64,
}

impl Default for UniquenessConfig {
    fn default() -> Self {
        Self {
            scheme_a: SchemeName::ExponentialMild,
            scheme_b: SchemeName::EulerMaruyama,
            dt: 1.0 / 256.0,
            horizon: 1.0,
            n_modes: 8,
            paths: 10_000,
            drift: DriftConfig::TanhRidge { amplitude: 1.0 },
            x0: vec![1.0],
            lambdas: vec![0.5, 1.0, 2.0],
            control_factor: None,
            control_fail_fraction: 7.0 / 9.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CauchyConfig {
    pub scheme: SchemeName,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub drift: DriftConfig,
    pub x0: Vec<f64>,
    pub ns: Vec<usize>,
    pub n_ref: usize,
    /// Relative tolerance of the B ≡ 0 comparison with the Gaussian tail sum.
    pub tail_tolerance: f64,
    pub record_every: usize,
}

impl Default for CauchyConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeName::ExponentialMild,
            dt: 1.0 / 256.0,
            horizon: 1.0,
            paths: 2000,
            drift: DriftConfig::TanhRidge { amplitude: 1.0 },
            x0: vec![1.0],
            ns: vec![4, 8, 16, 32],
            n_ref: 64,
            tail_tolerance: 0.05,
            record_every: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub equation: Equation,
    #[serde(default)]
    pub spectrum: Option<SpectrumConfig>,
    #[serde(default)]
    pub params: Params,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub rates: RatesConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub ou_check: OuCheckConfig,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub uniqueness: UniquenessConfig,
    #[serde(default)]
    pub cauchy: CauchyConfig,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    /// The equation with every other field at its default.
    pub fn minimal(equation: Equation) -> Self {
        serde_json::from_value(serde_json::json!({ "equation": equation })).expect("defaults deserialize")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| anyhow!("config parse error at line {}, column {}: {e}", e.line(), e.column()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| anyhow!("config schema error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit spectrum, or the equation's natural one.
    pub fn spectrum_config(&self) -> SpectrumConfig {
        self.spectrum.unwrap_or(match self.equation {
            Equation::Heat | Equation::Wave => SpectrumConfig::CubeDirichlet {
                dim: self.params.dim,
                power: 1,
                capacity: 1 << 16,
            },
            Equation::Beam => SpectrumConfig::CubeDirichlet {
                dim: self.params.dim,
                power: 2,
                capacity: 1 << 16,
            },
            Equation::AbstractDamped => SpectrumConfig::PowerLaw { c: 1.0, delta: 2.0 },
        })
    }

    pub fn model(&self) -> Result<SpectrumModel> {
        Ok(match self.spectrum_config() {
            SpectrumConfig::PowerLaw { c, delta } => SpectrumModel::power_law(c, delta)?,
            SpectrumConfig::CubeDirichlet { dim, power, capacity } => SpectrumModel::cube_dirichlet(dim, power, capacity)?,
        })
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        let p = &self.params;
        Ok(match self.equation {
            Equation::Heat => Dynamics::Heat(HeatParams::new(p.beta, p.gamma, p.dim)?),
            _ => Dynamics::Damped(DampedParams::new(p.alpha, p.rho, p.beta, p.gamma)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model().context("spectrum")?;
        self.dynamics().context("parameters")?;
        if let (Equation::Wave | Equation::Beam, Some(SpectrumConfig::PowerLaw { .. })) = (self.equation, self.spectrum) {
            bail!("{:?} is defined on the cube; use equation abstract-damped for a power-law spectrum", self.equation);
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| anyhow!("{}: parse error at line {}, column {}: {e}", path.display(), e.line(), e.column()))?;
    apply_env_overrides(&mut value, std::env::vars())?;
    RunConfig::from_value(value).with_context(|| format!("in {}", path.display()))
}

/// Applies `WEAK_SPDE_CFG__A__B=v` as value["a"]["b"] = v.
pub fn apply_env_overrides(value: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_OVERRIDE_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_OVERRIDE_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|s| s.is_empty()) {
            bail!("malformed override variable {key}");
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let mut node = &mut *value;
        for (i, part) in path.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| anyhow!("override {key}: {} is not an object", path[..i].join(".")))?;
            if i + 1 == path.len() {
                obj.insert(part.clone(), parsed.clone());
                break;
            }
            node = obj.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// One parameter condition and whether it holds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Annotation {
    pub name: &'static str,
    pub condition: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// lhs = rhs within 1e-12: the strict inequality fails on the boundary.
    pub boundary: bool,
}

impl Annotation {
    fn strict(name: &'static str, condition: String, lhs: f64, rhs: f64) -> Self {
        let boundary = (lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs());
        Self {
            name,
            condition,
            lhs,
            rhs,
            holds: lhs > rhs && !boundary,
            boundary,
        }
    }

    pub fn label(&self) -> &'static str {
        if self.holds {
            "holds"
        } else if self.boundary {
            "strict-violation"
        } else {
            "violated"
        }
    }
}

/// Which of the theorem conditions hold for the configured parameters.
pub fn preflight(cfg: &RunConfig) -> Vec<Annotation> {
    let p = &cfg.params;
    let d = p.dim as f64;
    let mut out = Vec::new();
    match cfg.equation {
        Equation::Heat => {
            out.push(Annotation::strict("trace", "gamma > d/4 - 1/2".into(), p.gamma, d / 4.0 - 0.5));
            out.push(Annotation::strict("integrability", "beta > gamma - 1/2".into(), p.beta, p.gamma - 0.5));
        }
        Equation::Wave | Equation::Beam | Equation::AbstractDamped => {
            match cfg.equation {
                Equation::Wave => out.push(Annotation::strict("trace", "gamma > (d - 2 alpha)/4".into(), p.gamma, (d - 2.0 * p.alpha) / 4.0)),
                Equation::Beam => out.push(Annotation::strict("trace", "gamma > (d - 4 alpha)/8".into(), p.gamma, (d - 4.0 * p.alpha) / 8.0)),
                _ => {
                    let delta = match cfg.spectrum_config() {
                        SpectrumConfig::PowerLaw { delta, .. } => delta,
                        SpectrumConfig::CubeDirichlet { dim, power, .. } => 2.0 * power as f64 / dim as f64,
                    };
                    out.push(Annotation::strict("trace", "delta > 1/(2 gamma + alpha)".into(), delta, 1.0 / (2.0 * p.gamma + p.alpha)));
                }
            }
            let (condition, rhs) = if p.alpha <= 0.5 {
                ("beta > gamma - alpha/2", p.gamma - p.alpha / 2.0)
            } else {
                ("beta > gamma - (1-alpha)/2", p.gamma - (1.0 - p.alpha) / 2.0)
            };
            out.push(Annotation::strict("integrability", condition.into(), p.beta, rhs));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"equation": "heat"}"#).unwrap();
        assert_eq!(cfg, RunConfig::minimal(Equation::Heat));
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.rates.points, 8);
        assert!(matches!(cfg.spectrum_config(), SpectrumConfig::CubeDirichlet { dim: 1, power: 1, .. }));
    }

    #[test]
    fn wave_boundary_is_a_strict_violation() {
        let cfg = RunConfig::from_json_str(r#"{"equation": "wave", "params": {"alpha": 0.5, "gamma": 0.0, "beta": 0.0, "dim": 1}}"#).unwrap();
        let trace = preflight(&cfg).into_iter().find(|a| a.name == "trace").unwrap();
        assert_eq!(trace.rhs, 0.0);
        assert!(!trace.holds && trace.boundary);
        assert_eq!(trace.label(), "strict-violation");
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let err = RunConfig::from_json_str("{\n  \"equation\": \"heat\",\n  oops\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_keys_and_impossible_values_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"equation": "heat", "colour": 1}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"equation": "heat", "rates": {"t_mni": 1}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"equation": "wave", "params": {"alpha": 1.2}}"#).is_err());
    }

    #[test]
    fn env_overrides_nest_and_parse() {
        let mut v = serde_json::json!({"equation": "heat"});
        let vars = vec![
            ("WEAK_SPDE_CFG__RATES__T_MIN".to_string(), "0.0005".to_string()),
            ("WEAK_SPDE_CFG__SEED".to_string(), "42".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        apply_env_overrides(&mut v, vars).unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.rates.t_min, 0.0005);
        assert_eq!(cfg.seed, 42);
    }
}
