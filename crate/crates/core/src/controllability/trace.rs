//! Truncated probes of the trace condition
//! ∫₀ᵗ s^{−η} Tr[e^{sA}GG*e^{sA*}] ds < ∞.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::{build_mode_block, least_squares_slope, semigroup_block, Dynamics, ModeBlock, SpectrumModel};
use crate::quad::adaptive_gk;

/// Half-width of the band around −1 in which no verdict is given.
pub const INCONCLUSIVE_BAND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceVerdict {
    Convergent,
    Divergent,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceProbe {
    pub eta: f64,
    pub t: f64,
    pub n_max: usize,
    /// Σ_{n ≤ n_max} ∫₀ᵗ s^{−η}|e^{sa_n}g_n|²ds.
    pub partial: f64,
    /// Slope of log(contribution) against log(μ_n) over the last decade of
    /// modes, times the growth exponent δ of μ_n ≍ n^δ.
    pub tail_exponent: f64,
    pub verdict: TraceVerdict,
}

/// ∫₀ᵗ s^{−η}|e^{sa}g|²ds for one mode, after s = r^{1/(1−η)} removes the
/// endpoint singularity.
pub fn mode_trace_contribution(block: &ModeBlock, eta: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 - eta);
    let upper = t.powf(1.0 - eta);
    let f = |r: f64| {
        let s = r.powf(p);
        let w = semigroup_block(block, s).apply(&block.g);
        p * w.norm_squared()
    };
    // split where the mode has decayed so the adaptive rule sees the layer
    let decay = 1.0 / block.spectral_radius().max(1e-300);
    let knee = decay.min(t).powf(1.0 - eta);
    let a = adaptive_gk(f, 0.0, knee, 0.0, 1e-10, 500).value;
    let b = if knee < upper { adaptive_gk(f, knee, upper, 0.0, 1e-10, 500).value } else { 0.0 };
    a + b
}

pub fn trace_probe(model: &SpectrumModel, dynamics: &Dynamics, eta: f64, t: f64, n_max: usize) -> Result<TraceProbe> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Parameter(format!("eta must lie in (0,1), got {eta}")));
    }
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("t must be positive, got {t}")));
    }
    if n_max < 20 {
        return Err(Error::Parameter("trace probes need n_max >= 20".into()));
    }
    let blocks = (1..=n_max).map(|n| build_mode_block(model, dynamics, n)).collect::<Result<Vec<_>>>()?;
    let contributions: Vec<f64> = blocks.par_iter().map(|b| mode_trace_contribution(b, eta, t)).collect();
    let partial = contributions.iter().sum();
    let start = (n_max / 10).max(1);
    let (x, y): (Vec<f64>, Vec<f64>) = (start..=n_max)
        .map(|n| (blocks[n - 1].mu.ln(), contributions[n - 1].max(f64::MIN_POSITIVE).ln()))
        .unzip();
    let tail_exponent = least_squares_slope(&x, &y).0 * model.growth_exponent();
    let verdict = if tail_exponent < -1.0 - INCONCLUSIVE_BAND {
        TraceVerdict::Convergent
    } else if tail_exponent > -1.0 + INCONCLUSIVE_BAND {
        TraceVerdict::Divergent
    } else {
        TraceVerdict::Inconclusive
    };
    Ok(TraceProbe {
        eta,
        t,
        n_max,
        partial,
        tail_exponent,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{DampedParams, HeatParams};
    use approx::assert_relative_eq;
    use statrs::function::gamma::gamma_li;

    #[test]
    fn heat_contribution_matches_incomplete_gamma() {
        // μ^{−2γ}(2μ)^{η−1}·γ(1−η, 2μt)
        let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Heat(HeatParams::new(0.0, 0.2, 1).unwrap());
        for n in [1, 7, 60] {
            let b = build_mode_block(&model, &d, n).unwrap();
            let mu = b.mu;
            let exact = mu.powf(-0.4) * (2.0 * mu).powf(0.25 - 1.0) * gamma_li(0.75, 2.0 * mu * 0.5);
            assert_relative_eq!(mode_trace_contribution(&b, 0.25, 0.5), exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn heat_one_dimensional_converges() {
        let model = SpectrumModel::cube_dirichlet(1, 1, 4000).unwrap();
        let d = Dynamics::Heat(HeatParams::new(0.0, 0.0, 1).unwrap());
        let p = trace_probe(&model, &d, 0.25, 1.0, 2000).unwrap();
        assert_eq!(p.verdict, TraceVerdict::Convergent);
        assert!((p.tail_exponent + 1.5).abs() < 0.05, "{}", p.tail_exponent);
    }

    #[test]
    fn heat_boundary_is_not_convergent() {
        let model = SpectrumModel::cube_dirichlet(3, 1, 40000).unwrap();
        let d = Dynamics::Heat(HeatParams::new(0.0, 0.25, 3).unwrap());
        let p = trace_probe(&model, &d, 0.05, 1.0, 20000).unwrap();
        assert_ne!(p.verdict, TraceVerdict::Convergent, "{}", p.tail_exponent);
    }

    #[test]
    fn damped_above_threshold_converges() {
        // δ(2γ+α) = 2·0.6 = 1.2
        let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.0, 0.05).unwrap());
        let p = trace_probe(&model, &d, 0.01, 1.0, 4000).unwrap();
        assert_eq!(p.verdict, TraceVerdict::Convergent, "{}", p.tail_exponent);
    }
}
