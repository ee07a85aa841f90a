//! Suprema over modes of the per-mode Γ norms.

use rayon::prelude::*;

use super::gramian::{gamma_block_norm, gamma_v_norm, gramian_block_with, GramianMethod};
use crate::error::{Error, Result};
use crate::operators::{build_mode_block, sup_over_modes, Dynamics, ModeSup, SpectrumModel};

/// Which operator's norm is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaVariant {
    /// ‖Γ_t𝒱‖: Q^{−1/2}e^{ta} applied to the drift column.
    WithDrift,
    /// ‖Γ_t‖: the operator norm of Q^{−1/2}e^{ta} itself.
    Plain,
}

/// Per-mode values of the chosen Γ norm for modes 1..=n_max.
pub fn gamma_mode_values(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    t: f64,
    n_max: usize,
    variant: GammaVariant,
    method: GramianMethod,
) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("t must be positive, got {t}")));
    }
    if n_max == 0 {
        return Err(Error::Parameter("n_max must be >= 1".into()));
    }
    (1..=n_max)
        .into_par_iter()
        .map(|n| {
            let block = build_mode_block(model, dynamics, n)?;
            let gram = gramian_block_with(&block, t, method)?;
            match variant {
                GammaVariant::WithDrift => gamma_v_norm(&block, &gram),
                GammaVariant::Plain => gamma_block_norm(&block, &gram),
            }
        })
        .collect()
}

/// sup over modes 1..=n_max of the per-mode Γ norm. The operators are block
/// diagonal across mode subspaces, so this is the operator norm on H_{n_max}.
pub fn gamma_operator_norm(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    t: f64,
    n_max: usize,
    variant: GammaVariant,
    method: GramianMethod,
) -> Result<ModeSup> {
    let values = gamma_mode_values(model, dynamics, t, n_max, variant, method)?;
    Ok(sup_over_modes(&values))
}

/// Result of an adaptively truncated supremum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveSup {
    pub sup: ModeSup,
    pub n_max: usize,
}

/// A mode is treated as negligible once t·min|Re λ| reaches this value.
pub const DECAY_HORIZON: f64 = 10.0;

/// Doubles n_max from `n_start` until the maximizer sits in the first half of
/// the modes and the last mode has decayed over t (t·min|Re λ| ≥
/// [`DECAY_HORIZON`]), so that the supremum is not truncation-limited and not
/// a local bump at low modes. `values(lo, hi)` returns modes lo..=hi.
pub fn adaptive_mode_sup(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    t: f64,
    n_start: usize,
    n_cap: usize,
    mut values: impl FnMut(usize, usize) -> Result<Vec<f64>>,
) -> Result<AdaptiveSup> {
    let mut n = n_start.max(2).min(n_cap.max(2));
    let mut all = values(1, n)?;
    loop {
        let sup = sup_over_modes(&all);
        let last = build_mode_block(model, dynamics, n)?;
        let slow = last.eigs.0.re.abs().min(last.eigs.1.re.abs());
        if 2 * sup.argmax <= n && t * slow >= DECAY_HORIZON {
            return Ok(AdaptiveSup { sup, n_max: n });
        }
        if n >= n_cap {
            return Err(Error::Capacity(format!(
                "supremum not settled at the cap n_max = {n_cap} (maximizer at mode {}, t·min|Re λ| = {:.3})",
                sup.argmax,
                t * slow
            )));
        }
        let next = (2 * n).min(n_cap);
        all.extend(values(n + 1, next)?);
        n = next;
    }
}

/// [`adaptive_mode_sup`] of the chosen Γ norm.
pub fn gamma_operator_norm_adaptive(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    t: f64,
    n_start: usize,
    n_cap: usize,
    variant: GammaVariant,
    method: GramianMethod,
) -> Result<AdaptiveSup> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("t must be positive, got {t}")));
    }
    adaptive_mode_sup(model, dynamics, t, n_start, n_cap, |lo, hi| {
        (lo..=hi)
            .into_par_iter()
            .map(|n| {
                let block = build_mode_block(model, dynamics, n)?;
                let gram = gramian_block_with(&block, t, method)?;
                match variant {
                    GammaVariant::WithDrift => gamma_v_norm(&block, &gram),
                    GammaVariant::Plain => gamma_block_norm(&block, &gram),
                }
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{DampedParams, HeatParams};
    use approx::assert_relative_eq;

    fn heat(gamma: f64, beta: f64) -> Dynamics {
        Dynamics::Heat(HeatParams::new(beta, gamma, 1).unwrap())
    }

    #[test]
    fn heat_sup_is_interior_and_matches_closed_scan() {
        let model = SpectrumModel::cube_dirichlet(1, 1, 1000).unwrap();
        let t = 1.0;
        let sup = gamma_operator_norm(&model, &heat(0.0, 0.0), t, 100, GammaVariant::WithDrift, GramianMethod::default()).unwrap();
        // exhaustive scan of the closed form e^{−μt}√(2μ/(1−e^{−2μt}))
        let scan: Vec<f64> = (1..=100)
            .map(|n| {
                let mu = model.eigenvalue(n).unwrap();
                (-mu * t).exp() * (2.0 * mu / (1.0 - (-2.0 * mu * t).exp())).sqrt()
            })
            .collect();
        let best = scan.iter().cloned().fold(0.0, f64::max);
        assert_relative_eq!(sup.value, best, max_relative = 1e-12);
        // the per-mode value decreases in μ, so the sup sits at the first mode
        assert_eq!(sup.argmax, 1);
        assert!(sup.monotone_tail);
    }

    #[test]
    fn sup_equals_exhaustive_scan_exactly() {
        let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = Dynamics::Damped(DampedParams::new(0.3, 1.0, 0.0, 0.2).unwrap());
        let values = gamma_mode_values(&model, &d, 0.05, 60, GammaVariant::WithDrift, GramianMethod::default()).unwrap();
        let sup = gamma_operator_norm(&model, &d, 0.05, 60, GammaVariant::WithDrift, GramianMethod::default()).unwrap();
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(sup.value, max);
        assert_eq!(values[sup.argmax - 1], max);
    }

    #[test]
    fn norm_grows_as_time_shrinks() {
        let model = SpectrumModel::cube_dirichlet(1, 1, 1000).unwrap();
        let d = heat(0.3, 0.0);
        let vals: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&t| gamma_operator_norm(&model, &d, t, 200, GammaVariant::Plain, GramianMethod::default()).unwrap().value)
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2]);
    }

    #[test]
    fn adaptive_truncation_moves_past_the_peak() {
        let model = SpectrumModel::power_law(1.0, 2.0).unwrap();
        let d = heat(0.5, 0.0);
        let a = gamma_operator_norm_adaptive(&model, &d, 1e-3, 4, 1 << 14, GammaVariant::WithDrift, GramianMethod::default()).unwrap();
        assert!(2 * a.sup.argmax <= a.n_max);
        assert!(a.n_max > 4);
        let err = gamma_operator_norm_adaptive(&model, &d, 1e-5, 4, 8, GammaVariant::WithDrift, GramianMethod::default());
        assert!(matches!(err, Err(Error::Capacity(_))));
    }
}
