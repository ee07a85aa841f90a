//! Blow-up rates of the Γ norms as t → 0: predictions, fits and the
//! integrability condition ∫₀¹‖Γ_t𝒱‖dt < ∞.

use rayon::prelude::*;

use super::control::{control_energy, explicit_control};
use super::gramian::GramianMethod;
use super::norms::{adaptive_mode_sup, gamma_operator_norm_adaptive, GammaVariant};
use crate::error::{Error, Result};
use crate::operators::{build_mode_block, least_squares_slope, DampingBranch, Dynamics, SpectrumModel};

/// A log-log fit of norms against times.
#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    /// Strictly decreasing.
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// Exponent p in norm ≈ C·t^{−p}.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub predicted_exponent: Option<f64>,
}

impl RateFit {
    /// |slope − predicted|, if a prediction is attached.
    pub fn deviation(&self) -> Option<f64> {
        self.predicted_exponent.map(|p| (self.slope - p).abs())
    }
}

/// `count` geometrically spaced times from `t_max` down to `t_min`.
pub fn geometric_times(t_min: f64, t_max: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && t_min > 0.0 && t_max > t_min);
    let ratio = (t_min / t_max).ln() / (count - 1) as f64;
    (0..count).map(|k| t_max * (ratio * k as f64).exp()).collect()
}

/// Least-squares fit of −log(norm) against log(t).
pub fn fit_rate(times: &[f64], norms: &[f64]) -> Result<RateFit> {
    if times.len() != norms.len() {
        return Err(Error::Data(format!("{} times but {} norms", times.len(), norms.len())));
    }
    if times.len() < 6 {
        return Err(Error::Data(format!("a rate fit needs at least 6 points, got {}", times.len())));
    }
    if let Some(bad) = norms.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Data(format!("norms must be finite and positive, found {bad}")));
    }
    if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Data("times must be finite and positive".into()));
    }
    let mut pairs: Vec<(f64, f64)> = times.iter().copied().zip(norms.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Data("times must be distinct".into()));
    }
    let lt: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ln: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r2) = least_squares_slope(&lt, &ln);
    Ok(RateFit {
        times: pairs.iter().map(|p| p.0).collect(),
        norms: pairs.iter().map(|p| p.1).collect(),
        slope: -slope,
        intercept,
        r_squared: r2,
        predicted_exponent: None,
    })
}

/// Predicted exponent p in ‖Γ_t𝒱‖ ≍ t^{−p}: heat ½+γ−β; damped
/// ½ + max((γ−β)/α, 0) for α ≤ ½ and ½ + max((γ−β)/(1−α), 0) for α ≥ ½.
///
/// For heat with γ < β the per-mode bound is attained at the lowest mode and
/// the exponent is floored at ½, matching the damped case.
pub fn predicted_gamma_v_exponent(dynamics: &Dynamics) -> f64 {
    match dynamics {
        Dynamics::Heat(p) => 0.5 + (p.gamma - p.beta).max(0.0),
        Dynamics::Damped(p) => 0.5 + ((p.gamma - p.beta) / p.rate_denominator()).max(0.0),
    }
}

/// Predicted exponent for the plain ‖Γ_t‖: ½+γ for heat; for damped the
/// piecewise upper envelope ½ + (γ+α−½)/(1−α) when γ+2α ≥ 3/2 and 3/2
/// otherwise (an upper bound, not an asymptotic).
pub fn predicted_gamma_exponent(dynamics: &Dynamics) -> f64 {
    match dynamics {
        Dynamics::Heat(p) => 0.5 + p.gamma,
        Dynamics::Damped(p) => {
            if p.gamma + 2.0 * p.alpha >= 1.5 {
                0.5 + (p.gamma + p.alpha - 0.5) / (1.0 - p.alpha)
            } else {
                1.5
            }
        }
    }
}

/// The parameter condition under which ∫₀¹‖Γ_t𝒱‖dt converges.
pub fn integrability_condition(dynamics: &Dynamics) -> &'static str {
    match dynamics {
        Dynamics::Heat(_) => "beta > gamma - 1/2",
        Dynamics::Damped(p) => match p.branch() {
            DampingBranch::Low => "beta > gamma - alpha/2",
            DampingBranch::High => "beta > gamma - (1-alpha)/2",
        },
    }
}

/// Returns the predicted exponent if it is < 1, an integrability error
/// naming the violated condition otherwise.
pub fn check_integrability(dynamics: &Dynamics) -> Result<f64> {
    let exponent = predicted_gamma_v_exponent(dynamics);
    if exponent >= 1.0 {
        Err(Error::Integrability {
            exponent,
            condition: integrability_condition(dynamics).to_string(),
        })
    } else {
        Ok(exponent)
    }
}

/// What a rate sweep measures at each time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepQuantity {
    /// ‖Γ_t𝒱‖, i.e. the minimal energy steering 𝒱e_n to zero, sup over n.
    GammaV,
    /// ‖Γ_t‖.
    GammaPlain,
    /// L² energy of the explicit control for unit v, sup over n.
    ExplicitEnergy,
}

/// Mode supremum of `quantity` at every time (see [`adaptive_mode_sup`]),
/// then a log-log fit with the predicted exponent attached.
pub fn rate_sweep(
    model: &SpectrumModel,
    dynamics: &Dynamics,
    times: &[f64],
    quantity: SweepQuantity,
    n_start: usize,
    n_cap: usize,
) -> Result<RateFit> {
    let norms = times
        .iter()
        .map(|&t| match quantity {
            SweepQuantity::GammaV | SweepQuantity::GammaPlain => {
                let variant = if quantity == SweepQuantity::GammaV { GammaVariant::WithDrift } else { GammaVariant::Plain };
                Ok(gamma_operator_norm_adaptive(model, dynamics, t, n_start, n_cap, variant, GramianMethod::default())?.sup.value)
            }
            SweepQuantity::ExplicitEnergy => Ok(adaptive_mode_sup(model, dynamics, t, n_start, n_cap, |lo, hi| {
                (lo..=hi)
                    .into_par_iter()
                    .map(|n| Ok(control_energy(&explicit_control(&build_mode_block(model, dynamics, n)?, t, 1.0, dynamics)?)))
                    .collect()
            })?
            .sup
            .value),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut fit = fit_rate(times, &norms)?;
    fit.predicted_exponent = Some(match quantity {
        SweepQuantity::GammaPlain => predicted_gamma_exponent(dynamics),
        _ => predicted_gamma_v_exponent(dynamics),
    });
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{DampedParams, HeatParams};
    use approx::assert_relative_eq;

    #[test]
    fn exact_power_law() {
        let t = geometric_times(1e-3, 1e-1, 8);
        let n: Vec<f64> = t.iter().map(|t| t.powf(-0.8)).collect();
        let f = fit_rate(&t, &n).unwrap();
        assert!((f.slope - 0.8).abs() < 1e-12);
        assert_relative_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        assert!(f.times.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_data() {
        let t = geometric_times(1e-3, 1e-1, 8);
        let mut n = vec![1.0; 8];
        n[3] = 0.0;
        assert!(matches!(fit_rate(&t, &n), Err(Error::Data(_))));
        assert!(matches!(fit_rate(&t[..5], &n[..5]), Err(Error::Data(_))));
    }

    #[test]
    fn predictions() {
        let d = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.3, 0.3).unwrap());
        assert_eq!(predicted_gamma_v_exponent(&d), 0.5);
        let d = Dynamics::Damped(DampedParams::new(0.3, 1.0, 0.1, 0.4).unwrap());
        assert_relative_eq!(predicted_gamma_v_exponent(&d), 1.5, epsilon = 1e-12);
        let d = Dynamics::Damped(DampedParams::new(0.7, 1.0, 0.1, 0.4).unwrap());
        assert_relative_eq!(predicted_gamma_v_exponent(&d), 1.5, epsilon = 1e-12);
        let h = Dynamics::Heat(HeatParams::new(0.0, 0.3, 1).unwrap());
        assert_relative_eq!(predicted_gamma_v_exponent(&h), 0.8, epsilon = 1e-12);
        assert_relative_eq!(predicted_gamma_exponent(&h), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn integrability_boundaries() {
        let ok = Dynamics::Heat(HeatParams::new(0.2, 0.3, 1).unwrap());
        assert_relative_eq!(check_integrability(&ok).unwrap(), 0.6, epsilon = 1e-12);
        let bad = Dynamics::Damped(DampedParams::new(0.5, 1.0, 0.1, 0.6).unwrap());
        match check_integrability(&bad) {
            Err(Error::Integrability { exponent, condition }) => {
                assert_relative_eq!(exponent, 1.5, epsilon = 1e-12);
                assert_eq!(condition, "beta > gamma - alpha/2");
            }
            other => panic!("{other:?}"),
        }
    }
}
