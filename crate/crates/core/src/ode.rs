//! Adaptive Dormand–Prince 5(4) integrator for small fixed-size systems.
//!
//! The caller supplies the per-component error scale, which lets the
//! Lyapunov integrator measure off-diagonal errors against √(Q₁₁Q₂₂)
//! instead of the entry itself.

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    /// Largest step allowed, as a fraction of the interval length.
    pub max_step_fraction: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            max_steps: 5_000_000,
            initial_step: None,
            max_step_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OdeFailure {
    StepUnderflow { t: f64, h: f64 },
    TooManySteps { t: f64 },
    NonFinite { t: f64 },
}

impl std::fmt::Display for OdeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OdeFailure::StepUnderflow { t, h } => write!(f, "step size underflow (h = {h:e}) at t = {t:e}"),
            OdeFailure::TooManySteps { t } => write!(f, "step budget exhausted at t = {t:e}"),
            OdeFailure::NonFinite { t } => write!(f, "non-finite state at t = {t:e}"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[inline]
fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        let hc = h * c;
        for i in 0..N {
            out[i] += hc * k[i];
        }
    }
    out
}

/// Integrates `y' = f(t, y)` from `t0` to `t1`.
///
/// `scale(y_old, y_new)` returns the admissible local error per component
/// (tolerance already folded in); a step is accepted when
/// `max_i |err_i| / scale_i ≤ 1`.
pub fn dopri5<const N: usize, F, S>(
    mut f: F,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    opts: &OdeOptions,
    scale: S,
) -> Result<([f64; N], OdeStats), OdeFailure>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
    S: Fn(&[f64; N], &[f64; N]) -> [f64; N],
{
    let span = t1 - t0;
    let mut stats = OdeStats {
        accepted: 0,
        rejected: 0,
    };
    if span <= 0.0 {
        return Ok((y0, stats));
    }
    let h_max = span * opts.max_step_fraction;
    let mut h = opts.initial_step.unwrap_or(span * 1e-3).min(h_max);
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let mut steps = 0usize;

    while t < t1 {
        if steps >= opts.max_steps {
            return Err(OdeFailure::TooManySteps { t });
        }
        steps += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        if h <= 1e-15 * t.abs().max(span) {
            return Err(OdeFailure::StepUnderflow { t, h });
        }

        let k2 = f(t + C2 * h, &axpy(&y, h, &[(A21, &k1)]));
        let k3 = f(t + C3 * h, &axpy(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(t + C4 * h, &axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(
            t + C5 * h,
            &axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + h,
            &axpy(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        );
        let y_new = axpy(&y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let t_new = if last { t1 } else { t + h };
        let k7 = f(t_new, &y_new);

        let sc = scale(&y, &y_new);
        let mut err = 0.0f64;
        for i in 0..N {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let s = sc[i];
            let r = if s > 0.0 { e.abs() / s } else if e == 0.0 { 0.0 } else { f64::INFINITY };
            err = err.max(r);
        }
        if !err.is_finite() && y_new.iter().any(|v| !v.is_finite()) {
            return Err(OdeFailure::NonFinite { t });
        }

        if err <= 1.0 {
            t = t_new;
            y = y_new;
            k1 = k7;
            stats.accepted += 1;
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * factor).min(h_max);
        } else {
            stats.rejected += 1;
            let factor = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            h *= factor;
        }
    }
    Ok((y, stats))
}
