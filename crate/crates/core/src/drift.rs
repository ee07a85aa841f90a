//! Bounded drifts B: H → U, evaluated on Galerkin states.
//!
//! A drift is defined once on the whole space and read on H_n through the
//! projection, so the same field serves every truncation level: only the
//! first n modes of the state are visible and n coefficients are produced.

use std::sync::Arc;

const RECIPROCALS: usize = 1024;

type DriftFn = dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync;

/// B with a known bound on sup_x ‖B(x)‖_U.
#[derive(Clone)]
pub struct DriftField {
    eval: Arc<DriftFn>,
    sup: f64,
    label: String,
}

impl std::fmt::Debug for DriftField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftField").field("label", &self.label).field("sup", &self.sup).finish()
    }
}

impl DriftField {
    /// `eval(x, block_dim, out)` writes one coefficient per mode of `out`;
    /// `x` holds `out.len()` blocks of `block_dim` coordinates.
    pub fn new(label: impl Into<String>, sup: f64, eval: impl Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            sup,
            label: label.into(),
        }
    }

    pub fn zero() -> Self {
        Self::new("zero", 0.0, |_, _, out| out.iter_mut().for_each(|o| *o = 0.0))
    }

    /// B ≡ c on the modes where c is given, zero beyond.
    pub fn constant(c: Vec<f64>) -> Self {
        let sup = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new("constant", sup, move |_, _, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = c.get(k).copied().unwrap_or(0.0);
            }
        })
    }

    /// B(x)_k = amplitude·b_k·tanh(Σ_j x_j/j) with b_k = (√6/π)/k and x_j the
    /// first coordinate of mode j. Since Σ b_k² = 1, ‖B‖_∞ = amplitude on
    /// the full space and every truncation stays below it.
    pub fn tanh_ridge(amplitude: f64) -> Self {
        let norm = 6f64.sqrt() / std::f64::consts::PI;
        let inv: Vec<f64> = (1..=RECIPROCALS).map(|k| 1.0 / k as f64).collect();
        Self::new(format!("tanh_ridge({amplitude})"), amplitude.abs(), move |x, block_dim, out| {
            let n = out.len();
            let r = |j: usize| inv.get(j).copied().unwrap_or_else(|| 1.0 / (j + 1) as f64);
            let s: f64 = (0..n).map(|j| x[j * block_dim] * r(j)).sum();
            let th = amplitude * norm * s.tanh();
            for (k, o) in out.iter_mut().enumerate() {
                *o = th * r(k);
            }
        })
    }

    /// The same field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let inner = self.eval.clone();
        Self {
            eval: Arc::new(move |x, bd, out| {
                inner(x, bd, out);
                out.iter_mut().for_each(|o| *o *= c);
            }),
            sup: self.sup * c.abs(),
            label: format!("{}*{c}", self.label),
        }
    }

    pub fn sup(&self) -> f64 {
        self.sup
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, x: &[f64], block_dim: usize, out: &mut [f64]) {
        (self.eval)(x, block_dim, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_ridge_is_bounded_and_projection_consistent() {
        let b = DriftField::tanh_ridge(1.0);
        let x = vec![3.0, -1.0, 2.0, 0.5, 7.0, 1.0];
        let mut o3 = vec![0.0; 3];
        b.eval(&x, 2, &mut o3);
        let norm = o3.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1.0);
        let mut big = vec![0.0; 200];
        let mut many = vec![0.0; 200];
        many[0] = 50.0;
        b.eval(&big.clone(), 1, &mut big);
        assert!(big.iter().all(|v| *v == 0.0));
        b.eval(&many, 1, &mut big);
        let n: f64 = big.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n < 1.0 && n > 0.99);
    }

    #[test]
    fn scaling_and_constant() {
        let b = DriftField::constant(vec![3.0, 4.0]).scaled(1.5);
        assert_eq!(b.sup(), 7.5);
        let mut o = vec![0.0; 3];
        b.eval(&[0.0; 3], 1, &mut o);
        assert_eq!(o, vec![4.5, 6.0, 0.0]);
    }
}
