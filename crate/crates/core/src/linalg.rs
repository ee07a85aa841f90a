//! Small dense linear algebra for per-mode blocks.
//!
//! Every Galerkin mode lives in a one-dimensional (heat) or two-dimensional
//! (damped) invariant subspace. Blocks are stored as `Matrix2<f64>` with the
//! unused row and column zeroed when `dim == 1`, so products of blocks keep
//! that pattern and no heap allocation happens in inner loops.

use nalgebra::{Matrix2, Vector2};

/// A 1×1 or 2×2 real matrix embedded in the top-left corner of a `Matrix2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeMatrix {
    dim: usize,
    m: Matrix2<f64>,
}

impl ModeMatrix {
    pub fn new(dim: usize, m: Matrix2<f64>) -> Self {
        debug_assert!(dim == 1 || dim == 2);
        let mut m = m;
        if dim == 1 {
            m[(0, 1)] = 0.0;
            m[(1, 0)] = 0.0;
            m[(1, 1)] = 0.0;
        }
        Self { dim, m }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, Matrix2::new(value, 0.0, 0.0, 0.0))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, Matrix2::identity())
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(dim, Matrix2::zeros())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.dim && col < self.dim, "index out of block");
        self.m[(row, col)]
    }

    /// The embedded 2×2 storage (zero padded for 1×1 blocks).
    pub fn raw(&self) -> &Matrix2<f64> {
        &self.m
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.dim, self.m.transpose())
    }

    pub fn mul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        Self::new(self.dim, self.m * other.m)
    }

    pub fn apply(&self, v: &Vector2<f64>) -> Vector2<f64> {
        self.m * v
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.dim, self.m - other.m)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.dim, self.m * s)
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        if self.dim == 1 {
            return self.m[(0, 0)].abs();
        }
        spectral_norm2(&self.m)
    }

    /// Entry-wise maximum absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.m - other.m).abs().max()
    }
}

/// Largest singular value of a 2×2 matrix via the closed form
/// σ² = (‖M‖_F² + √(‖M‖_F⁴ − 4 det²)) / 2.
/// Euclidean norm without squaring, so tiny entries do not underflow.
pub fn norm2(v: &Vector2<f64>) -> f64 {
    v[0].hypot(v[1])
}

pub fn spectral_norm2(m: &Matrix2<f64>) -> f64 {
    let fro2 = m.norm_squared();
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
    ((fro2 + disc) / 2.0).sqrt()
}

/// Eigen-factorization of a symmetric positive-semidefinite 1×1 or 2×2 block.
///
/// The eigenvalues are sorted descending; the small one is recomputed as
/// `det / λ_max`, which keeps its relative accuracy when the block is badly
/// conditioned (small-time Gramians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymFactor {
    dim: usize,
    values: [f64; 2],
    vectors: Matrix2<f64>,
}

/// Eigenvalues below this are treated as exact zeros when inverting.
pub const EIGEN_FLOOR: f64 = 1e-300;

impl SymFactor {
    pub fn new(q: &ModeMatrix) -> Self {
        let m = q.raw();
        if q.dim() == 1 {
            return Self {
                dim: 1,
                values: [m[(0, 0)].max(0.0), 0.0],
                vectors: Matrix2::new(1.0, 0.0, 0.0, 0.0),
            };
        }
        let a = m[(0, 0)];
        let d = m[(1, 1)];
        let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
        let mean = 0.5 * (a + d);
        let half_diff = 0.5 * (a - d);
        let radius = half_diff.hypot(b);
        let lmax = mean + radius;
        let det = a * d - b * b;
        let lmin = if lmax > 0.0 { det / lmax } else { mean - radius };
        // eigenvector of lmax: rotation angle θ with tan 2θ = 2b/(a−d)
        let theta = 0.5 * (2.0 * b).atan2(a - d);
        let (s, c) = theta.sin_cos();
        let vectors = Matrix2::new(c, -s, s, c);
        Self {
            dim: 2,
            values: [lmax.max(0.0), lmin.max(0.0)],
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Eigenvalues, descending (second entry is zero for 1×1 blocks).
    pub fn values(&self) -> [f64; 2] {
        self.values
    }

    fn apply_diag(&self, w: &Vector2<f64>, f: impl Fn(f64) -> f64) -> Vector2<f64> {
        let mut out = Vector2::zeros();
        for i in 0..self.dim {
            let col = self.vectors.column(i);
            let coef = col.dot(w);
            out += col * (coef * f(self.values[i]));
        }
        out
    }

    /// Q⁻¹w with eigenvalues floored at [`EIGEN_FLOOR`].
    pub fn solve(&self, w: &Vector2<f64>) -> Vector2<f64> {
        self.apply_diag(w, |l| 1.0 / l.max(EIGEN_FLOOR))
    }

    /// Q^{−1/2}w (symmetric root) with the same floor.
    pub fn inv_sqrt_apply(&self, w: &Vector2<f64>) -> Vector2<f64> {
        self.apply_diag(w, |l| 1.0 / l.max(EIGEN_FLOOR).sqrt())
    }

    /// Symmetric square root Q^{1/2}.
    pub fn sqrt(&self) -> ModeMatrix {
        let mut m = Matrix2::zeros();
        for i in 0..self.dim {
            let col = self.vectors.column(i);
            m += col * col.transpose() * self.values[i].sqrt();
        }
        ModeMatrix::new(self.dim, m)
    }

    /// Symmetric inverse square root Q^{−1/2}.
    pub fn inv_sqrt(&self) -> ModeMatrix {
        let mut m = Matrix2::zeros();
        for i in 0..self.dim {
            let col = self.vectors.column(i);
            m += col * col.transpose() / self.values[i].max(EIGEN_FLOOR).sqrt();
        }
        ModeMatrix::new(self.dim, m)
    }

    /// Reassembled matrix V diag(λ) Vᵀ.
    pub fn reconstruct(&self) -> ModeMatrix {
        let mut m = Matrix2::zeros();
        for i in 0..self.dim {
            let col = self.vectors.column(i);
            m += col * col.transpose() * self.values[i];
        }
        ModeMatrix::new(self.dim, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_norm_of_diagonal_and_rotation() {
        let d = Matrix2::new(3.0, 0.0, 0.0, -5.0);
        assert_relative_eq!(spectral_norm2(&d), 5.0, epsilon = 1e-14);
        let (s, c) = 0.3f64.sin_cos();
        let r = Matrix2::new(c, -s, s, c) * 2.0;
        assert_relative_eq!(spectral_norm2(&r), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let m = Matrix2::new(1.0, 2.0, -0.5, 4.0);
        let svd = m.svd(false, false);
        assert_relative_eq!(spectral_norm2(&m), svd.singular_values.max(), epsilon = 1e-13);
    }

    #[test]
    fn factor_solves_and_roots() {
        let q = ModeMatrix::new(2, Matrix2::new(2.0, 0.7, 0.7, 1.0));
        let f = SymFactor::new(&q);
        let w = Vector2::new(0.3, -1.2);
        let y = f.solve(&w);
        assert_relative_eq!(q.apply(&y), w, epsilon = 1e-13);
        let r = f.sqrt();
        assert_relative_eq!(r.mul(&r).raw(), q.raw(), epsilon = 1e-13);
        let ri = f.inv_sqrt();
        assert_relative_eq!(ri.mul(&r).raw(), &Matrix2::identity(), epsilon = 1e-13);
    }

    #[test]
    fn ill_conditioned_small_eigenvalue_keeps_relative_accuracy() {
        // Q = [[t³/3, t²/2],[t²/2, t]] at t = 1e-4, det = t⁴/12
        let t: f64 = 1e-4;
        let q = ModeMatrix::new(2, Matrix2::new(t.powi(3) / 3.0, t * t / 2.0, t * t / 2.0, t));
        let f = SymFactor::new(&q);
        let [l0, l1] = f.values();
        assert_relative_eq!(l0 * l1, t.powi(4) / 12.0, max_relative = 1e-10);
    }

    #[test]
    fn scalar_blocks_behave() {
        let q = ModeMatrix::scalar(4.0);
        let f = SymFactor::new(&q);
        assert_eq!(f.sqrt().get(0, 0), 2.0);
        assert_eq!(f.solve(&Vector2::new(2.0, 0.0))[0], 0.5);
        assert_eq!(ModeMatrix::identity(1).raw()[(1, 1)], 0.0);
    }
}
