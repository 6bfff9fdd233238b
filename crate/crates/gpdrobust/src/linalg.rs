//! Minimal fixed-size linear algebra for the two-parameter model.
//!
//! Everything in this crate lives in the two-dimensional parameter space
//! `(ξ, β)`, so a pair of small value types beats pulling in a full linear
//! algebra stack.

use serde::{Deserialize, Serialize};

/// Column vector in parameter space, ordered `(ξ-coordinate, β-coordinate)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Euclidean norm.
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Largest absolute component.
    pub fn norm_max(self) -> f64 {
        self.x.abs().max(self.y.abs())
    }

    pub fn scale(self, c: f64) -> Vec2 {
        Vec2::new(c * self.x, c * self.y)
    }

    pub fn add(self, other: Vec2) -> Vec2 {
        Vec2::new(self.x + other.x, self.y + other.y)
    }

    pub fn sub(self, other: Vec2) -> Vec2 {
        Vec2::new(self.x - other.x, self.y - other.y)
    }

    /// Outer product `self ⊗ other`.
    pub fn outer(self, other: Vec2) -> Mat2 {
        Mat2::new(
            self.x * other.x,
            self.x * other.y,
            self.y * other.x,
            self.y * other.y,
        )
    }
}

/// 2×2 matrix in row-major layout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
    };
    pub const ZERO: Mat2 = Mat2 {
        a11: 0.0,
        a12: 0.0,
        a21: 0.0,
        a22: 0.0,
    };

    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Mat2 { a11, a12, a21, a22 }
    }

    pub fn diag(d1: f64, d2: f64) -> Self {
        Mat2::new(d1, 0.0, 0.0, d2)
    }

    pub fn det(self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn trace(self) -> f64 {
        self.a11 + self.a22
    }

    pub fn transpose(self) -> Mat2 {
        Mat2::new(self.a11, self.a21, self.a12, self.a22)
    }

    /// Inverse; `None` when the determinant vanishes to working precision.
    pub fn inverse(self) -> Option<Mat2> {
        let det = self.det();
        let scale = self.norm_max().max(1.0);
        if !det.is_finite() || det.abs() <= f64::EPSILON * scale * scale {
            return None;
        }
        Some(Mat2::new(
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        ))
    }

    /// Inverse of a symmetric positive-semidefinite matrix with the
    /// condition number capped at `kappa`: the small eigenvalue is floored
    /// at `λ_max/kappa` before inverting, so a rank-deficient scatter
    /// still yields finite, correctly ordered quadratic forms. `None` when
    /// no eigenvalue is positive or an entry is not finite.
    pub fn inverse_conditioned(self, kappa: f64) -> Option<Mat2> {
        if !self.norm_max().is_finite() {
            return None;
        }
        let (lo, hi) = self.sym_eigenvalues();
        if !(hi > 0.0) {
            return None;
        }
        let lo = lo.max(hi / kappa);
        // Unit eigenvector of the large eigenvalue; when the off-diagonal
        // vanishes the eigenvectors are the axes.
        let b = 0.5 * (self.a12 + self.a21);
        let (vx, vy) = if b.abs() > f64::EPSILON * hi {
            (hi - self.a22, b)
        } else if self.a11 >= self.a22 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let nrm = vx.hypot(vy);
        let (vx, vy) = (vx / nrm, vy / nrm);
        // S⁻¹ = v vᵀ/λ_max + w wᵀ/λ_min with w ⟂ v.
        let (wx, wy) = (-vy, vx);
        Some(Mat2::new(
            vx * vx / hi + wx * wx / lo,
            vx * vy / hi + wx * wy / lo,
            vx * vy / hi + wx * wy / lo,
            vy * vy / hi + wy * wy / lo,
        ))
    }

    pub fn mul_vec(self, v: Vec2) -> Vec2 {
        Vec2::new(
            self.a11 * v.x + self.a12 * v.y,
            self.a21 * v.x + self.a22 * v.y,
        )
    }

    pub fn mul_mat(self, other: Mat2) -> Mat2 {
        Mat2::new(
            self.a11 * other.a11 + self.a12 * other.a21,
            self.a11 * other.a12 + self.a12 * other.a22,
            self.a21 * other.a11 + self.a22 * other.a21,
            self.a21 * other.a12 + self.a22 * other.a22,
        )
    }

    pub fn add(self, other: Mat2) -> Mat2 {
        Mat2::new(
            self.a11 + other.a11,
            self.a12 + other.a12,
            self.a21 + other.a21,
            self.a22 + other.a22,
        )
    }

    pub fn sub(self, other: Mat2) -> Mat2 {
        Mat2::new(
            self.a11 - other.a11,
            self.a12 - other.a12,
            self.a21 - other.a21,
            self.a22 - other.a22,
        )
    }

    pub fn scale(self, c: f64) -> Mat2 {
        Mat2::new(c * self.a11, c * self.a12, c * self.a21, c * self.a22)
    }

    /// Largest absolute entry.
    pub fn norm_max(self) -> f64 {
        self.a11
            .abs()
            .max(self.a12.abs())
            .max(self.a21.abs())
            .max(self.a22.abs())
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(self) -> (f64, f64) {
        let mean = 0.5 * (self.a11 + self.a22);
        let half_diff = 0.5 * (self.a11 - self.a22);
        let radius = half_diff.hypot(0.5 * (self.a12 + self.a21));
        (mean - radius, mean + radius)
    }

    /// True if symmetric (to a relative tolerance) and positive definite.
    pub fn is_symmetric_positive_definite(self, rel_tol: f64) -> bool {
        let scale = self.norm_max().max(f64::MIN_POSITIVE);
        if (self.a12 - self.a21).abs() > rel_tol * scale {
            return false;
        }
        let (lo, _) = self.sym_eigenvalues();
        lo > 0.0
    }
}
