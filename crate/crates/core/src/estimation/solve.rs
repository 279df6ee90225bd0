//! Symmetric solve of the contrast normal equations with a small ridge.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};

use super::EstimationError;

/// Ridge added to the Gram matrix before factoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    /// Adds exactly `value * I`.
    Absolute(f64),
    /// Rescales `A` to unit diagonal, adds `value * trace / dim` there and
    /// scales back, so features with very different magnitudes are damped
    /// evenly.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-8)
    }
}

impl Ridge {
    /// `1e-8 * trace(A) / dim` applied as an absolute ridge.
    pub fn trace_scaled(a: &Matrix) -> Ridge {
        let n = a.nrows().max(1) as f64;
        Ridge::Absolute(1e-8 * a.trace() / n)
    }
}

/// A factored Gram matrix reusable for several right-hand sides.
#[derive(Debug, Clone)]
pub struct GramSolver {
    chol: Cholesky<f64, nalgebra::Dyn>,
    scale: Vector,
}

impl GramSolver {
    pub fn factor(a: &Matrix, ridge: Ridge) -> Result<Self, EstimationError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(EstimationError::DimensionMismatch { expected: n, found: a.ncols() });
        }
        let (mut m, scale) = match ridge {
            Ridge::Absolute(r) => {
                if !(r >= 0.0) {
                    return Err(EstimationError::InvalidRidge(r));
                }
                let mut m = a.clone();
                for i in 0..n {
                    m[(i, i)] += r;
                }
                (m, Vector::from_element(n, 1.0))
            }
            Ridge::Relative(eps) => {
                if !(eps >= 0.0) {
                    return Err(EstimationError::InvalidRidge(eps));
                }
                let scale = Vector::from_fn(n, |i, _| {
                    let d = a[(i, i)];
                    if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }
                });
                let mut m = Matrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
                let r = eps * m.trace() / n.max(1) as f64;
                for i in 0..n {
                    m[(i, i)] += r;
                }
                (m, scale)
            }
        };
        // enforce exact symmetry before factoring
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let chol = Cholesky::new(m).ok_or(EstimationError::SingularSystem)?;
        Ok(Self { chol, scale })
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector, EstimationError> {
        if b.len() != self.scale.len() {
            return Err(EstimationError::DimensionMismatch { expected: self.scale.len(), found: b.len() });
        }
        let scaled = b.component_mul(&self.scale);
        let y = self.chol.solve(&scaled);
        let theta = y.component_mul(&self.scale);
        if theta.iter().all(|v| v.is_finite()) {
            Ok(theta)
        } else {
            Err(EstimationError::SingularSystem)
        }
    }
}

/// Solves `(A + ridge) theta = b`.
pub fn solve_least_squares(a: &Matrix, b: &Vector, ridge: Ridge) -> Result<Vector, EstimationError> {
    GramSolver::factor(a, ridge)?.solve(b)
}
