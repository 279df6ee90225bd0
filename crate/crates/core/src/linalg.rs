//! Dense linear algebra used by the branching algebra: LU with partial
//! pivoting and a Perron-root power iteration for nonnegative matrices.

use nalgebra::{DMatrix, DVector};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Pivot magnitude below which a matrix is treated as numerically singular.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct SingularPivot {
    pub column: usize,
    pub pivot: f64,
}

/// Row-pivoted LU factors `P A = L U`, packed in one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    packed: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Self, SingularPivot> {
        assert!(a.is_square(), "LU requires a square matrix");
        let n = a.nrows();
        let mut m = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|r| (r, m[(r, k)].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best < PIVOT_TOLERANCE {
                return Err(SingularPivot { column: k, pivot: best });
            }
            if p != k {
                m.swap_rows(p, k);
                perm.swap(p, k);
            }
            let pivot = m[(k, k)];
            for r in (k + 1)..n {
                let factor = m[(r, k)] / pivot;
                m[(r, k)] = factor;
                if factor != 0.0 {
                    for c in (k + 1)..n {
                        m[(r, c)] -= factor * m[(k, c)];
                    }
                }
            }
        }
        Ok(Self { packed: m, perm })
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        let n = self.packed.nrows();
        let mut x = Vector::from_iterator(n, self.perm.iter().map(|&p| b[p]));
        for r in 0..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.packed[(r, c)] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in (r + 1)..n {
                acc -= self.packed[(r, c)] * x[c];
            }
            x[r] = acc / self.packed[(r, r)];
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.packed.nrows();
        let mut inv = Matrix::zeros(n, n);
        for c in 0..n {
            let mut e = Vector::zeros(n);
            e[c] = 1.0;
            inv.set_column(c, &self.solve(&e));
        }
        inv
    }
}

/// Largest absolute entry.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerIterationStalled {
    pub iterations: usize,
    pub last_estimate: f64,
}

/// Perron root of the entrywise absolute value of `m`.
///
/// Iterates on `|m| + I`, which is primitive on every class with a nonzero
/// root, so periodic matrices such as `[[0, a], [b, 0]]` still converge; the
/// shift is removed from the final estimate.
pub fn perron_root_abs(
    m: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<f64, PowerIterationStalled> {
    assert!(m.is_square(), "spectral radius requires a square matrix");
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut shifted = m.map(f64::abs);
    for i in 0..n {
        shifted[(i, i)] += 1.0;
    }
    let mut x = Vector::from_element(n, 1.0);
    let mut estimate = f64::NAN;
    for it in 0..max_iter {
        let y = &shifted * &x;
        let norm = y.amax();
        let next = norm / x.amax();
        x = y / norm;
        if (next - estimate).abs() <= tol * next.max(1.0) {
            return Ok((next - 1.0).max(0.0));
        }
        estimate = next;
        if it + 1 == max_iter {
            break;
        }
    }
    Err(PowerIterationStalled {
        iterations: max_iter,
        last_estimate: estimate - 1.0,
    })
}
