//! Internal dense linear-algebra helpers.
//!
//! Circuit pencils mix femtofarad and hundreds-of-nanohenry scales, so the
//! raw matrices are badly scaled (condition numbers ~1e7 from scaling alone).
//! All factorizations here first apply an exact power-of-two diagonal
//! congruence `K ↦ D⁻¹KD⁻¹` derived from the mass-matrix diagonal; powers of
//! two keep the transform lossless in floating point. One step of iterative
//! refinement on each solve pushes residuals to the double-precision floor.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex shorthand.
pub type C64 = Complex64;

/// Lift a real matrix into the complex field.
pub fn complexify(a: &DMatrix<f64>) -> DMatrix<C64> {
    a.map(|x| C64::new(x, 0.0))
}

/// Exact power-of-two balancing diagonal from the mass-matrix diagonal:
/// `d_i = 2^round(log2(m_ii)/2)`, with a guard for non-positive entries.
pub fn balance_diagonal(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| {
        let mii = m[(i, i)].abs();
        if mii > 0.0 {
            (2.0_f64).powi((mii.log2() / 2.0).round() as i32)
        } else {
            1.0
        }
    })
}

/// Apply the congruence `D⁻¹ A D⁻¹` (real).
pub fn balance_congruence(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / (d[i] * d[j]))
}

/// LU factorization of the balanced pencil `N + sM`, exposing solves in the
/// original (unbalanced) coordinates with one iterative-refinement step.
pub struct PencilSolve {
    lu: nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>,
    k_balanced: DMatrix<C64>,
    d: DVector<f64>,
}

impl PencilSolve {
    /// Factor `N + sM`. Fails if the matrix is singular at `s` (within a
    /// pivot-ratio tolerance), which happens exactly when `s` hits an
    /// eigenvalue of the pencil.
    pub fn new(m: &DMatrix<f64>, n: &DMatrix<f64>, s: C64) -> Result<Self> {
        let dim = m.nrows();
        let d = balance_diagonal(m);
        let mut k = DMatrix::<C64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let scale = d[i] * d[j];
                k[(i, j)] = (C64::new(n[(i, j)], 0.0) + s * m[(i, j)]) / scale;
            }
        }
        let lu = k.clone().lu();
        let udiag: Vec<f64> = (0..dim).map(|i| lu.u()[(i, i)].norm()).collect();
        let umax = udiag.iter().cloned().fold(0.0_f64, f64::max);
        let umin = udiag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(umin > umax * 1e-14 * (dim as f64) && umax.is_finite() && umax > 0.0) {
            return Err(Error::numerical(format!(
                "pencil N + sM is singular at s = {:.6e}{:+.6e}j",
                s.re, s.im
            )));
        }
        Ok(PencilSolve { lu, k_balanced: k, d })
    }

    /// Solve `(N + sM) X = B` for a complex right-hand side matrix.
    pub fn solve(&self, b: &DMatrix<C64>) -> DMatrix<C64> {
        let dim = b.nrows();
        let cols = b.ncols();
        // Original coordinates: x = D⁻¹ y, K_bal y = D⁻¹ b.
        let mut rhs = DMatrix::<C64>::zeros(dim, cols);
        for j in 0..cols {
            for i in 0..dim {
                rhs[(i, j)] = b[(i, j)] / self.d[i];
            }
        }
        let mut y = self.lu.solve(&rhs).expect("factorized LU must solve");
        // One iterative-refinement step.
        let resid = &rhs - &self.k_balanced * &y;
        let corr = self.lu.solve(&resid).expect("factorized LU must solve");
        y += corr;
        let mut x = y;
        for j in 0..cols {
            for i in 0..dim {
                x[(i, j)] /= self.d[i];
            }
        }
        x
    }

    /// Solve `Xᵀ (N + sM) = Bᵀ`, i.e. the transposed system
    /// `(N + sM)ᵀ X = B`.
    pub fn solve_transpose(&self, b: &DMatrix<C64>) -> DMatrix<C64> {
        // (N+sM)ᵀ = D K_balᵀ D, so x = D⁻¹ z with K_balᵀ z = D⁻¹ b.
        let kt = self.k_balanced.transpose();
        let lu = kt.clone().lu();
        let dim = b.nrows();
        let cols = b.ncols();
        let mut rhs = DMatrix::<C64>::zeros(dim, cols);
        for j in 0..cols {
            for i in 0..dim {
                rhs[(i, j)] = b[(i, j)] / self.d[i];
            }
        }
        let mut z = lu.solve(&rhs).expect("factorized LU must solve");
        let resid = &rhs - &kt * &z;
        z += lu.solve(&resid).expect("factorized LU must solve");
        let mut x = z;
        for j in 0..cols {
            for i in 0..dim {
                x[(i, j)] /= self.d[i];
            }
        }
        x
    }
}

/// Solve a general complex dense system `A X = B` with partial-pivot LU and
/// one refinement step. Errors if `A` is numerically singular.
pub fn solve_complex(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let dim = a.nrows();
    let lu = a.clone().lu();
    let udiag: Vec<f64> = (0..dim).map(|i| lu.u()[(i, i)].norm()).collect();
    let umax = udiag.iter().cloned().fold(0.0_f64, f64::max);
    let umin = udiag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(umin > umax * 1e-14 * (dim as f64) && umax.is_finite() && umax > 0.0) {
        return Err(Error::numerical("singular complex system"));
    }
    let mut x = lu.solve(b).expect("factorized LU must solve");
    let resid = b - a * &x;
    x += lu.solve(&resid).expect("factorized LU must solve");
    Ok(x)
}

/// Max relative deviation between two complex matrices, normalized by the
/// largest magnitude in `reference`.
pub fn rel_deviation(a: &DMatrix<C64>, reference: &DMatrix<C64>) -> f64 {
    let scale = reference.iter().map(|x| x.norm()).fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return a.iter().map(|x| x.norm()).fold(0.0_f64, f64::max);
    }
    let mut worst = 0.0_f64;
    for (x, y) in a.iter().zip(reference.iter()) {
        worst = worst.max((x - y).norm() / scale);
    }
    worst
}
