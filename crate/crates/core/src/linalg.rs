//! Dense complex Hermitian linear algebra for the estimation path.
//!
//! The filtering equations only ever solve systems with Hermitian
//! positive-definite left-hand sides of antenna-count order (a handful of
//! rows), so a direct Cholesky factorization is used instead of a general
//! LU: it is branch-free, cache-trivial at these sizes, and fails loudly on
//! indefinite input instead of silently amplifying noise.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: matrix is {n}x{n}, rhs has {len} entries")]
    RhsMismatch { n: usize, len: usize },
    #[error("pivot {index} is not positive ({value:.3e}); matrix is not positive definite")]
    NotPositiveDefinite { index: usize, value: f64 },
}

/// Lower-triangular Cholesky factor L with `a = L L^H`.
///
/// Only the lower triangle and the real part of the diagonal of `a` are
/// read, as is conventional for Hermitian storage; the strict upper triangle
/// is ignored. Fails if any pivot is non-positive or non-finite.
pub fn cholesky(a: &Array2<Complex64>) -> Result<Array2<Complex64>, LinalgError> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    let mut l = Array2::<Complex64>::zeros((n, n));
    for j in 0..n {
        // Diagonal pivot: a_jj - sum_k |l_jk|^2 is real for Hermitian input.
        let mut d = a[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: j, value: d });
        }
        let pivot = d.sqrt();
        l[[j, j]] = Complex64::new(pivot, 0.0);
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / pivot;
        }
    }
    Ok(l)
}

/// Solves `L L^H x = b` given the Cholesky factor from [`cholesky`].
pub fn cholesky_solve(
    l: &Array2<Complex64>,
    b: &Array1<Complex64>,
) -> Result<Array1<Complex64>, LinalgError> {
    let n = l.nrows();
    if b.len() != n {
        return Err(LinalgError::RhsMismatch { n, len: b.len() });
    }
    // Forward: L y = b.
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let yk = y[k];
            y[i] -= l[[i, k]] * yk;
        }
        y[i] /= l[[i, i]];
    }
    // Backward: L^H x = y.
    let mut x = y;
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let xk = x[k];
            x[i] -= l[[k, i]].conj() * xk;
        }
        x[i] /= l[[i, i]];
    }
    Ok(x)
}

/// One-shot Hermitian positive-definite solve `a x = b`.
pub fn hermitian_solve(
    a: &Array2<Complex64>,
    b: &Array1<Complex64>,
) -> Result<Array1<Complex64>, LinalgError> {
    let l = cholesky(a)?;
    cholesky_solve(&l, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng_from, standard_normal};

    fn random_hpd(n: usize, seed: u64) -> Array2<Complex64> {
        // G G^H + I is Hermitian positive definite for any G.
        let mut rng = rng_from(seed);
        let g = Array2::from_shape_fn((n, n), |_| {
            Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng))
        });
        let mut a = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut s = Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0);
                for k in 0..n {
                    s += g[[i, k]] * g[[j, k]].conj();
                }
                a[[i, j]] = s;
            }
        }
        a
    }

    #[test]
    fn factor_reconstructs_matrix() {
        for n in 1..=8 {
            let a = random_hpd(n, 10 + n as u64);
            let l = cholesky(&a).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..n {
                        s += l[[i, k]] * l[[j, k]].conj();
                    }
                    let err = (s - a[[i, j]]).norm();
                    assert!(err < 1e-10, "n={n} ({i},{j}) err={err:.3e}");
                }
            }
        }
    }

    #[test]
    fn solve_residual_is_tiny() {
        for n in 1..=8 {
            let a = random_hpd(n, 20 + n as u64);
            let mut rng = rng_from(99 + n as u64);
            let b = Array1::from_shape_fn(n, |_| {
                Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng))
            });
            let x = hermitian_solve(&a, &b).unwrap();
            for i in 0..n {
                let mut r = b[i];
                for j in 0..n {
                    r -= a[[i, j]] * x[j];
                }
                assert!(r.norm() < 1e-9, "n={n} row {i} residual {:.3e}", r.norm());
            }
        }
    }

    #[test]
    fn factor_is_lower_triangular_with_real_positive_diagonal() {
        let a = random_hpd(5, 31);
        let l = cholesky(&a).unwrap();
        for i in 0..5 {
            assert!(l[[i, i]].im == 0.0 && l[[i, i]].re > 0.0);
            for j in (i + 1)..5 {
                assert_eq!(l[[i, j]], Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let mut a = Array2::<Complex64>::eye(3);
        a[[2, 2]] = Complex64::new(-4.0, 0.0);
        match cholesky(&a) {
            Err(LinalgError::NotPositiveDefinite { index: 2, value }) => {
                assert!(value < 0.0)
            }
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn rejects_shape_errors() {
        let a = Array2::<Complex64>::zeros((2, 3));
        assert!(matches!(cholesky(&a), Err(LinalgError::NotSquare { .. })));
        let a = Array2::<Complex64>::eye(2);
        let b = Array1::<Complex64>::zeros(3);
        assert!(matches!(
            hermitian_solve(&a, &b),
            Err(LinalgError::RhsMismatch { .. })
        ));
    }
}
