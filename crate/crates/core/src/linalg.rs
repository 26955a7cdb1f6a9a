//! Dense linear-algebra helpers shared by the identification, synthesis and
//! observer modules: symmetric spectra, Lyapunov and Riccati solvers.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eig_sym(m: &Mat) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eig_sym(m: &Mat) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(m: &Mat) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn eigenvalues(a: &Mat) -> Vec<Complex<f64>> {
    a.clone().complex_eigenvalues().iter().cloned().collect()
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &Mat) -> f64 {
    eigenvalues(a)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_positive_definite(m: &Mat) -> bool {
    symmetrize(m).cholesky().is_some()
}

/// Principal square root of a symmetric positive definite matrix.
pub fn sqrtm_spd(m: &Mat) -> Result<Mat> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Numerical(
            "square root of a matrix that is not positive definite".into(),
        ));
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Solves `A X + X Aᵀ + Q = 0` through the Kronecker-vectorized system.
///
/// Intended for the modest sizes used here (n up to a few dozen).
pub fn lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension("lyapunov operands must be square".into()));
    }
    let id = Mat::identity(n, n);
    // vec(AX) = (I ⊗ A) vec X, vec(XAᵀ) = (A ⊗ I) vec X
    let op = id.kronecker(a) + a.kronecker(&id);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Lyapunov operator".into()))?;
    Ok(symmetrize(&Mat::from_column_slice(n, n, sol.as_slice())))
}

/// Matrix sign function by scaled Newton iteration.
pub fn matrix_sign(h: &Mat) -> Result<Mat> {
    let n = h.nrows();
    let mut z = h.clone();
    let mut delta_prev = f64::INFINITY;
    for _ in 0..200 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical("matrix sign iteration hit a singular iterate".into()))?;
        let scale = if det.is_finite() && det != 0.0 {
            det.abs().powf(-1.0 / n as f64)
        } else {
            1.0
        };
        let next = (&z * scale + inv / scale) * 0.5;
        let delta = (&next - &z).abs().sum();
        let size = next.abs().sum();
        z = next;
        if delta <= 1e-13 * size {
            return Ok(z);
        }
        // stalled at rounding level; callers refine the result
        if delta <= 1e-8 * size && delta > 0.5 * delta_prev {
            return Ok(z);
        }
        delta_prev = delta;
    }
    Err(Error::Numerical(
        "matrix sign iteration did not converge (imaginary-axis eigenvalues?)".into(),
    ))
}

/// Stabilizing solution of `Aᵀ X + X A − X B R⁻¹ Bᵀ X + Q = 0`.
///
/// A matrix-sign solution seeds Newton–Kleinman refinement, which needs a
/// stabilizing initial feedback.
pub fn care(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("R is singular".into()))?;
    let g = b * &r_inv * b.transpose();

    let mut h = Mat::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let w = matrix_sign(&h)?;

    let id = Mat::identity(n, n);
    let mut lhs = Mat::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(w.view((n, n), (n, n)) + &id));
    let mut rhs = Mat::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(w.view((0, 0), (n, n)) + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let seed = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let seed = symmetrize(&seed);

    newton_kleinman(a, b, q, &r_inv, r, &(&r_inv * b.transpose() * &seed), 60)
}

/// Newton–Kleinman iteration from a stabilizing feedback `k0`.
pub fn newton_kleinman(
    a: &Mat,
    b: &Mat,
    q: &Mat,
    r_inv: &Mat,
    r: &Mat,
    k0: &Mat,
    max_iter: usize,
) -> Result<Mat> {
    let mut k = k0.clone();
    if spectral_abscissa(&(a - b * &k)) >= 0.0 {
        return Err(Error::Numerical("Newton–Kleinman seed is not stabilizing".into()));
    }
    let mut x_prev: Option<Mat> = None;
    let mut diff_prev = f64::INFINITY;
    for _ in 0..max_iter {
        let acl = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        // (A - BK)ᵀ X + X (A - BK) + Q + KᵀRK = 0
        let x = lyapunov(&acl.transpose(), &rhs)?;
        k = r_inv * b.transpose() * &x;
        if let Some(prev) = &x_prev {
            let diff = (&x - prev).abs().max();
            if diff <= 1e-12 * (1.0 + x.abs().max()) {
                return Ok(x);
            }
            // quadratic convergence has stalled at rounding level
            if diff > 0.5 * diff_prev {
                x_prev = Some(x);
                break;
            }
            diff_prev = diff;
        }
        x_prev = Some(x);
    }
    x_prev.ok_or(Error::RiccatiNoConvergence(max_iter))
        .and_then(|x| {
            let res = care_residual(a, b, q, r_inv, &x);
            if res <= 1e-8 * (1.0 + x.abs().max()) {
                Ok(x)
            } else {
                Err(Error::RiccatiNoConvergence(max_iter))
            }
        })
}

fn care_residual(a: &Mat, b: &Mat, q: &Mat, r_inv: &Mat, x: &Mat) -> f64 {
    (a.transpose() * x + x * a - x * b * r_inv * b.transpose() * x + q)
        .abs()
        .max()
}

/// Filter-form Riccati equation `A Y + Y Aᵀ − Y Cᵀ R⁻¹ C Y + Q = 0`.
pub fn filter_are(a: &Mat, c: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    care(&a.transpose(), &c.transpose(), q, r)
}

/// Popov–Belevitch–Hautus detectability test: every eigenvalue with
/// non-negative real part must be observable through `c`.
pub fn check_detectable(a: &Mat, c: &Mat) -> Result<()> {
    let n = a.nrows();
    let p = c.nrows();
    let scale = 1.0 + spectral_norm(a) + spectral_norm(c);
    for lam in eigenvalues(a) {
        if lam.re < -1e-9 * scale {
            continue;
        }
        let mut m = DMatrix::<Complex<f64>>::zeros(n + p, n);
        for i in 0..n {
            for j in 0..n {
                let diag = if i == j { lam } else { Complex::new(0.0, 0.0) };
                m[(i, j)] = Complex::new(a[(i, j)], 0.0) - diag;
            }
        }
        for i in 0..p {
            for j in 0..n {
                m[(n + i, j)] = Complex::new(c[(i, j)], 0.0);
            }
        }
        let smin = m
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if smin <= 1e-10 * scale {
            return Err(Error::Undetectable {
                re: lam.re,
                im: lam.im,
            });
        }
    }
    Ok(())
}

/// Condition number of a symmetric positive definite matrix.
pub fn spd_condition(m: &Mat) -> f64 {
    max_eig_sym(m) / min_eig_sym(m)
}

/// Row-major nested form used by the JSON files.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Mat> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "{what} must be {nrows}x{ncols}"
        )));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lyapunov_scalar() {
        let a = Mat::from_element(1, 1, -2.0);
        let q = Mat::from_element(1, 1, 4.0);
        let x = lyapunov(&a, &q).unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_residual_small() {
        let a = Mat::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -0.5, -1.0, 0.3, 0.0, 0.1, -2.0]);
        let q = Mat::identity(3, 3);
        let x = lyapunov(&a, &q).unwrap();
        let res = &a * &x + &x * a.transpose() + &q;
        assert!(res.abs().max() < 1e-12);
    }

    #[test]
    fn care_scalar_closed_form() {
        // 2 a x - x^2 + q = 0 with a = 1, q = 3 -> x = 3
        let a = Mat::from_element(1, 1, 1.0);
        let b = Mat::from_element(1, 1, 1.0);
        let q = Mat::from_element(1, 1, 3.0);
        let r = Mat::from_element(1, 1, 1.0);
        let x = care(&a, &b, &q, &r).unwrap();
        assert_relative_eq!(x[(0, 0)], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn care_double_integrator() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = Mat::identity(2, 2);
        let r = Mat::identity(1, 1);
        let x = care(&a, &b, &q, &r).unwrap();
        let s3 = 3f64.sqrt();
        assert_relative_eq!(x[(0, 0)], s3, epsilon = 1e-9);
        assert_relative_eq!(x[(0, 1)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(x[(1, 1)], s3, epsilon = 1e-9);
    }

    #[test]
    fn detectability_flags_hidden_unstable_mode() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let c = Mat::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(matches!(
            check_detectable(&a, &c),
            Err(Error::Undetectable { .. })
        ));
        let c = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(check_detectable(&a, &c).is_ok());
    }

    #[test]
    fn sqrtm_roundtrip() {
        let m = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sqrtm_spd(&m).unwrap();
        assert!((&s * &s - &m).abs().max() < 1e-12);
    }
}
