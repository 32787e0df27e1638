//! Dense helpers over `nalgebra` used by oracles, covariance statistics and
//! the Gaussian-target simulation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(r, c, data).expect("shape matches")
}

/// `ln|det m|` through an LU factorization.
pub fn log_abs_det(m: &DMatrix<f64>) -> Result<f64> {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Singular("log_abs_det"));
        }
        acc += d.abs().ln();
    }
    Ok(acc)
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
pub fn spd_logdet(m: &DMatrix<f64>) -> Result<f64> {
    let ch = m.clone().cholesky().ok_or(Error::Singular("spd_logdet"))?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = m.clone().cholesky().ok_or(Error::Singular("spd_inverse"))?;
    Ok(ch.inverse())
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Dense Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// KL(N(mu_q, cov_q) || N(mu_p, cov_p)) for dense covariances.
pub fn gaussian_kl_dense(mu_q: &[f64], cov_q: &DMatrix<f64>, mu_p: &[f64], cov_p: &DMatrix<f64>) -> Result<f64> {
    let d = mu_q.len();
    let p_inv = spd_inverse(cov_p)?;
    let trace = (&p_inv * cov_q).trace();
    let diff = DMatrix::from_iterator(d, 1, mu_q.iter().zip(mu_p).map(|(a, b)| a - b));
    let quad = (diff.transpose() * &p_inv * &diff)[(0, 0)];
    Ok(0.5 * (trace + quad - d as f64 + spd_logdet(cov_p)? - spd_logdet(cov_q)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logdet_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0, 4.0]));
        assert!((log_abs_det(&m).unwrap() - 24f64.ln()).abs() < 1e-12);
        assert!((spd_logdet(&m).unwrap() - 24f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let kl = gaussian_kl_dense(&[1.0, 2.0], &c, &[1.0, 2.0], &c).unwrap();
        assert!(kl.abs() < 1e-12);
    }
}
