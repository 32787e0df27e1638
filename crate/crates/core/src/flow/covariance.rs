use nalgebra::DMatrix;

use super::KroneckerLinear;
use crate::error::{Error, Result};
use crate::linalg::{kron, log_abs_det, to_dmatrix};
use crate::tensor::Tensor;

/// Closed-form moments of `vec(M + A (E * S) B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceStats {
    pub mean: Vec<f64>,
    pub logdet: f64,
    pub trace: f64,
}

/// Mean, log-determinant and trace of the covariance for general square
/// `a` (n x n) and `b` (p x p):
/// `logdet = 2p ln|det A| + 2n ln|det B| + sum ln S^2` and
/// `trace = sum((A*A) (S*S) (B*B))` with `*` elementwise.
pub fn covariance_stats(mean: &Tensor, a: &Tensor, b: &Tensor, s: &Tensor) -> Result<CovarianceStats> {
    let (n, p) = (s.rows(), s.cols());
    if a.shape() != [n, n] || b.shape() != [p, p] || mean.shape() != s.shape() {
        return Err(Error::ShapeMismatch {
            op: "covariance_stats",
            lhs: vec![a.rows(), b.rows()],
            rhs: s.shape().to_vec(),
        });
    }
    let ld_a = log_abs_det(&to_dmatrix(a)).map_err(|_| Error::Singular("covariance_stats: A"))?;
    let ld_b = log_abs_det(&to_dmatrix(b)).map_err(|_| Error::Singular("covariance_stats: B"))?;
    let ld_s: f64 = s.data().iter().map(|v| (v * v).ln()).sum();
    let sq = |t: &Tensor| t.map(|v| v * v);
    let trace = sq(a).matmul(&sq(s))?.matmul(&sq(b))?.sum();
    Ok(CovarianceStats {
        mean: mean.data().to_vec(),
        logdet: 2.0 * p as f64 * ld_a + 2.0 * n as f64 * ld_b + ld_s,
        trace,
    })
}

impl KroneckerLinear {
    /// Covariance statistics of a matrix-shaped K-Linear distribution.
    pub fn covariance_stats(&self) -> Result<CovarianceStats> {
        if self.factors.len() != 2 {
            return Err(Error::Unsupported("covariance_stats needs a matrix shape".into()));
        }
        covariance_stats(&self.mean, &self.factor(0), &self.factor(1), &self.scale())
    }

    /// Dense covariance of the row-major flattening of `W`.
    pub fn dense_covariance(&self) -> Result<DMatrix<f64>> {
        if self.factors.len() != 2 {
            return Err(Error::Unsupported("dense covariance needs a matrix shape".into()));
        }
        dense_covariance_oracle(&self.factor(0), &self.factor(1), &self.scale())
    }
}

/// Explicit covariance of the row-major flattening of `A (E * S) B`:
/// `(A kron B^T) diag(s^2) (A^T kron B)`. Test-only; limited to
/// `n p <= 4096`.
pub fn dense_covariance_oracle(a: &Tensor, b: &Tensor, s: &Tensor) -> Result<DMatrix<f64>> {
    let d = s.numel();
    if d > 4096 {
        return Err(Error::InvalidShape {
            shape: s.shape().to_vec(),
            reason: "dense covariance limited to 4096 entries".into(),
        });
    }
    let factor = kron(&to_dmatrix(a), &to_dmatrix(b).transpose());
    let mut scaled = factor.clone();
    for (j, &sv) in s.data().iter().enumerate() {
        scaled.column_mut(j).scale_mut(sv * sv);
    }
    Ok(scaled * factor.transpose())
}
