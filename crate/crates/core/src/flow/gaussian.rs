use serde::{Deserialize, Serialize};

use super::{map_along_axis, softplus, softplus_inv, FlowOutput, WeightShape};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Visits every fibre of `t` along `axis` as a contiguous scratch buffer.
pub(crate) fn for_each_fibre(t: &mut Tensor, axis: usize, mut f: impl FnMut(&mut [f64])) {
    let shape = t.shape().to_vec();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let data = t.data_mut();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                buf[k] = data[(o * len + k) * inner + i];
            }
            f(&mut buf);
            for k in 0..len {
                data[(o * len + k) * inner + i] = buf[k];
            }
        }
    }
}

/// Mean-field Gaussian, `W = M + softplus(rho) * E`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub rho: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, sigma: &Tensor) -> Result<Self> {
        if mean.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "DiagGaussian::new",
                lhs: mean.shape().to_vec(),
                rhs: sigma.shape().to_vec(),
            });
        }
        for &s in sigma.data() {
            check_positive("sigma", s)?;
        }
        Ok(Self {
            mean,
            rho: sigma.map(softplus_inv),
        })
    }

    pub fn isotropic(mean: Tensor, sigma0: f64) -> Result<Self> {
        let sigma = Tensor::full(mean.shape(), sigma0);
        Self::new(mean, &sigma)
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn shape(&self) -> WeightShape {
        WeightShape::new(self.mean.shape()).expect("validated at construction")
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.mean, &self.rho]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mean, &mut self.rho]
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], eps: Var) -> Result<FlowOutput> {
        let sigma = g.softplus(p[1])?;
        let scaled = g.mul(sigma, eps)?;
        let weights = g.add(p[0], scaled)?;
        let log_sigma = g.log(sigma)?;
        let logdet = g.sum(log_sigma)?;
        Ok(FlowOutput { weights, logdet })
    }

    pub(crate) fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let centred = w.zip_map(&self.mean, |a, b| a - b)?;
        centred.zip_map(&self.sigma(), |a, s| a / s)
    }

    pub(crate) fn lipschitz_upper_bound(&self) -> Result<f64> {
        Ok(self.sigma().max_abs())
    }
}

/// Kronecker product of diagonal factors: the marginal standard deviation of
/// entry `(i, j)` is `u_i * v_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KroneckerDiag {
    pub mean: Tensor,
    /// One pre-softplus scale vector per axis.
    pub axis_rho: Vec<Tensor>,
}

impl KroneckerDiag {
    pub fn new(mean: Tensor, scales: &[Vec<f64>]) -> Result<Self> {
        let dims = mean.shape().to_vec();
        if scales.len() != dims.len() || scales.iter().zip(&dims).any(|(s, &d)| s.len() != d) {
            return Err(Error::ShapeMismatch {
                op: "KroneckerDiag::new",
                lhs: dims,
                rhs: scales.iter().map(|s| s.len()).collect(),
            });
        }
        let mut axis_rho = Vec::new();
        for s in scales {
            for &v in s {
                check_positive("axis scale", v)?;
            }
            axis_rho.push(Tensor::vector(s.iter().map(|&v| softplus_inv(v)).collect()));
        }
        Ok(Self { mean, axis_rho })
    }

    /// Every axis scale set to `sigma0^(1/rank)`, so each marginal std is `sigma0`.
    pub fn isotropic(mean: Tensor, sigma0: f64) -> Result<Self> {
        check_positive("sigma0", sigma0)?;
        let rank = mean.shape().len();
        let per_axis = sigma0.powf(1.0 / rank as f64);
        let scales: Vec<Vec<f64>> = mean.shape().iter().map(|&d| vec![per_axis; d]).collect();
        Self::new(mean, &scales)
    }

    pub fn axis_scales(&self) -> Vec<Tensor> {
        self.axis_rho.iter().map(|r| r.map(softplus)).collect()
    }

    /// Marginal standard deviations as a tensor of the weight shape.
    pub fn marginal_std(&self) -> Tensor {
        let dims = self.mean.shape().to_vec();
        let scales = self.axis_scales();
        let mut out = Tensor::ones(&dims);
        let n = out.numel();
        for flat in 0..n {
            let mut rem = flat;
            let mut v = 1.0;
            for a in (0..dims.len()).rev() {
                v *= scales[a].data()[rem % dims[a]];
                rem /= dims[a];
            }
            out.data_mut()[flat] = v;
        }
        out
    }

    pub fn shape(&self) -> WeightShape {
        WeightShape::new(self.mean.shape()).expect("validated at construction")
    }

    pub fn params(&self) -> Vec<&Tensor> {
        std::iter::once(&self.mean).chain(self.axis_rho.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.mean)
            .chain(self.axis_rho.iter_mut())
            .collect()
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], eps: Var) -> Result<FlowOutput> {
        let dims = self.mean.shape().to_vec();
        let total: usize = dims.iter().product();
        let mut scaled = eps;
        let mut logdet = g.scalar(0.0);
        for (a, &k) in dims.iter().enumerate() {
            let u = g.softplus(p[1 + a])?;
            let mut bshape = vec![1; dims.len()];
            bshape[a] = k;
            let ub = g.reshape(u, &bshape)?;
            scaled = g.mul(scaled, ub)?;
            let lu = g.log(u)?;
            let s = g.sum(lu)?;
            let s = g.scale(s, (total / k) as f64)?;
            logdet = g.add(logdet, s)?;
        }
        let weights = g.add(p[0], scaled)?;
        Ok(FlowOutput { weights, logdet })
    }

    pub(crate) fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let centred = w.zip_map(&self.mean, |a, b| a - b)?;
        centred.zip_map(&self.marginal_std(), |a, s| a / s)
    }

    pub(crate) fn lipschitz_upper_bound(&self) -> Result<f64> {
        Ok(self.axis_scales().iter().map(|s| s.max_abs()).product())
    }
}

/// `W = M + A (E * S) B` with unit-lower-triangular `A`, `B` (and a third
/// factor for order-3 tensors). Each factor is stored as a full square
/// matrix; only its strictly-lower entries are used, the diagonal is fixed
/// to one and the upper triangle to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KroneckerLinear {
    pub mean: Tensor,
    pub factors: Vec<Tensor>,
    pub rho: Tensor,
}

impl KroneckerLinear {
    /// `factors[a]` is the unit-lower-triangular factor for axis `a`; entries
    /// on or above the diagonal are ignored.
    pub fn new(mean: Tensor, factors: Vec<Tensor>, scale: &Tensor) -> Result<Self> {
        let dims = mean.shape().to_vec();
        if factors.len() != dims.len() {
            return Err(invalid(format!(
                "{} factors for a rank-{} weight",
                factors.len(),
                dims.len()
            )));
        }
        for (f, &d) in factors.iter().zip(&dims) {
            if f.shape() != [d, d] {
                return Err(Error::ShapeMismatch {
                    op: "KroneckerLinear factor",
                    lhs: f.shape().to_vec(),
                    rhs: vec![d, d],
                });
            }
        }
        if scale.shape() != dims.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "KroneckerLinear scale",
                lhs: scale.shape().to_vec(),
                rhs: dims,
            });
        }
        for &s in scale.data() {
            check_positive("scale", s)?;
        }
        let factors = factors
            .into_iter()
            .map(|f| {
                let mask = Tensor::strict_lower_mask(f.rows());
                f.zip_map(&mask, |a, m| a * m).expect("same shape")
            })
            .collect();
        Ok(Self {
            mean,
            factors,
            rho: scale.map(softplus_inv),
        })
    }

    pub fn isotropic(mean: Tensor, sigma0: f64) -> Result<Self> {
        let factors = mean.shape().iter().map(|&d| Tensor::eye(d)).collect();
        let scale = Tensor::full(mean.shape(), sigma0);
        Self::new(mean, factors, &scale)
    }

    /// Effective unit-lower-triangular factor for `axis`.
    pub fn factor(&self, axis: usize) -> Tensor {
        let raw = &self.factors[axis];
        let n = raw.rows();
        let mut out = raw.clone();
        for i in 0..n {
            for j in 0..n {
                let v = match i.cmp(&j) {
                    std::cmp::Ordering::Greater => raw.get(i, j),
                    std::cmp::Ordering::Equal => 1.0,
                    std::cmp::Ordering::Less => 0.0,
                };
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn scale(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn shape(&self) -> WeightShape {
        WeightShape::new(self.mean.shape()).expect("validated at construction")
    }

    pub fn params(&self) -> Vec<&Tensor> {
        std::iter::once(&self.mean)
            .chain(self.factors.iter())
            .chain(std::iter::once(&self.rho))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.mean)
            .chain(self.factors.iter_mut())
            .chain(std::iter::once(&mut self.rho))
            .collect()
    }

    /// Masked factor `raw * strict_lower + I` in the graph.
    pub(crate) fn factor_var(g: &mut Graph, raw: Var) -> Result<Var> {
        let n = g.shape(raw)[0];
        let mask = g.constant(Tensor::strict_lower_mask(n));
        let eye = g.constant(Tensor::eye(n));
        let lower = g.mul(raw, mask)?;
        g.add(lower, eye)
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], eps: Var) -> Result<FlowOutput> {
        let rank = self.mean.shape().len();
        let s = g.softplus(p[1 + rank])?;
        let mut x = g.mul(eps, s)?;
        for axis in 0..rank {
            let f = Self::factor_var(g, p[1 + axis])?;
            x = if rank == 2 {
                if axis == 0 {
                    g.matmul(f, x)?
                } else {
                    g.matmul(x, f)?
                }
            } else if axis == 0 {
                let ft = g.transpose(f)?;
                map_along_axis(g, x, 0, |g, rows| g.matmul(rows, ft))?
            } else {
                map_along_axis(g, x, axis, |g, rows| g.matmul(rows, f))?
            };
        }
        let weights = g.add(p[0], x)?;
        let log_s = g.log(s)?;
        let logdet = g.sum(log_s)?;
        Ok(FlowOutput { weights, logdet })
    }

    /// `E = (A^-1 (W - M) B^-1) / S` by triangular substitution along each axis.
    pub(crate) fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let mut x = w.zip_map(&self.mean, |a, b| a - b)?;
        for axis in 0..self.factors.len() {
            let f = self.factor(axis);
            let n = f.rows();
            if axis == 0 {
                // Solve A v = w: forward substitution.
                for_each_fibre(&mut x, axis, |v| {
                    for i in 0..n {
                        let mut acc = v[i];
                        for j in 0..i {
                            acc -= f.get(i, j) * v[j];
                        }
                        v[i] = acc;
                    }
                });
            } else {
                // Solve B^T v = w: B^T is unit upper triangular.
                for_each_fibre(&mut x, axis, |v| {
                    for i in (0..n).rev() {
                        let mut acc = v[i];
                        for j in i + 1..n {
                            acc -= f.get(j, i) * v[j];
                        }
                        v[i] = acc;
                    }
                });
            }
        }
        x.zip_map(&self.scale(), |a, s| a / s)
    }

    pub(crate) fn lipschitz_upper_bound(&self) -> Result<f64> {
        let factors: f64 = (0..self.factors.len())
            .map(|a| super::operator_norm_bound(&self.factor(a)))
            .product();
        Ok(factors * self.scale().max_abs())
    }
}
