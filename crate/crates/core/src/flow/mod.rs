//! Weight distributions over matrices (and order-3 tensors) expressed as
//! flows of standard normal noise: mean-field Diag, Kronecker K-Diag,
//! unit-triangular K-Linear and the nonlinear Kronecker flow.

mod axis;
mod checkpoint;
mod covariance;
mod gaussian;
mod nonlinear;

pub use axis::{map_along_axis, AxisOrder};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use covariance::{covariance_stats, dense_covariance_oracle, CovarianceStats};
pub use gaussian::{DiagGaussian, KroneckerDiag, KroneckerLinear};
pub use nonlinear::{AxisFlow, CouplingKind, FlowLayer, KroneckerNonlinear, NonlinearConfig};

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{sample_standard_normal, Graph, RandomStream, Tensor, Var};

/// Dimensions of a weight matrix (`[n, p]`) or order-3 tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightShape(Vec<usize>);

impl WeightShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: "weight shapes have 1 to 3 positive dims".into(),
            });
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn matrix(n: usize, p: usize) -> Self {
        Self::new(&[n, p]).expect("positive dims")
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }
}

impl std::fmt::Display for WeightShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Diag,
    KDiag,
    KLinear,
    KNonlinear,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Diag, Family::KDiag, Family::KLinear, Family::KNonlinear];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Diag => "diag",
            Family::KDiag => "k-diag",
            Family::KLinear => "k-linear",
            Family::KNonlinear => "k-nonlinear",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "diag" => Ok(Family::Diag),
            "k-diag" | "kdiag" => Ok(Family::KDiag),
            "k-linear" | "klinear" => Ok(Family::KLinear),
            "k-nonlinear" | "knonlinear" => Ok(Family::KNonlinear),
            other => Err(Error::InvalidParameter(format!("unknown family {other:?}"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Output of a flow evaluated inside a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct FlowOutput {
    pub weights: Var,
    /// Scalar `ln|det dW/dE|`.
    pub logdet: Var,
}

/// A draw `W = g(E)` together with its density accounting.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub weights: Tensor,
    pub epsilon: Tensor,
    pub logdet: f64,
    /// `ln q0(E)` under the standard normal base.
    pub base_log_density: f64,
}

/// `ln N(x; 0, I)`.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for `y > 0`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One of the four weight-distribution families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum WeightDistribution {
    Diag(DiagGaussian),
    KDiag(KroneckerDiag),
    KLinear(KroneckerLinear),
    KNonlinear(KroneckerNonlinear),
}

impl From<DiagGaussian> for WeightDistribution {
    fn from(d: DiagGaussian) -> Self {
        Self::Diag(d)
    }
}

impl From<KroneckerDiag> for WeightDistribution {
    fn from(d: KroneckerDiag) -> Self {
        Self::KDiag(d)
    }
}

impl From<KroneckerLinear> for WeightDistribution {
    fn from(d: KroneckerLinear) -> Self {
        Self::KLinear(d)
    }
}

impl From<KroneckerNonlinear> for WeightDistribution {
    fn from(d: KroneckerNonlinear) -> Self {
        Self::KNonlinear(d)
    }
}

macro_rules! dispatch {
    ($self:expr, $d:ident => $body:expr) => {
        match $self {
            WeightDistribution::Diag($d) => $body,
            WeightDistribution::KDiag($d) => $body,
            WeightDistribution::KLinear($d) => $body,
            WeightDistribution::KNonlinear($d) => $body,
        }
    };
}

impl WeightDistribution {
    /// A distribution of the given family centred at `mean` with initial
    /// marginal scale `sigma0`. K-Nonlinear uses the default configuration.
    pub fn init(family: Family, mean: Tensor, sigma0: f64, stream: &mut RandomStream) -> Result<Self> {
        Ok(match family {
            Family::Diag => DiagGaussian::isotropic(mean, sigma0)?.into(),
            Family::KDiag => KroneckerDiag::isotropic(mean, sigma0)?.into(),
            Family::KLinear => KroneckerLinear::isotropic(mean, sigma0)?.into(),
            Family::KNonlinear => KroneckerNonlinear::new(mean, sigma0, &NonlinearConfig::default(), stream)?.into(),
        })
    }

    pub fn family(&self) -> Family {
        match self {
            Self::Diag(_) => Family::Diag,
            Self::KDiag(_) => Family::KDiag,
            Self::KLinear(_) => Family::KLinear,
            Self::KNonlinear(_) => Family::KNonlinear,
        }
    }

    pub fn shape(&self) -> WeightShape {
        dispatch!(self, d => d.shape())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        dispatch!(self, d => d.params())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, d => d.params_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers the parameters as graph leaves (tracked or constant), in
    /// [`Self::params`] order.
    pub fn leaves(&self, g: &mut Graph, tracked: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                if tracked {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// `W = g(E)` and `ln|det dW/dE|` in the graph, with parameters taken from
    /// `leaves`.
    pub fn forward(&self, g: &mut Graph, leaves: &[Var], eps: Var) -> Result<FlowOutput> {
        if g.shape(eps) != self.shape().dims() {
            return Err(Error::ShapeMismatch {
                op: "flow forward",
                lhs: g.shape(eps).to_vec(),
                rhs: self.shape().dims().to_vec(),
            });
        }
        dispatch!(self, d => d.forward(g, leaves, eps))
    }

    /// Maps a base draw to weights without recording gradients.
    pub fn transform(&self, eps: &Tensor) -> Result<(Tensor, f64)> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g, false);
        let e = g.constant(eps.clone());
        let out = self.forward(&mut g, &leaves, e)?;
        Ok((g.value(out.weights).clone(), g.item(out.logdet)))
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Result<SampleResult> {
        let eps = sample_standard_normal(self.shape().dims(), stream);
        let (weights, logdet) = self.transform(&eps)?;
        let base_log_density = standard_normal_log_density(eps.data());
        Ok(SampleResult {
            weights,
            epsilon: eps,
            logdet,
            base_log_density,
        })
    }

    pub fn logdet_jacobian(&self, eps: &Tensor) -> Result<f64> {
        Ok(self.transform(eps)?.1)
    }

    /// Recovers the base draw `E` with `g(E) = W`.
    pub fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != self.shape().dims() {
            return Err(Error::ShapeMismatch {
                op: "flow inverse",
                lhs: w.shape().to_vec(),
                rhs: self.shape().dims().to_vec(),
            });
        }
        dispatch!(self, d => d.inverse(w))
    }

    /// Guaranteed (not tight) upper bound on the Lipschitz constant of the
    /// map `E -> W` in Frobenius norm.
    pub fn lipschitz_upper_bound(&self) -> Result<f64> {
        dispatch!(self, d => d.lipschitz_upper_bound())
    }

    /// True when `ln|det dW/dE|` does not depend on `E`.
    pub fn has_constant_logdet(&self) -> bool {
        match self {
            Self::KNonlinear(d) => d.has_constant_logdet(),
            _ => true,
        }
    }

    /// Mean of `W`, when the family is Gaussian.
    pub fn gaussian_mean(&self) -> Option<&Tensor> {
        match self {
            Self::Diag(d) => Some(&d.mean),
            Self::KDiag(d) => Some(&d.mean),
            Self::KLinear(d) => Some(&d.mean),
            Self::KNonlinear(_) => None,
        }
    }

    /// Mean-like location used as the deterministic weights: `g(0)`.
    pub fn location(&self) -> Result<Tensor> {
        Ok(self.transform(&Tensor::zeros(self.shape().dims()))?.0)
    }
}

/// Spectral-norm upper bound `min(||m||_F, sqrt(||m||_1 ||m||_inf))`.
pub fn operator_norm_bound(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let fro = m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut col_max: f64 = 0.0;
    for j in 0..c {
        col_max = col_max.max((0..r).map(|i| m.get(i, j).abs()).sum());
    }
    let mut row_max: f64 = 0.0;
    for i in 0..r {
        row_max = row_max.max((0..c).map(|j| m.get(i, j).abs()).sum());
    }
    fro.min((col_max * row_max).sqrt())
}
