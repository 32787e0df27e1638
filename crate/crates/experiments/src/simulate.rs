//! Fitting Gaussian weight families to dense Gaussian targets by gradient
//! descent on the closed-form KL.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use kronflow::linalg::{from_dmatrix, to_dmatrix};
use kronflow::tensor::Adam;
use kronflow::{Family, Graph, RandomStream, Tensor, Var};

use crate::error::{Error, Result};

/// Zero-mean Gaussian over a `dims`-shaped weight tensor, flattened
/// row-major.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    pub dims: Vec<usize>,
    pub covariance: DMatrix<f64>,
    /// `L^-1` for the Cholesky factor `covariance = L L^T`.
    inv_chol: DMatrix<f64>,
    logdet: f64,
}

const MAX_REDRAWS: u64 = 16;

impl GaussianTarget {
    pub fn from_covariance(dims: &[usize], covariance: DMatrix<f64>) -> Result<Self> {
        let d: usize = dims.iter().product();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Invalid(format!(
                "covariance is {}x{}, shape {dims:?} needs {d}x{d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invalid("target covariance is not positive definite".into()))?;
        let l = chol.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv_chol = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Invalid("singular Cholesky factor".into()))?;
        Ok(Self {
            dims: dims.to_vec(),
            covariance,
            inv_chol,
            logdet,
        })
    }

    /// Independent entries with the given marginal standard deviations.
    pub fn diagonal(dims: &[usize], stds: &[f64]) -> Result<Self> {
        let v: Vec<f64> = stds.iter().map(|s| s * s).collect();
        Self::from_covariance(dims, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(v)))
    }

    /// `G G^T + 1e-6 I` with `G` a standard-normal `d x d` draw. A draw whose
    /// covariance fails the Cholesky test is replaced by one from a child
    /// stream.
    pub fn random(dims: &[usize], stream: &mut RandomStream) -> Result<Self> {
        let d: usize = dims.iter().product();
        for attempt in 0..MAX_REDRAWS {
            let mut st = if attempt == 0 {
                stream.clone()
            } else {
                stream.child(attempt)
            };
            let g = to_dmatrix(&Tensor::randn(&[d, d], &mut st));
            let cov = &g * g.transpose() + DMatrix::identity(d, d) * 1e-6;
            match Self::from_covariance(dims, cov) {
                Ok(t) => {
                    if attempt == 0 {
                        *stream = st;
                    }
                    return Ok(t);
                }
                Err(_) => log::warn!("target draw {attempt} for {dims:?} not positive definite, redrawing"),
            }
        }
        Err(Error::Invalid(format!(
            "no positive definite target for {dims:?} after {MAX_REDRAWS} draws"
        )))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.inv_chol.transpose() * &self.inv_chol
    }

    /// Scale of the isotropic Gaussian closest in KL: `sqrt(d / tr(P))`.
    pub fn best_isotropic_scale(&self) -> f64 {
        (self.dim() as f64 / self.inv_chol.norm_squared()).sqrt()
    }

    /// KL(N(0, S S^T) || target).
    pub fn kl_from_sqrt(&self, sqrt_cov: &DMatrix<f64>) -> Result<f64> {
        let d = self.dim() as f64;
        let m = &self.inv_chol * sqrt_cov;
        let det = sqrt_cov.clone().determinant().abs();
        if !(det > 0.0) {
            return Err(Error::Invalid("degenerate covariance square root".into()));
        }
        let logdet_q = if det.is_finite() {
            2.0 * det.ln()
        } else {
            2.0 * kronflow::linalg::log_abs_det(sqrt_cov)?
        };
        Ok(0.5 * (m.norm_squared() - d + self.logdet - logdet_q))
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        let z = &self.inv_chol * nalgebra::DVector::from_column_slice(w);
        let d = self.dim() as f64;
        -0.5 * (z.norm_squared() + d * (2.0 * std::f64::consts::PI).ln() + self.logdet)
    }
}

/// Variational families that admit a closed-form KL to a dense Gaussian.
/// `Dense` (full lower-triangular square root) is a reference that can match
/// any target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimFamily {
    Diag,
    KDiag,
    KLinear,
    Dense,
}

impl TryFrom<Family> for SimFamily {
    type Error = Error;

    fn try_from(f: Family) -> Result<Self> {
        match f {
            Family::Diag => Ok(Self::Diag),
            Family::KDiag => Ok(Self::KDiag),
            Family::KLinear => Ok(Self::KLinear),
            Family::KNonlinear => Err(Error::Invalid(
                "k-nonlinear has no closed-form KL to a Gaussian target".into(),
            )),
        }
    }
}

impl SimFamily {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Diag => "diag",
            Self::KDiag => "k-diag",
            Self::KLinear => "k-linear",
            Self::Dense => "dense",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Initial marginal scale; `None` starts from the best isotropic fit,
    /// which every family contains.
    pub sigma0: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.05,
            sigma0: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub kl: f64,
    /// `S` with `Cov_q = S S^T`.
    pub sqrt_cov: DMatrix<f64>,
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn initial_params(family: SimFamily, dims: &[usize], sigma0: f64) -> Vec<Tensor> {
    let d: usize = dims.iter().product();
    match family {
        SimFamily::Diag => vec![Tensor::full(&[1, d], softplus_inv(sigma0))],
        SimFamily::KDiag => {
            let per_axis = softplus_inv(sigma0.powf(1.0 / dims.len() as f64));
            dims.iter().map(|&n| Tensor::full(&[n, 1], per_axis)).collect()
        }
        SimFamily::KLinear => {
            let mut p: Vec<Tensor> = dims.iter().map(|&n| Tensor::zeros(&[n, n])).collect();
            p.push(Tensor::full(&[1, d], softplus_inv(sigma0)));
            p
        }
        SimFamily::Dense => vec![Tensor::zeros(&[d, d]), Tensor::full(&[1, d], sigma0.ln())],
    }
}

fn diag_matrix(g: &mut Graph, row: Var, d: usize) -> Result<Var> {
    let eye = g.constant(Tensor::eye(d));
    Ok(g.mul(eye, row)?)
}

/// Returns `(kl, sqrt_cov)`.
fn kl_graph(g: &mut Graph, target: &GaussianTarget, family: SimFamily, p: &[Var]) -> Result<(Var, Var)> {
    let d = target.dim();
    let inv = g.constant(from_dmatrix(&target.inv_chol));
    let (sqrt_cov, log_diag) = match family {
        SimFamily::Diag => {
            let s = g.softplus(p[0])?;
            (diag_matrix(g, s, d)?, g.log(s)?)
        }
        SimFamily::KDiag => {
            let mut col = g.softplus(p[0])?;
            for &v in &p[1..] {
                let s = g.softplus(v)?;
                col = g.kron(col, s)?;
            }
            let row = g.transpose(col)?;
            (diag_matrix(g, row, d)?, g.log(row)?)
        }
        SimFamily::KLinear => {
            let rank = target.dims.len();
            let mut k: Option<Var> = None;
            for (axis, &raw) in p[..rank].iter().enumerate() {
                let n = target.dims[axis];
                let mask = g.constant(Tensor::strict_lower_mask(n));
                let eye = g.constant(Tensor::eye(n));
                let lower = g.mul(raw, mask)?;
                let mut f = g.add(lower, eye)?;
                if axis > 0 {
                    f = g.transpose(f)?;
                }
                k = Some(match k {
                    None => f,
                    Some(acc) => g.kron(acc, f)?,
                });
            }
            let s = g.softplus(p[rank])?;
            let k = k.expect("at least one axis");
            (g.mul(k, s)?, g.log(s)?)
        }
        SimFamily::Dense => {
            let mask = g.constant(Tensor::strict_lower_mask(d));
            let lower = g.mul(p[0], mask)?;
            let e = g.exp(p[1])?;
            let diag = diag_matrix(g, e, d)?;
            (g.add(lower, diag)?, p[1])
        }
    };
    let m = g.matmul(inv, sqrt_cov)?;
    let sq = g.square(m)?;
    let trace = g.sum(sq)?;
    let logdet_q = g.sum(log_diag)?;
    let logdet_q = g.scale(logdet_q, 2.0)?;
    let diff = g.sub(trace, logdet_q)?;
    let kl = g.offset(diff, target.logdet - d as f64)?;
    Ok((g.scale(kl, 0.5)?, sqrt_cov))
}

/// Minimizes KL(q || target) over the covariance parameters of `family`
/// with Adam and a cosine-decayed step size. The mean is held at the target
/// mean, which is already optimal.
pub fn fit_family(target: &GaussianTarget, family: SimFamily, config: &FitConfig) -> Result<Fit> {
    if (family == SimFamily::KDiag || family == SimFamily::KLinear) && target.dims.len() < 2 {
        return Err(Error::Invalid(
            "kronecker families need a matrix or order-3 shape".into(),
        ));
    }
    let sigma0 = config.sigma0.unwrap_or_else(|| target.best_isotropic_scale());
    let mut params = initial_params(family, &target.dims, sigma0);
    let mut adam = Adam::new(config.learning_rate);
    for step in 0..config.steps {
        adam.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let (kl, _) = kl_graph(&mut g, target, family, &vars)?;
        let grads = g.backward(kl)?;
        let flat: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.update(&mut params.iter_mut().collect::<Vec<_>>(), &flat);
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let (kl, sqrt_cov) = kl_graph(&mut g, target, family, &vars)?;
    Ok(Fit {
        kl: g.item(kl),
        sqrt_cov: to_dmatrix(g.value(sqrt_cov)),
    })
}

/// Monte-Carlo estimate of KL(N(0, S S^T) || target) with its standard
/// error.
pub fn monte_carlo_kl(
    target: &GaussianTarget,
    sqrt_cov: &DMatrix<f64>,
    draws: usize,
    stream: &mut RandomStream,
) -> Result<(f64, f64)> {
    let d = target.dim();
    if draws < 2 {
        return Err(Error::Invalid("need at least two draws".into()));
    }
    let inv_s = sqrt_cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("singular covariance square root".into()))?;
    let logdet_q = 2.0 * kronflow::linalg::log_abs_det(sqrt_cov)?;
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z = nalgebra::DVector::from_iterator(d, (0..d).map(|_| stream.standard_normal()));
        let w = sqrt_cov * &z;
        let back = &inv_s * &w;
        let log_q = -0.5 * (back.norm_squared() + d as f64 * log2pi + logdet_q);
        vals.push(log_q - target.log_density(w.as_slice()));
    }
    let n = draws as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateKlConfig {
    pub shapes: Vec<Vec<usize>>,
    pub trials: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub sigma0: Option<f64>,
}

impl Default for SimulateKlConfig {
    fn default() -> Self {
        Self {
            shapes: vec![vec![4, 4], vec![8, 8], vec![8, 16]],
            trials: 25,
            steps: 2000,
            learning_rate: 0.05,
            sigma0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub shape: Vec<usize>,
    pub dim: usize,
    pub family: SimFamily,
    pub trial: usize,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub shape: Vec<usize>,
    pub dim: usize,
    pub family: SimFamily,
    pub trials: usize,
    pub mean: f64,
    pub std_dev: f64,
}

impl SummaryRow {
    /// `mean -+ 0.1 sd`.
    pub fn band(&self) -> (f64, f64) {
        (self.mean - 0.1 * self.std_dev, self.mean + 0.1 * self.std_dev)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulationResults {
    pub rows: Vec<TrialRow>,
}

impl SimulationResults {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        for r in &self.rows {
            if out.iter().any(|s| s.shape == r.shape && s.family == r.family) {
                continue;
            }
            let kls: Vec<f64> = self
                .rows
                .iter()
                .filter(|o| o.shape == r.shape && o.family == r.family)
                .map(|o| o.kl)
                .collect();
            let n = kls.len() as f64;
            let mean = kls.iter().sum::<f64>() / n;
            let std_dev = if kls.len() > 1 {
                (kls.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            out.push(SummaryRow {
                shape: r.shape.clone(),
                dim: r.dim,
                family: r.family,
                trials: kls.len(),
                mean,
                std_dev,
            });
        }
        out
    }

    pub fn mean_kl(&self, shape: &[usize], family: SimFamily) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.shape == shape && s.family == family)
            .map(|s| s.mean)
    }
}

/// Runs every (shape, trial) against a fresh random target shared by all
/// families. Shapes are processed in order of their dimension.
pub fn simulate_kl(
    config: &SimulateKlConfig,
    families: &[SimFamily],
    stream: &RandomStream,
) -> Result<SimulationResults> {
    let mut shapes = config.shapes.clone();
    for s in &shapes {
        let d: usize = s.iter().product();
        if s.is_empty() || d == 0 || d > 256 {
            return Err(Error::Invalid(format!(
                "shape {s:?} must have between 1 and 256 entries"
            )));
        }
    }
    shapes.sort_by_key(|s| s.iter().product::<usize>());
    let fit = FitConfig {
        steps: config.steps,
        learning_rate: config.learning_rate,
        sigma0: config.sigma0,
    };
    let mut results = SimulationResults::default();
    for (si, shape) in shapes.iter().enumerate() {
        for trial in 0..config.trials {
            let mut st = stream.child(((si as u64) << 32) | trial as u64);
            let target = GaussianTarget::random(shape, &mut st)?;
            for &family in families {
                let f = fit_family(&target, family, &fit)?;
                results.rows.push(TrialRow {
                    shape: shape.clone(),
                    dim: target.dim(),
                    family,
                    trial,
                    kl: f.kl,
                });
            }
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_roundtrips() {
        for y in [1e-3, 0.5, 1.0, 20.0] {
            let x = softplus_inv(y);
            assert!(((1.0 + x.exp()).ln() - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn graph_kl_matches_dense_formula() {
        let mut st = RandomStream::new(3, 0);
        let target = GaussianTarget::random(&[2, 3], &mut st).unwrap();
        for family in [SimFamily::Diag, SimFamily::KDiag, SimFamily::KLinear, SimFamily::Dense] {
            let mut params = initial_params(family, &[2, 3], 0.7);
            for p in &mut params {
                for v in p.data_mut() {
                    *v += 0.3 * st.standard_normal();
                }
            }
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
            let (kl, s) = kl_graph(&mut g, &target, family, &vars).unwrap();
            let s = to_dmatrix(g.value(s));
            let dense =
                kronflow::linalg::gaussian_kl_dense(&[0.0; 6], &(&s * s.transpose()), &[0.0; 6], &target.covariance)
                    .unwrap();
            assert!((g.item(kl) - dense).abs() < 1e-9 * dense.max(1.0), "{family:?}");
            assert!((target.kl_from_sqrt(&s).unwrap() - dense).abs() < 1e-9 * dense.max(1.0));
        }
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        let cfg = SimulateKlConfig {
            shapes: vec![vec![16, 17]],
            ..Default::default()
        };
        assert!(simulate_kl(&cfg, &[SimFamily::Diag], &RandomStream::new(0, 0)).is_err());
    }
}
