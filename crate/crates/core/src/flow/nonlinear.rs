use serde::{Deserialize, Serialize};

use super::{map_along_axis, operator_norm_bound, softplus, softplus_inv, AxisOrder, FlowOutput, WeightShape};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, RandomStream, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    /// Volume-preserving additive coupling, `y_b = x_b + t(x_a)`.
    #[default]
    Additive,
    /// Scale-and-shift coupling, `y_b = x_b * exp(s(x_a)) + t(x_a)`; not
    /// volume preserving.
    Affine,
    /// Volume-preserving additive autoregressive layer, `y_i = x_i + t_i(x_<i)`.
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearConfig {
    pub kind: CouplingKind,
    pub layers_per_axis: usize,
    /// Leading affine layer `W = M + S * G(E)`.
    pub affine: bool,
    pub order: AxisOrder,
    /// Standard deviation of the conditioner output weights at init.
    pub init_scale: f64,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        Self {
            kind: CouplingKind::Additive,
            layers_per_axis: 2,
            affine: true,
            order: AxisOrder::Forward,
            init_scale: 0.01,
        }
    }
}

/// Hidden width of every conditioner network for vectors of length `k`.
pub fn conditioner_width(k: usize) -> usize {
    16.max(2 * k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "kebab-case")]
pub enum FlowLayer {
    /// The first `split` coordinates condition the rest when `cond_first`,
    /// otherwise the last `k - split` condition the first `split`.
    Coupling {
        k: usize,
        split: usize,
        cond_first: bool,
        affine: bool,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    /// Masked conditioner; output `i` sees inputs of strictly lower degree.
    Autoregressive {
        degrees: Vec<usize>,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    Shift {
        shift: Tensor,
    },
}

fn masks(degrees: &[usize], width: usize) -> (Tensor, Tensor) {
    let k = degrees.len();
    let hidden: Vec<usize> = (0..width).map(|j| j % (k - 1).max(1) + 1).collect();
    let mut m1 = Tensor::zeros(&[k, width]);
    let mut m2 = Tensor::zeros(&[width, k]);
    for i in 0..k {
        for (j, &h) in hidden.iter().enumerate() {
            if degrees[i] <= h {
                m1.set(i, j, 1.0);
            }
            if h < degrees[i] {
                m2.set(j, i, 1.0);
            }
        }
    }
    (m1, m2)
}

/// `tanh(x W1 + b1) W2 + b2` on rows of `x`.
fn conditioner(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.tanh(h)?;
    let o = g.matmul(h, w2)?;
    g.add(o, b2)
}

impl FlowLayer {
    fn coupling(k: usize, index: usize, affine: bool, init_scale: f64, stream: &mut RandomStream) -> Self {
        let split = k.div_ceil(2);
        let cond_first = index.is_multiple_of(2);
        let (n_cond, n_out) = if cond_first {
            (split, k - split)
        } else {
            (k - split, split)
        };
        let width = conditioner_width(k);
        let heads = if affine { 2 } else { 1 };
        let w1 = Tensor::randn(&[n_cond, width], stream).map(|v| v / (n_cond as f64).sqrt());
        let w2 = Tensor::randn(&[width, n_out * heads], stream).map(|v| v * init_scale);
        FlowLayer::Coupling {
            k,
            split,
            cond_first,
            affine,
            w1,
            b1: Tensor::zeros(&[width]),
            w2,
            b2: Tensor::zeros(&[n_out * heads]),
        }
    }

    fn autoregressive(k: usize, index: usize, init_scale: f64, stream: &mut RandomStream) -> Self {
        let degrees = if index.is_multiple_of(2) {
            (1..=k).collect()
        } else {
            (1..=k).rev().collect()
        };
        let width = conditioner_width(k);
        let w1 = Tensor::randn(&[k, width], stream).map(|v| v / (k as f64).sqrt());
        let w2 = Tensor::randn(&[width, k], stream).map(|v| v * init_scale);
        FlowLayer::Autoregressive {
            degrees,
            w1,
            b1: Tensor::zeros(&[width]),
            w2,
            b2: Tensor::zeros(&[k]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            FlowLayer::Coupling { w1, b1, w2, b2, .. } | FlowLayer::Autoregressive { w1, b1, w2, b2, .. } => {
                vec![w1, b1, w2, b2]
            }
            FlowLayer::Shift { shift } => vec![shift],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FlowLayer::Coupling { w1, b1, w2, b2, .. } | FlowLayer::Autoregressive { w1, b1, w2, b2, .. } => {
                vec![w1, b1, w2, b2]
            }
            FlowLayer::Shift { shift } => vec![shift],
        }
    }

    pub fn is_volume_preserving(&self) -> bool {
        !matches!(self, FlowLayer::Coupling { affine: true, .. })
    }

    /// Rows of `x` are vectors; returns the mapped rows and the summed
    /// log-determinant over all rows.
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        match self {
            FlowLayer::Coupling {
                k,
                split,
                cond_first,
                affine,
                ..
            } => {
                let (k, split) = (*k, *split);
                let first = g.slice(x, 1, 0, split)?;
                let second = g.slice(x, 1, split, k - split)?;
                let (cond, out) = if *cond_first { (first, second) } else { (second, first) };
                let n_out = g.shape(out)[1];
                let c = conditioner(g, cond, p[0], p[1], p[2], p[3])?;
                let (y_out, logdet) = if *affine {
                    let s = g.slice(c, 1, 0, n_out)?;
                    let t = g.slice(c, 1, n_out, n_out)?;
                    let es = g.exp(s)?;
                    let scaled = g.mul(out, es)?;
                    (g.add(scaled, t)?, Some(g.sum(s)?))
                } else {
                    (g.add(out, c)?, None)
                };
                let y = if *cond_first {
                    g.concat(&[cond, y_out], 1)?
                } else {
                    g.concat(&[y_out, cond], 1)?
                };
                Ok((y, logdet))
            }
            FlowLayer::Autoregressive { degrees, .. } => {
                let (m1, m2) = masks(degrees, g.shape(p[0])[1]);
                let m1 = g.constant(m1);
                let m2 = g.constant(m2);
                let w1 = g.mul(p[0], m1)?;
                let w2 = g.mul(p[2], m2)?;
                let t = conditioner(g, x, w1, p[1], w2, p[3])?;
                Ok((g.add(x, t)?, None))
            }
            FlowLayer::Shift { .. } => Ok((g.add(x, p[0])?, None)),
        }
    }

    fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Inverts the layer on a `(batch, k)` matrix.
    fn inverse_rows(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            FlowLayer::Coupling {
                k,
                split,
                cond_first,
                affine,
                ..
            } => {
                let (k, split) = (*k, *split);
                let mut g = Graph::new();
                let p = self.leaves(&mut g);
                let yv = g.constant(y.clone());
                let first = g.slice(yv, 1, 0, split)?;
                let second = g.slice(yv, 1, split, k - split)?;
                let (cond, out) = if *cond_first { (first, second) } else { (second, first) };
                let n_out = g.shape(out)[1];
                let c = conditioner(&mut g, cond, p[0], p[1], p[2], p[3])?;
                let x_out = if *affine {
                    let s = g.slice(c, 1, 0, n_out)?;
                    let t = g.slice(c, 1, n_out, n_out)?;
                    let diff = g.sub(out, t)?;
                    let ns = g.neg(s)?;
                    let e = g.exp(ns)?;
                    g.mul(diff, e)?
                } else {
                    g.sub(out, c)?
                };
                let x = if *cond_first {
                    g.concat(&[cond, x_out], 1)?
                } else {
                    g.concat(&[x_out, cond], 1)?
                };
                Ok(g.value(x).clone())
            }
            FlowLayer::Autoregressive { degrees, .. } => {
                let k = degrees.len();
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by_key(|&i| degrees[i]);
                let mut x = y.clone();
                for &i in &order {
                    let mut g = Graph::new();
                    let p = self.leaves(&mut g);
                    let xv = g.constant(x.clone());
                    let (fwd, _) = self.forward(&mut g, &p, xv)?;
                    // t_i(x) = fwd_i - x_i depends only on already-final coordinates.
                    let fwd = g.value(fwd);
                    for r in 0..x.rows() {
                        let t = fwd.get(r, i) - x.get(r, i);
                        x.set(r, i, y.get(r, i) - t);
                    }
                }
                Ok(x)
            }
            FlowLayer::Shift { shift } => {
                let mut x = y.clone();
                let k = shift.numel();
                for (idx, v) in x.data_mut().iter_mut().enumerate() {
                    *v -= shift.data()[idx % k];
                }
                Ok(x)
            }
        }
    }

    fn lipschitz_upper_bound(&self) -> Result<f64> {
        match self {
            FlowLayer::Coupling { affine: true, .. } => Err(Error::Unsupported(
                "no Lipschitz bound for scale-and-shift coupling layers".into(),
            )),
            FlowLayer::Coupling { w1, w2, .. } => Ok(1.0 + operator_norm_bound(w1) * operator_norm_bound(w2)),
            FlowLayer::Autoregressive { degrees, w1, w2, .. } => {
                let (m1, m2) = masks(degrees, w1.cols());
                let a = w1.zip_map(&m1, |x, m| x * m)?;
                let b = w2.zip_map(&m2, |x, m| x * m)?;
                Ok(1.0 + operator_norm_bound(&a) * operator_norm_bound(&b))
            }
            FlowLayer::Shift { .. } => Ok(1.0),
        }
    }
}

/// Invertible map on vectors of length `k`: a stack of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisFlow {
    pub k: usize,
    pub layers: Vec<FlowLayer>,
}

impl AxisFlow {
    /// Length-1 axes get a single shift layer since coupling needs `k >= 2`.
    pub fn new(k: usize, kind: CouplingKind, n_layers: usize, init_scale: f64, stream: &mut RandomStream) -> Self {
        let layers = if k == 1 {
            vec![FlowLayer::Shift {
                shift: Tensor::zeros(&[1]),
            }]
        } else {
            (0..n_layers)
                .map(|i| match kind {
                    CouplingKind::Additive => FlowLayer::coupling(k, i, false, init_scale, stream),
                    CouplingKind::Affine => FlowLayer::coupling(k, i, true, init_scale, stream),
                    CouplingKind::Autoregressive => FlowLayer::autoregressive(k, i, init_scale, stream),
                })
                .collect()
        };
        Self { k, layers }
    }

    pub fn identity(k: usize) -> Self {
        Self { k, layers: vec![] }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn is_volume_preserving(&self) -> bool {
        self.layers.iter().all(|l| l.is_volume_preserving())
    }

    /// Maps every row of `x` (shape `(batch, k)`); returns the summed logdet.
    pub fn forward_rows(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        if g.shape(x)[1] != self.k {
            return Err(Error::ShapeMismatch {
                op: "axis flow",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.k],
            });
        }
        let mut y = x;
        let mut logdet: Option<Var> = None;
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.params().len();
            let (out, ld) = layer.forward(g, &p[offset..offset + n], y)?;
            offset += n;
            y = out;
            if let Some(ld) = ld {
                logdet = Some(match logdet {
                    Some(acc) => g.add(acc, ld)?,
                    None => ld,
                });
            }
        }
        Ok((y, logdet))
    }

    pub fn inverse_rows(&self, y: &Tensor) -> Result<Tensor> {
        let mut x = y.clone();
        for layer in self.layers.iter().rev() {
            x = layer.inverse_rows(&x)?;
        }
        Ok(x)
    }

    pub fn lipschitz_upper_bound(&self) -> Result<f64> {
        self.layers.iter().map(|l| l.lipschitz_upper_bound()).product()
    }

    /// Applies the map to a single vector.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p: Vec<Var> = self.params().into_iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
        let (y, _) = self.forward_rows(&mut g, &p, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Kronecker flow: an invertible map on every fibre of each axis, optionally
/// followed by `W = M + S * G(E)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KroneckerNonlinear {
    pub dims: Vec<usize>,
    pub axis_flows: Vec<AxisFlow>,
    pub mean: Option<Tensor>,
    pub rho: Option<Tensor>,
    pub order: AxisOrder,
}

impl KroneckerNonlinear {
    pub fn new(mean: Tensor, sigma0: f64, config: &NonlinearConfig, stream: &mut RandomStream) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(invalid(format!("sigma0 must be positive, got {sigma0}")));
        }
        let dims = mean.shape().to_vec();
        WeightShape::new(&dims)?;
        let axis_flows = dims
            .iter()
            .map(|&k| AxisFlow::new(k, config.kind, config.layers_per_axis, config.init_scale, stream))
            .collect();
        let (mean, rho) = if config.affine {
            (Some(mean), Some(Tensor::full(&dims, softplus_inv(sigma0))))
        } else {
            (None, None)
        };
        Ok(Self {
            dims,
            axis_flows,
            mean,
            rho,
            order: config.order,
        })
    }

    /// Pure Kronecker flow from explicit axis maps, without the affine layer.
    pub fn from_axis_flows(axis_flows: Vec<AxisFlow>, order: AxisOrder) -> Result<Self> {
        let dims: Vec<usize> = axis_flows.iter().map(|f| f.k).collect();
        WeightShape::new(&dims)?;
        Ok(Self {
            dims,
            axis_flows,
            mean: None,
            rho: None,
            order,
        })
    }

    pub fn shape(&self) -> WeightShape {
        WeightShape::new(&self.dims).expect("validated at construction")
    }

    pub fn scale(&self) -> Option<Tensor> {
        self.rho.as_ref().map(|r| r.map(softplus))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.mean.iter().chain(self.rho.iter()).collect();
        for f in &self.axis_flows {
            out.extend(f.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.mean.iter_mut().chain(self.rho.iter_mut()).collect();
        for f in &mut self.axis_flows {
            out.extend(f.params_mut());
        }
        out
    }

    pub fn has_constant_logdet(&self) -> bool {
        self.axis_flows.iter().all(|f| f.is_volume_preserving())
    }

    fn axis_param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut offset = if self.mean.is_some() { 2 } else { 0 };
        self.axis_flows
            .iter()
            .map(|f| {
                let n = f.params().len();
                let r = offset..offset + n;
                offset += n;
                r
            })
            .collect()
    }

    /// `G(E)` without the affine layer, plus its logdet.
    pub fn apply_kronecker_flow(&self, g: &mut Graph, p: &[Var], eps: Var) -> Result<(Var, Var)> {
        let ranges = self.axis_param_ranges();
        let mut z = eps;
        let mut logdet = g.scalar(0.0);
        for axis in self.order.axes(self.dims.len()) {
            let flow = &self.axis_flows[axis];
            let fp = &p[ranges[axis].clone()];
            let mut ld = None;
            z = map_along_axis(g, z, axis, |g, rows| {
                let (y, l) = flow.forward_rows(g, fp, rows)?;
                ld = l;
                Ok(y)
            })?;
            if let Some(l) = ld {
                logdet = g.add(logdet, l)?;
            }
        }
        Ok((z, logdet))
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], eps: Var) -> Result<FlowOutput> {
        let (z, mut logdet) = self.apply_kronecker_flow(g, p, eps)?;
        let weights = if self.mean.is_some() {
            let s = g.softplus(p[1])?;
            let scaled = g.mul(s, z)?;
            let ls = g.log(s)?;
            let ls = g.sum(ls)?;
            logdet = g.add(logdet, ls)?;
            g.add(p[0], scaled)?
        } else {
            z
        };
        Ok(FlowOutput { weights, logdet })
    }

    pub(crate) fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let mut z = w.clone();
        if let (Some(m), Some(s)) = (&self.mean, self.scale()) {
            z = z.zip_map(m, |a, b| a - b)?.zip_map(&s, |a, b| a / b)?;
        }
        for axis in self.order.axes(self.dims.len()).into_iter().rev() {
            let flow = &self.axis_flows[axis];
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let out = map_along_axis(&mut g, zv, axis, |g, rows| {
                let inv = flow.inverse_rows(g.value(rows))?;
                Ok(g.constant(inv))
            })?;
            z = g.value(out).clone();
        }
        Ok(z)
    }

    pub(crate) fn lipschitz_upper_bound(&self) -> Result<f64> {
        let mut l = 1.0;
        for f in &self.axis_flows {
            l *= f.lipschitz_upper_bound()?;
        }
        if let Some(s) = self.scale() {
            l *= s.max_abs();
        }
        Ok(l)
    }
}
