//! KL divergences against an isotropic Gaussian prior: closed form for the
//! Gaussian families, Monte-Carlo for flows, and a concentration certificate
//! for the Monte-Carlo quadratic term.

use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};

use crate::error::{invalid, Error, Result};
use crate::flow::{covariance_stats, standard_normal_log_density, FlowOutput, KroneckerLinear, WeightDistribution};
use crate::tensor::{Graph, RandomStream, Tensor, Var};

/// `N(center, variance * I)` over one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicPrior {
    pub center: Tensor,
    pub variance: f64,
}

impl IsotropicPrior {
    pub fn new(center: Tensor, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(invalid(format!("prior variance must be positive, got {variance}")));
        }
        Ok(Self { center, variance })
    }

    pub fn zero_mean(shape: &[usize], variance: f64) -> Result<Self> {
        Self::new(Tensor::zeros(shape), variance)
    }

    pub fn dim(&self) -> usize {
        self.center.numel()
    }

    fn check(&self, q: &WeightDistribution) -> Result<()> {
        if self.center.shape() != q.shape().dims() {
            return Err(Error::ShapeMismatch {
                op: "prior",
                lhs: q.shape().dims().to_vec(),
                rhs: self.center.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// `(trace, logdet)` of the covariance of a Gaussian-family distribution.
pub fn gaussian_trace_logdet(q: &WeightDistribution) -> Result<(f64, f64)> {
    let from_std = |s: &Tensor| {
        let tr = s.data().iter().map(|v| v * v).sum();
        let ld = s.data().iter().map(|v| 2.0 * v.ln()).sum();
        (tr, ld)
    };
    match q {
        WeightDistribution::Diag(d) => Ok(from_std(&d.sigma())),
        WeightDistribution::KDiag(d) => Ok(from_std(&d.marginal_std())),
        WeightDistribution::KLinear(d) if d.factors.len() == 2 => {
            let st = covariance_stats(&d.mean, &d.factor(0), &d.factor(1), &d.scale())?;
            Ok((st.trace, st.logdet))
        }
        WeightDistribution::KLinear(d) => Ok(k_linear_trace_logdet(d)),
        WeightDistribution::KNonlinear(_) => {
            Err(Error::Unsupported("no closed-form covariance for K-Nonlinear".into()))
        }
    }
}

/// Column norms of the first factor and row norms of the others weight the
/// squared scales, which covers every tensor order.
fn k_linear_trace_logdet(d: &KroneckerLinear) -> (f64, f64) {
    let dims = d.mean.shape().to_vec();
    let norms: Vec<Vec<f64>> = (0..dims.len())
        .map(|a| {
            let f = d.factor(a);
            (0..dims[a])
                .map(|i| {
                    (0..dims[a])
                        .map(|j| if a == 0 { f.get(j, i) } else { f.get(i, j) })
                        .map(|v| v * v)
                        .sum()
                })
                .collect()
        })
        .collect();
    let s = d.scale();
    let mut trace = 0.0;
    for (flat, sv) in s.data().iter().enumerate() {
        let mut rem = flat;
        let mut w = sv * sv;
        for a in (0..dims.len()).rev() {
            w *= norms[a][rem % dims[a]];
            rem /= dims[a];
        }
        trace += w;
    }
    let logdet = s.data().iter().map(|v| 2.0 * v.ln()).sum();
    (trace, logdet)
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `KL(q || p)` in closed form for Diag, K-Diag and K-Linear.
pub fn kl_gaussian_analytic(q: &WeightDistribution, p: &IsotropicPrior) -> Result<f64> {
    p.check(q)?;
    let (trace, logdet) = gaussian_trace_logdet(q)?;
    let mean = q.gaussian_mean().expect("Gaussian family");
    let d = p.dim() as f64;
    let lam = p.variance;
    Ok(0.5 * (trace / lam + sq_dist(mean, &p.center) / lam - d + d * lam.ln() - logdet))
}

/// Closed-form KL inside a graph, parameters from `leaves` (in
/// [`WeightDistribution::params`] order) and prior variance from the scalar
/// `lambda`, so both can be trained.
pub fn kl_gaussian_graph(
    g: &mut Graph,
    q: &WeightDistribution,
    leaves: &[Var],
    center: &Tensor,
    lambda: Var,
) -> Result<Var> {
    let dims = q.shape().dims().to_vec();
    let rank = dims.len();
    let (trace, logdet) = match q {
        WeightDistribution::Diag(_) => {
            let s = g.softplus(leaves[1])?;
            let s2 = g.square(s)?;
            let tr = g.sum(s2)?;
            let ls = g.log(s)?;
            let ld = g.sum(ls)?;
            (tr, g.scale(ld, 2.0)?)
        }
        WeightDistribution::KDiag(_) => {
            let total: usize = dims.iter().product();
            let mut tr = g.scalar(1.0);
            let mut ld = g.scalar(0.0);
            for (a, &k) in dims.iter().enumerate() {
                let u = g.softplus(leaves[1 + a])?;
                let u2 = g.square(u)?;
                let su2 = g.sum(u2)?;
                tr = g.mul(tr, su2)?;
                let lu = g.log(u)?;
                let slu = g.sum(lu)?;
                let term = g.scale(slu, 2.0 * (total / k) as f64)?;
                ld = g.add(ld, term)?;
            }
            (tr, ld)
        }
        WeightDistribution::KLinear(_) => {
            let s = g.softplus(leaves[1 + rank])?;
            let mut weighted = g.square(s)?;
            for (a, &k) in dims.iter().enumerate() {
                let f = KroneckerLinear::factor_var(g, leaves[1 + a])?;
                let f2 = g.square(f)?;
                let norms = g.sum_axis(f2, if a == 0 { 0 } else { 1 })?;
                let mut bshape = vec![1; rank];
                bshape[a] = k;
                let nb = g.reshape(norms, &bshape)?;
                weighted = g.mul(weighted, nb)?;
            }
            let tr = g.sum(weighted)?;
            let ls = g.log(s)?;
            let ld = g.sum(ls)?;
            (tr, g.scale(ld, 2.0)?)
        }
        WeightDistribution::KNonlinear(_) => {
            return Err(Error::Unsupported("no closed-form KL for K-Nonlinear".into()))
        }
    };
    let c = g.constant(center.clone());
    let diff = g.sub(leaves[0], c)?;
    let diff2 = g.square(diff)?;
    let dist = g.sum(diff2)?;
    let num = g.add(trace, dist)?;
    let ratio = g.div(num, lambda)?;
    let d = dims.iter().product::<usize>() as f64;
    let ll = g.log(lambda)?;
    let dll = g.scale(ll, d)?;
    let a = g.sub(ratio, logdet)?;
    let b = g.add(a, dll)?;
    let c = g.offset(b, -d)?;
    g.scale(c, 0.5)
}

/// Single-draw KL estimate `ln q0(E) - logdet - ln p(W)` inside a graph.
pub fn kl_sample_graph(g: &mut Graph, out: FlowOutput, eps: &Tensor, center: &Tensor, lambda: Var) -> Result<Var> {
    let d = eps.numel() as f64;
    let base = standard_normal_log_density(eps.data());
    let c = g.constant(center.clone());
    let diff = g.sub(out.weights, c)?;
    let diff2 = g.square(diff)?;
    let dist = g.sum(diff2)?;
    let quad = g.div(dist, lambda)?;
    let quad = g.scale(quad, 0.5)?;
    let ll = g.log(lambda)?;
    let norm = g.scale(ll, 0.5 * d)?;
    // -ln p(W) = quad + d/2 ln(2 pi lambda)
    let neg_prior = g.add(quad, norm)?;
    let neg_prior = g.offset(neg_prior, 0.5 * d * (2.0 * PI).ln())?;
    let t = g.sub(neg_prior, out.logdet)?;
    g.offset(t, base)
}

/// Per-draw terms of the Monte-Carlo KL with the prior reduced to a standard
/// normal, so that `kl = base_log_density - logdet - prior_log_density`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTerm {
    pub base_log_density: f64,
    pub logdet: f64,
    pub prior_log_density: f64,
}

impl KlTerm {
    pub fn kl(&self) -> f64 {
        self.base_log_density - self.logdet - self.prior_log_density
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub k: usize,
    pub dim: usize,
    pub terms: Vec<KlTerm>,
}

impl KlEstimate {
    /// Average of `1/2 ||g(E)||^2` for the normalized map.
    pub fn quadratic_mean(&self) -> f64 {
        let n = self.terms.len() as f64;
        let neg: f64 = self.terms.iter().map(|t| -t.prior_log_density).sum();
        neg / n - 0.5 * self.dim as f64 * (2.0 * PI).ln()
    }
}

fn normalized(w: &Tensor, p: &IsotropicPrior) -> Vec<f64> {
    let s = p.variance.sqrt();
    w.data().iter().zip(p.center.data()).map(|(a, c)| (a - c) / s).collect()
}

/// Monte-Carlo `KL(q || p)` from `k` draws, with the prior centre and scale
/// absorbed into the flow.
pub fn kl_monte_carlo(
    q: &WeightDistribution,
    p: &IsotropicPrior,
    k: usize,
    stream: &mut RandomStream,
) -> Result<KlEstimate> {
    if k < 1 {
        return Err(invalid("Monte-Carlo KL needs at least one draw"));
    }
    p.check(q)?;
    let d = p.dim();
    let shift = 0.5 * d as f64 * p.variance.ln();
    let mut terms = Vec::with_capacity(k);
    for _ in 0..k {
        let s = q.sample(stream)?;
        terms.push(KlTerm {
            base_log_density: s.base_log_density,
            logdet: s.logdet - shift,
            prior_log_density: standard_normal_log_density(&normalized(&s.weights, p)),
        });
    }
    let kls: Vec<f64> = terms.iter().map(KlTerm::kl).collect();
    let mean = kls.iter().sum::<f64>() / k as f64;
    let std_error = if k > 1 {
        let var = kls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(KlEstimate {
        mean,
        std_error,
        k,
        dim: d,
        terms,
    })
}

/// Lipschitz bound of the normalized map `(g(E) - center) / sqrt(lambda)`.
pub fn lipschitz_upper_bound(q: &WeightDistribution, p: &IsotropicPrior) -> Result<f64> {
    Ok(q.lipschitz_upper_bound()? / p.variance.sqrt())
}

/// `||g^-1(0)||` for the normalized map, i.e. `||g^-1(center)||`.
pub fn inverse_zero_norm(q: &WeightDistribution, p: &IsotropicPrior) -> Result<f64> {
    p.check(q)?;
    let e = q.inverse(&p.center)?;
    Ok(e.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Tail bound on the deviation of the Monte-Carlo average of
/// `1/2 ||g(E)||^2` from its expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationCert {
    pub l0: f64,
    pub l: f64,
    pub d: usize,
    pub inv_zero_norm: f64,
    pub c: f64,
    pub epsilon: f64,
    pub k: usize,
    pub failure_prob: f64,
}

/// `C = (6 L^2 + (L / sqrt(ln 2)) (sqrt(d) + ||g^-1(0)||))^2` with `L = L0 / sqrt(2)`.
pub fn certificate_constant(l0: f64, d: usize, inv_zero_norm: f64) -> f64 {
    let l = l0 / 2f64.sqrt();
    let inner = 6.0 * l * l + l / LN_2.sqrt() * ((d as f64).sqrt() + inv_zero_norm);
    inner * inner
}

pub fn concentration_certificate(l0: f64, d: usize, inv_zero_norm: f64, k: usize, epsilon: f64) -> ConcentrationCert {
    let c = certificate_constant(l0, d, inv_zero_norm);
    let kf = k as f64;
    let failure_prob = (-kf * epsilon * epsilon / (2.0 * (4.0 * c * c + c * epsilon))).exp();
    ConcentrationCert {
        l0,
        l: l0 / 2f64.sqrt(),
        d,
        inv_zero_norm,
        c,
        epsilon,
        k,
        failure_prob,
    }
}

/// The smallest deviation certified at failure probability `delta`.
pub fn certificate_for_confidence(
    l0: f64,
    d: usize,
    inv_zero_norm: f64,
    k: usize,
    delta: f64,
) -> Result<ConcentrationCert> {
    if !(delta > 0.0 && delta < 1.0) || k == 0 {
        return Err(invalid(format!("need delta in (0,1) and k >= 1, got {delta}, {k}")));
    }
    let c = certificate_constant(l0, d, inv_zero_norm);
    let l = (1.0 / delta).ln();
    let kf = k as f64;
    let epsilon = (2.0 * l * c + (4.0 * l * l * c * c + 32.0 * kf * l * c * c).sqrt()) / (2.0 * kf);
    Ok(concentration_certificate(l0, d, inv_zero_norm, k, epsilon))
}

/// A high-probability upper bound on `KL(q || p)` for flows with constant
/// log-determinant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedKl {
    pub estimate: KlEstimate,
    pub cert: ConcentrationCert,
    pub upper: f64,
}

/// Uses the analytic base-density term, the constant log-determinant, and the
/// Monte-Carlo quadratic term inflated by the certified deviation.
pub fn certified_kl(
    q: &WeightDistribution,
    p: &IsotropicPrior,
    k: usize,
    delta: f64,
    stream: &mut RandomStream,
) -> Result<CertifiedKl> {
    if !q.has_constant_logdet() {
        return Err(Error::Unsupported(
            "certified KL needs a flow with constant log-determinant".into(),
        ));
    }
    let estimate = kl_monte_carlo(q, p, k, stream)?;
    let l0 = lipschitz_upper_bound(q, p)?;
    let r = inverse_zero_norm(q, p)?;
    let cert = certificate_for_confidence(l0, p.dim(), r, k, delta)?;
    let logdet = estimate.terms[0].logdet;
    let upper = -0.5 * p.dim() as f64 - logdet + estimate.quadratic_mean() + cert.epsilon;
    Ok(CertifiedKl { estimate, cert, upper })
}
