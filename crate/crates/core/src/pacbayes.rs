//! PAC-Bayes bound arithmetic and end-to-end certification.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::flow::WeightDistribution;
use crate::kl::{certified_kl, kl_gaussian_analytic, ConcentrationCert, IsotropicPrior};
use crate::tensor::RandomStream;

/// `kl(q || p)` between Bernoulli distributions, `+inf` when `p` is 0 or 1
/// and `q` differs.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// `sup { p in [q, 1) : kl(q || p) <= budget }` by safeguarded Newton.
pub fn invert_bernoulli_kl(q: f64, budget: f64) -> f64 {
    if budget <= 0.0 {
        return q;
    }
    if q >= 1.0 {
        return 1.0;
    }
    let f = |p: f64| bernoulli_kl(q, p) - budget;
    let (mut lo, mut hi) = (q, 1.0);
    let mut p = (q + (budget / 2.0).sqrt()).min(1.0 - 1e-15);
    for _ in 0..200 {
        let fp = f(p);
        if fp.abs() < 1e-12 {
            return p;
        }
        if fp > 0.0 {
            hi = p;
        } else {
            lo = p;
        }
        if hi - lo < 1e-12 {
            break;
        }
        let slope = (1.0 - q) / (1.0 - p) - q / p;
        let newton = p - fp / slope;
        p = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if 1.0 - lo < 1e-12 {
        1.0
    } else {
        0.5 * (lo + hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub empirical_risk: f64,
    pub kl: f64,
    pub m: usize,
    pub delta: f64,
    pub beta: Option<f64>,
}

impl BoundInputs {
    pub fn new(empirical_risk: f64, kl: f64, m: usize, delta: f64) -> Self {
        Self {
            empirical_risk,
            kl,
            m,
            delta,
            beta: None,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.empirical_risk) {
            return Err(invalid(format!(
                "empirical risk {} outside [0, 1]",
                self.empirical_risk
            )));
        }
        if !(self.kl >= 0.0) {
            return Err(invalid(format!("KL must be non-negative, got {}", self.kl)));
        }
        if self.m <= 1 {
            return Err(invalid(format!("need m > 1, got {}", self.m)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta {} outside (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// `(kl + penalty + ln(m / delta)) / (m - 1)`.
    pub fn budget(&self, penalty: f64) -> f64 {
        (self.kl + penalty + (self.m as f64 / self.delta).ln()) / (self.m - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    McAllester,
    Pinsker,
    Catoni,
}

impl BoundKind {
    pub fn tag(self) -> &'static str {
        match self {
            BoundKind::McAllester => "mcallester",
            BoundKind::Pinsker => "pinsker",
            BoundKind::Catoni => "catoni",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "mcallester" => Ok(Self::McAllester),
            "pinsker" => Ok(Self::Pinsker),
            "catoni" => Ok(Self::Catoni),
            other => Err(invalid(format!("unknown bound type {other:?}"))),
        }
    }
}

/// Monte-Carlo estimate of the posterior's empirical risk and its
/// high-probability upper bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub samples: usize,
    pub mean: f64,
    pub upper: f64,
    pub delta: f64,
}

impl RiskEstimate {
    pub fn slack(&self) -> f64 {
        self.upper - self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub value: f64,
    pub clamped: bool,
    pub inputs: BoundInputs,
    pub prior_penalty: f64,
    pub certificates: Vec<ConcentrationCert>,
    pub risk: Option<RiskEstimate>,
}

impl BoundReport {
    fn plain(kind: BoundKind, raw: f64, inputs: BoundInputs, prior_penalty: f64) -> Self {
        Self {
            kind,
            value: raw.min(1.0),
            clamped: raw > 1.0,
            inputs,
            prior_penalty,
            certificates: Vec::new(),
            risk: None,
        }
    }

    /// Recomputes the bound from the recorded inputs.
    pub fn recompute(&self) -> Result<f64> {
        let r = match self.kind {
            BoundKind::McAllester => mcallester_with_penalty(&self.inputs, self.prior_penalty)?,
            BoundKind::Pinsker => pinsker_with_penalty(&self.inputs, self.prior_penalty)?,
            BoundKind::Catoni => catoni_with_penalty(&self.inputs, self.prior_penalty)?,
        };
        Ok(r.value)
    }

    /// One `key value` pair per line. Floats use shortest round-trip form.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let i = &self.inputs;
        let _ = writeln!(s, "bound_type {}", self.kind.tag());
        let _ = writeln!(s, "value {:?}", self.value);
        let _ = writeln!(s, "clamped {}", self.clamped);
        let _ = writeln!(s, "empirical_risk {:?}", i.empirical_risk);
        let _ = writeln!(s, "kl {:?}", i.kl);
        let _ = writeln!(s, "m {}", i.m);
        let _ = writeln!(s, "delta {:?}", i.delta);
        if let Some(b) = i.beta {
            let _ = writeln!(s, "beta {b:?}");
        }
        let _ = writeln!(s, "prior_penalty {:?}", self.prior_penalty);
        for (n, c) in self.certificates.iter().enumerate() {
            let _ = writeln!(s, "cert{n}_l0 {:?}", c.l0);
            let _ = writeln!(s, "cert{n}_d {}", c.d);
            let _ = writeln!(s, "cert{n}_inv_zero_norm {:?}", c.inv_zero_norm);
            let _ = writeln!(s, "cert{n}_c {:?}", c.c);
            let _ = writeln!(s, "cert{n}_epsilon {:?}", c.epsilon);
            let _ = writeln!(s, "cert{n}_k {}", c.k);
            let _ = writeln!(s, "cert{n}_failure_prob {:?}", c.failure_prob);
        }
        if let Some(r) = self.risk {
            let _ = writeln!(s, "risk_samples {}", r.samples);
            let _ = writeln!(s, "risk_mean {:?}", r.mean);
            let _ = writeln!(s, "risk_upper {:?}", r.upper);
            let _ = writeln!(s, "risk_slack {:?}", r.slack());
            let _ = writeln!(s, "risk_delta {:?}", r.delta);
        }
        s
    }

    /// Parses the kind, inputs and penalty back from [`Self::to_key_value`]
    /// output; certificates and risk details are informational only.
    pub fn replay_key_value(text: &str) -> Result<(f64, f64)> {
        let mut kind = None;
        let mut value = None;
        let (mut risk, mut kl, mut m, mut delta, mut beta, mut penalty) = (None, None, None, None, None, 0.0);
        let num = |v: &str| v.parse::<f64>().map_err(|e| invalid(format!("bad number {v:?}: {e}")));
        for line in text.lines() {
            let Some((k, v)) = line.split_once(' ') else { continue };
            match k {
                "bound_type" => kind = Some(BoundKind::parse(v)?),
                "value" => value = Some(num(v)?),
                "empirical_risk" => risk = Some(num(v)?),
                "kl" => kl = Some(num(v)?),
                "m" => m = Some(v.parse::<usize>().map_err(|e| invalid(e.to_string()))?),
                "delta" => delta = Some(num(v)?),
                "beta" => beta = Some(num(v)?),
                "prior_penalty" => penalty = num(v)?,
                _ => {}
            }
        }
        let missing = || invalid("incomplete bound record");
        let mut inputs = BoundInputs::new(
            risk.ok_or_else(missing)?,
            kl.ok_or_else(missing)?,
            m.ok_or_else(missing)?,
            delta.ok_or_else(missing)?,
        );
        inputs.beta = beta;
        let report = Self::plain(kind.ok_or_else(missing)?, 0.0, inputs, penalty);
        Ok((value.ok_or_else(missing)?, report.recompute()?))
    }

    pub const CSV_HEADER: &'static str =
        "bound_type,value,clamped,empirical_risk,kl,m,delta,beta,prior_penalty,cert_epsilon_sum,cert_failure_prob_sum,risk_samples,risk_mean,risk_slack";

    pub fn csv_row(&self) -> String {
        let i = &self.inputs;
        let opt = |v: Option<String>| v.unwrap_or_default();
        let (eps, fail) = if self.certificates.is_empty() {
            (String::new(), String::new())
        } else {
            (
                format!("{:?}", self.certificates.iter().map(|c| c.epsilon).sum::<f64>()),
                format!("{:?}", self.certificates.iter().map(|c| c.failure_prob).sum::<f64>()),
            )
        };
        format!(
            "{},{:?},{},{:?},{:?},{},{:?},{},{:?},{},{},{},{},{}",
            self.kind.tag(),
            self.value,
            self.clamped,
            i.empirical_risk,
            i.kl,
            i.m,
            i.delta,
            opt(i.beta.map(|b| format!("{b:?}"))),
            self.prior_penalty,
            eps,
            fail,
            opt(self.risk.map(|r| r.samples.to_string())),
            opt(self.risk.map(|r| format!("{:?}", r.mean))),
            opt(self.risk.map(|r| format!("{:?}", r.slack()))),
        )
    }

    /// Appends a CSV row, writing the header first if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut text = String::new();
        if fresh {
            text.push_str(Self::CSV_HEADER);
            text.push('\n');
        }
        text.push_str(&self.csv_row());
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| invalid(e.to_string()))
    }
}

fn mcallester_with_penalty(inputs: &BoundInputs, penalty: f64) -> Result<BoundReport> {
    inputs.validate()?;
    let v = invert_bernoulli_kl(inputs.empirical_risk, inputs.budget(penalty));
    Ok(BoundReport::plain(BoundKind::McAllester, v, *inputs, penalty))
}

fn pinsker_with_penalty(inputs: &BoundInputs, penalty: f64) -> Result<BoundReport> {
    inputs.validate()?;
    let v = inputs.empirical_risk + (inputs.budget(penalty) / 2.0).sqrt();
    Ok(BoundReport::plain(BoundKind::Pinsker, v, *inputs, penalty))
}

fn catoni_with_penalty(inputs: &BoundInputs, penalty: f64) -> Result<BoundReport> {
    inputs.validate()?;
    let beta = inputs.beta.ok_or_else(|| invalid("Catoni bound needs beta"))?;
    if !(beta > 0.5) {
        return Err(invalid(format!("Catoni bound needs beta > 1/2, got {beta}")));
    }
    let m = inputs.m as f64;
    let v = (inputs.empirical_risk + beta / m * (inputs.kl + penalty + (1.0 / inputs.delta).ln()))
        / (1.0 - 1.0 / (2.0 * beta));
    Ok(BoundReport::plain(BoundKind::Catoni, v, *inputs, penalty))
}

pub fn mcallester_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    mcallester_with_penalty(inputs, 0.0)
}

pub fn pinsker_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    pinsker_with_penalty(inputs, 0.0)
}

pub fn catoni_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    catoni_with_penalty(inputs, 0.0)
}

/// Minimizer in `beta` of the Catoni bound.
pub fn optimal_catoni_beta(empirical_risk: f64, kl: f64, m: usize, delta: f64) -> Result<f64> {
    let a = kl + (1.0 / delta).ln();
    if !(a > 0.0) {
        return Err(invalid(format!("kl + ln(1/delta) must be positive, got {a}")));
    }
    Ok(0.5 * (1.0 + (1.0 + 2.0 * empirical_risk * m as f64 / a).sqrt()))
}

pub const PRIOR_GRID_B: f64 = 100.0;
pub const PRIOR_GRID_C: f64 = 0.1;

/// Cost of tuning the prior variance over the grid `lambda = c exp(-j / b)`:
/// returns `(2 ln(b ln(c / lambda)), 6 delta / pi^2)`. The grid index is
/// floored at 1, so variances above `c exp(-1/b)` pay no penalty.
pub fn union_bound_prior_penalty(lambda: f64, b: f64, c: f64, delta: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda < c) {
        return Err(invalid(format!("prior variance {lambda} must lie in (0, {c})")));
    }
    let j = (b * (c / lambda).ln()).max(1.0);
    Ok((
        2.0 * j.ln(),
        6.0 * delta / (std::f64::consts::PI * std::f64::consts::PI),
    ))
}

/// Cross-entropy divided by `ln |Y|`.
pub fn surrogate_loss(logits: &[f64], label: usize, n_classes: usize) -> f64 {
    assert!(n_classes >= 2 && logits.len() == n_classes && label < n_classes);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - logits[label]) / (n_classes as f64).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum KlMode {
    Analytic,
    MonteCarloCertified { samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub delta: f64,
    pub risk_samples: usize,
    pub kl_mode: KlMode,
    /// Shares of `delta` for risk estimation, KL certificates and the bound.
    pub split: [f64; 3],
    pub prior_b: f64,
    pub prior_c: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            delta: 0.035,
            risk_samples: 1000,
            kl_mode: KlMode::Analytic,
            split: [0.5, 0.25, 0.25],
            prior_b: PRIOR_GRID_B,
            prior_c: PRIOR_GRID_C,
        }
    }
}

/// Certified McAllester bound for a posterior over several parameter blocks.
///
/// `sample_error` draws one network from the posterior and returns its
/// zero-one error on the `m` training points.
pub fn certify(
    blocks: &[(&WeightDistribution, &IsotropicPrior)],
    m: usize,
    lambda: f64,
    config: &CertifyConfig,
    mut sample_error: impl FnMut(&mut RandomStream) -> Result<f64>,
    stream: &mut RandomStream,
) -> Result<BoundReport> {
    let [d_risk, d_cert, d_bound] = config.split.map(|s| s * config.delta);
    if (config.split.iter().sum::<f64>() - 1.0).abs() > 1e-12 || config.split.iter().any(|&s| s <= 0.0) {
        return Err(invalid("delta split must be positive and sum to 1"));
    }
    if config.risk_samples == 0 {
        return Err(invalid("need at least one risk sample"));
    }

    // Gaussian blocks always use the closed form; in Monte-Carlo mode the
    // remaining blocks share the certificate confidence.
    let mut kl = 0.0;
    let mut certificates = Vec::new();
    let flows = blocks.iter().filter(|(q, _)| q.gaussian_mean().is_none()).count();
    for (q, p) in blocks {
        if q.gaussian_mean().is_some() {
            kl += kl_gaussian_analytic(q, p)?.max(0.0);
            continue;
        }
        let KlMode::MonteCarloCertified { samples } = config.kl_mode else {
            return Err(Error::Unsupported("analytic KL needs a Gaussian family".into()));
        };
        if !q.has_constant_logdet() {
            return Err(Error::Unsupported(
                "Monte-Carlo certification needs a volume-preserving flow".into(),
            ));
        }
        let ck = certified_kl(q, p, samples, d_cert / flows as f64, stream)?;
        kl += ck.upper.max(0.0);
        certificates.push(ck.cert);
    }

    let mut total = 0.0;
    for _ in 0..config.risk_samples {
        total += sample_error(stream)?;
    }
    let mean = total / config.risk_samples as f64;
    let upper = invert_bernoulli_kl(mean, (2.0 / d_risk).ln() / config.risk_samples as f64);
    let (penalty, delta_eff) = union_bound_prior_penalty(lambda, config.prior_b, config.prior_c, d_bound)?;

    let inputs = BoundInputs::new(upper, kl, m, delta_eff);
    let mut report = mcallester_with_penalty(&inputs, penalty)?;
    report.certificates = certificates;
    report.risk = Some(RiskEstimate {
        samples: config.risk_samples,
        mean,
        upper,
        delta: d_risk,
    });
    Ok(report)
}
