//! Stochastic multilayer perceptrons with per-layer weight distributions.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::flow::{
    softplus, softplus_inv, DiagGaussian, Family, FlowOutput, KroneckerNonlinear, NonlinearConfig, WeightDistribution,
};
use crate::kl::{kl_gaussian_analytic, kl_gaussian_graph, kl_monte_carlo, kl_sample_graph, IsotropicPrior};
use crate::pacbayes::{certify, BoundReport, CertifyConfig, PRIOR_GRID_B, PRIOR_GRID_C};
use crate::tensor::{sample_standard_normal, Adam, Graph, RandomStream, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn graph(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticLayer {
    /// Distribution over the `(n_in, n_out)` weight matrix.
    pub weight: WeightDistribution,
    /// Diag distribution over the length-`n_out` bias.
    pub bias: WeightDistribution,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticMLP {
    pub layers: Vec<StochasticLayer>,
}

impl StochasticMLP {
    /// Layer widths `sizes[0] -> sizes[1] -> ...`, hidden layers with
    /// `hidden`, identity output. Means use Glorot-normal initialization.
    pub fn new(
        sizes: &[usize],
        family: Family,
        sigma0: f64,
        hidden: Activation,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        Self::with_flow_config(sizes, family, sigma0, hidden, &NonlinearConfig::default(), stream)
    }

    pub fn with_flow_config(
        sizes: &[usize],
        family: Family,
        sigma0: f64,
        hidden: Activation,
        flow: &NonlinearConfig,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!(
                "need at least two positive layer sizes, got {sizes:?}"
            )));
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let std = (2.0 / (n_in + n_out) as f64).sqrt();
            let mean = Tensor::randn(&[n_in, n_out], stream).map(|v| v * std);
            let weight = match family {
                Family::KNonlinear => KroneckerNonlinear::new(mean, sigma0, flow, stream)?.into(),
                f => WeightDistribution::init(f, mean, sigma0, stream)?,
            };
            let bias = DiagGaussian::isotropic(Tensor::zeros(&[n_out]), sigma0)?.into();
            let activation = if i + 2 == sizes.len() {
                Activation::Identity
            } else {
                hidden
            };
            layers.push(StochasticLayer {
                weight,
                bias,
                activation,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape().dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape().dims()[1]
    }

    /// Weight and bias distributions, alternating, input layer first.
    pub fn blocks(&self) -> Vec<&WeightDistribution> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut WeightDistribution> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.params().into_iter().chain(l.bias.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.params_mut().into_iter().chain(l.bias.params_mut()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Graph leaves per block, in [`Self::blocks`] order.
    pub fn leaves(&self, g: &mut Graph, tracked: bool) -> Vec<Vec<Var>> {
        self.blocks().into_iter().map(|b| b.leaves(g, tracked)).collect()
    }

    /// Network output for one reparameterized draw of every block. With
    /// `noise = false` the base draws are zero, giving the location network.
    pub fn forward(
        &self,
        g: &mut Graph,
        leaves: &[Vec<Var>],
        x: Var,
        noise: bool,
        stream: &mut RandomStream,
    ) -> Result<(Var, Vec<Draw>)> {
        let mut h = x;
        let mut draws = Vec::with_capacity(leaves.len());
        for (b, (block, lv)) in self.blocks().into_iter().zip(leaves).enumerate() {
            let dims = block.shape().dims().to_vec();
            let eps = if noise {
                sample_standard_normal(&dims, stream)
            } else {
                Tensor::zeros(&dims)
            };
            let ev = g.constant(eps.clone());
            let out = block.forward(g, lv, ev)?;
            if b % 2 == 0 {
                h = g.matmul(h, out.weights)?;
            } else {
                h = g.add(h, out.weights)?;
                h = self.layers[b / 2].activation.graph(g, h)?;
            }
            draws.push(Draw { out, eps });
        }
        Ok((h, draws))
    }

    pub fn sample_network(&self, stream: &mut RandomStream) -> Result<DeterministicNet> {
        let mut layers = Vec::new();
        for l in &self.layers {
            layers.push((
                l.weight.sample(stream)?.weights,
                l.bias.sample(stream)?.weights,
                l.activation,
            ));
        }
        Ok(DeterministicNet { layers })
    }

    /// The network evaluated at zero base noise.
    pub fn location_network(&self) -> Result<DeterministicNet> {
        let mut layers = Vec::new();
        for l in &self.layers {
            layers.push((l.weight.location()?, l.bias.location()?, l.activation));
        }
        Ok(DeterministicNet { layers })
    }

    /// Monte-Carlo posterior predictive class probabilities, one row per input.
    pub fn predict_posterior(&self, x: &Tensor, k: usize, stream: &mut RandomStream) -> Result<Tensor> {
        if k == 0 {
            return Err(invalid("predict_posterior needs K >= 1"));
        }
        let mut acc = Tensor::zeros(&[x.rows(), self.output_dim()]);
        for _ in 0..k {
            let p = softmax_rows(&self.sample_network(stream)?.logits(x)?);
            for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        Ok(acc.map(|v| v / k as f64))
    }
}

/// One block's reparameterized draw inside a graph.
#[derive(Clone, Debug)]
pub struct Draw {
    pub out: FlowOutput,
    pub eps: Tensor,
}

/// A fixed-weight network drawn from a [`StochasticMLP`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicNet {
    pub layers: Vec<(Tensor, Tensor, Activation)>,
}

impl DeterministicNet {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (w, b, act) in &self.layers {
            h = h.matmul(w)?;
            let n = b.numel();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + b.data()[i % n]);
            }
        }
        Ok(h)
    }

    /// Fraction of rows whose arg-max differs from the label.
    pub fn error_rate(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(classification_error(&logits, labels))
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn classification_error(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let wrong = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
    },
    /// Per-output regression targets; only entries with mask 1 are observed.
    Regression {
        values: Tensor,
        mask: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn classification(x: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != labels.len() {
            return Err(invalid("features must be (n, dim) with one label per row"));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(invalid("label out of range"));
        }
        Ok(Self {
            x,
            targets: Targets::Classes { labels, n_classes },
        })
    }

    pub fn regression(x: Tensor, values: Tensor, mask: Tensor) -> Result<Self> {
        if x.shape().len() != 2 || values.shape() != mask.shape() || values.rows() != x.rows() {
            return Err(invalid("regression targets must be (n, outputs) with a matching mask"));
        }
        Ok(Self {
            x,
            targets: Targets::Regression { values, mask },
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Regression { .. } => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let rows = |t: &Tensor| {
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(vec![idx.len(), c], data).expect("row subset")
        };
        let targets = match &self.targets {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Regression { values, mask } => Targets::Regression {
                values: rows(values),
                mask: rows(mask),
            },
        };
        Dataset {
            x: rows(&self.x),
            targets,
        }
    }
}

/// Prior `N(center_b, lambda I)` over every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPrior {
    pub centers: Vec<Tensor>,
    pub variance: f64,
}

impl ModelPrior {
    /// Centred at the model's current locations (for example its random
    /// initialization).
    pub fn at_locations(model: &StochasticMLP, variance: f64) -> Result<Self> {
        let centers = model
            .blocks()
            .into_iter()
            .map(|b| b.location())
            .collect::<Result<_>>()?;
        Self::new(centers, variance)
    }

    pub fn zero(model: &StochasticMLP, variance: f64) -> Result<Self> {
        let centers = model
            .blocks()
            .into_iter()
            .map(|b| Tensor::zeros(b.shape().dims()))
            .collect();
        Self::new(centers, variance)
    }

    pub fn new(centers: Vec<Tensor>, variance: f64) -> Result<Self> {
        IsotropicPrior::new(Tensor::scalar(0.0), variance)?;
        Ok(Self { centers, variance })
    }

    pub fn blocks(&self) -> Vec<IsotropicPrior> {
        self.centers
            .iter()
            .map(|c| IsotropicPrior {
                center: c.clone(),
                variance: self.variance,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    /// Closed form for Gaussian blocks, single-draw estimate otherwise.
    #[default]
    Analytic,
    /// Single-draw estimate for every block.
    Sample,
}

/// KL of the whole model inside a graph.
pub fn model_kl_graph(
    g: &mut Graph,
    model: &StochasticMLP,
    leaves: &[Vec<Var>],
    draws: &[Draw],
    prior: &ModelPrior,
    lambda: Var,
    estimator: KlEstimator,
) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for (b, block) in model.blocks().into_iter().enumerate() {
        let term = if estimator == KlEstimator::Analytic && block.gaussian_mean().is_some() {
            kl_gaussian_graph(g, block, &leaves[b], &prior.centers[b], lambda)?
        } else {
            kl_sample_graph(g, draws[b].out, &draws[b].eps, &prior.centers[b], lambda)?
        };
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Closed-form KL where available, `mc_draws`-sample Monte-Carlo otherwise.
pub fn model_kl(model: &StochasticMLP, prior: &ModelPrior, mc_draws: usize, stream: &mut RandomStream) -> Result<f64> {
    let mut total = 0.0;
    for (block, p) in model.blocks().into_iter().zip(prior.blocks()) {
        total += if block.gaussian_mean().is_some() {
            kl_gaussian_analytic(block, &p)?
        } else {
            kl_monte_carlo(block, &p, mc_draws, stream)?.mean
        };
    }
    Ok(total)
}

/// Mean negative log-likelihood of a batch. Classification uses softmax
/// cross-entropy; regression a Gaussian with variance `noise_var` on the
/// observed entries.
pub fn nll_graph(g: &mut Graph, out: Var, batch: &Dataset, noise_var: f64) -> Result<Var> {
    let n = batch.len() as f64;
    match &batch.targets {
        Targets::Classes { labels, n_classes } => {
            let mut onehot = Tensor::zeros(&[labels.len(), *n_classes]);
            for (i, &y) in labels.iter().enumerate() {
                onehot.set(i, y, 1.0);
            }
            let oh = g.constant(onehot);
            let lsm = g.log_softmax(out)?;
            let picked = g.mul(lsm, oh)?;
            let s = g.sum(picked)?;
            g.scale(s, -1.0 / n)
        }
        Targets::Regression { values, mask } => {
            let y = g.constant(values.clone());
            let mk = g.constant(mask.clone());
            let diff = g.sub(out, y)?;
            let sq = g.square(diff)?;
            let masked = g.mul(sq, mk)?;
            let s = g.sum(masked)?;
            let quad = g.scale(s, 0.5 / (noise_var * n))?;
            let observed = mask.sum() / n;
            g.offset(quad, 0.5 * observed * (2.0 * PI * noise_var).ln())
        }
    }
}

/// Terms of a training objective evaluated in one graph.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    pub loss: Var,
    pub data_term: Var,
    pub kl: Var,
    pub output: Var,
}

/// Per-datum negative ELBO: `NLL + (beta / m) KL`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_graph(
    g: &mut Graph,
    model: &StochasticMLP,
    leaves: &[Vec<Var>],
    batch: &Dataset,
    beta: f64,
    prior: &ModelPrior,
    lambda: Var,
    m: usize,
    estimator: KlEstimator,
    noise_var: f64,
    stream: &mut RandomStream,
) -> Result<ObjectiveParts> {
    let x = g.constant(batch.x.clone());
    let (output, draws) = model.forward(g, leaves, x, true, stream)?;
    let data_term = nll_graph(g, output, batch, noise_var)?;
    let kl = model_kl_graph(g, model, leaves, &draws, prior, lambda, estimator)?;
    let weighted = g.scale(kl, beta / m as f64)?;
    let loss = g.add(data_term, weighted)?;
    Ok(ObjectiveParts {
        loss,
        data_term,
        kl,
        output,
    })
}

/// `2 ln(b ln(c / lambda))` with the grid index floored at 1.
fn prior_penalty_graph(g: &mut Graph, lambda: Var) -> Result<Var> {
    let lam = g.item(lambda);
    if PRIOR_GRID_B * (PRIOR_GRID_C / lam).ln() <= 1.0 {
        return Ok(g.scalar(0.0));
    }
    let inv = g.log(lambda)?;
    let lc = g.neg(inv)?;
    let lc = g.offset(lc, PRIOR_GRID_C.ln())?;
    let j = g.scale(lc, PRIOR_GRID_B)?;
    let lj = g.log(j)?;
    g.scale(lj, 2.0)
}

/// The Catoni bound with the surrogate loss as empirical risk and
/// `beta = 1/2 + softplus(beta_free)`. With `penalize_prior` the union-bound
/// cost of tuning `lambda` is added to the KL.
#[allow(clippy::too_many_arguments)]
pub fn catoni_graph(
    g: &mut Graph,
    model: &StochasticMLP,
    leaves: &[Vec<Var>],
    batch: &Dataset,
    beta_free: Var,
    prior: &ModelPrior,
    lambda: Var,
    penalize_prior: bool,
    m: usize,
    delta: f64,
    estimator: KlEstimator,
    stream: &mut RandomStream,
) -> Result<ObjectiveParts> {
    let Targets::Classes { n_classes, .. } = &batch.targets else {
        return Err(Error::Unsupported("Catoni objective needs class labels".into()));
    };
    let x = g.constant(batch.x.clone());
    let (output, draws) = model.forward(g, leaves, x, true, stream)?;
    let nll = nll_graph(g, output, batch, 1.0)?;
    let data_term = g.scale(nll, 1.0 / (*n_classes as f64).ln())?;
    let kl = model_kl_graph(g, model, leaves, &draws, prior, lambda, estimator)?;
    let mut budget = g.offset(kl, (1.0 / delta).ln())?;
    if penalize_prior {
        let pen = prior_penalty_graph(g, lambda)?;
        budget = g.add(budget, pen)?;
    }
    let sp = g.softplus(beta_free)?;
    let beta = g.offset(sp, 0.5)?;
    let scaled = g.mul(beta, budget)?;
    let scaled = g.scale(scaled, 1.0 / m as f64)?;
    let num = g.add(data_term, scaled)?;
    // (1 - 1/(2 beta))^-1 = 2 beta / (2 beta - 1)
    let two_beta = g.scale(beta, 2.0)?;
    let den = g.offset(two_beta, -1.0)?;
    let factor = g.div(two_beta, den)?;
    let loss = g.mul(num, factor)?;
    Ok(ObjectiveParts {
        loss,
        data_term,
        kl,
        output,
    })
}

/// Value of the negative ELBO for one draw from `stream`.
pub fn elbo_objective(
    model: &StochasticMLP,
    batch: &Dataset,
    beta: f64,
    prior: &ModelPrior,
    m: usize,
    stream: &mut RandomStream,
) -> Result<f64> {
    let mut g = Graph::new();
    let leaves = model.leaves(&mut g, false);
    let lam = g.scalar(prior.variance);
    let p = elbo_graph(
        &mut g,
        model,
        &leaves,
        batch,
        beta,
        prior,
        lam,
        m,
        KlEstimator::Sample,
        1.0,
        stream,
    )?;
    Ok(g.item(p.loss))
}

/// Value of the Catoni objective for one draw from `stream`.
pub fn catoni_objective(
    model: &StochasticMLP,
    batch: &Dataset,
    beta_free: f64,
    prior: &ModelPrior,
    m: usize,
    delta: f64,
    stream: &mut RandomStream,
) -> Result<f64> {
    let mut g = Graph::new();
    let leaves = model.leaves(&mut g, false);
    let lam = g.scalar(prior.variance);
    let bf = g.scalar(beta_free);
    let p = catoni_graph(
        &mut g,
        model,
        &leaves,
        batch,
        bf,
        prior,
        lam,
        false,
        m,
        delta,
        KlEstimator::Analytic,
        stream,
    )?;
    Ok(g.item(p.loss))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_iterations: usize,
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            start: beta,
            end: beta,
            anneal_iterations: 0,
        }
    }

    /// Linear warm-up `start -> end` over `anneal_iterations` steps.
    pub fn at(&self, step: usize) -> f64 {
        if self.anneal_iterations == 0 {
            return self.end;
        }
        let t = (step as f64 / self.anneal_iterations as f64).min(1.0);
        self.start + (self.end - self.start) * t
    }
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    Elbo,
    Catoni {
        delta: f64,
        beta_init: f64,
        learn_prior_variance: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta_schedule: BetaSchedule,
    pub polyak: f64,
    pub samples_per_step: usize,
    pub objective: Objective,
    pub kl_estimator: KlEstimator,
    pub noise_variance: f64,
    pub cosine_lr: bool,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 64,
            beta_schedule: BetaSchedule::default(),
            polyak: 0.0,
            samples_per_step: 1,
            objective: Objective::Elbo,
            kl_estimator: KlEstimator::Analytic,
            noise_variance: 1.0,
            cosine_lr: false,
            pretrain_epochs: 0,
            pretrain_learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples_per_step == 0 {
            return Err(invalid("batch size and samples per step must be positive"));
        }
        if !(0.0..1.0).contains(&self.polyak) {
            return Err(invalid(format!("polyak coefficient {} outside [0, 1)", self.polyak)));
        }
        if self.beta_schedule.start < 0.0 || self.beta_schedule.end < 0.0 {
            return Err(invalid("beta schedule must stay non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub risk: f64,
    pub kl: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "epoch,objective,risk,kl,beta";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.objective, r.risk, r.kl, r.beta);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: StochasticMLP,
    pub polyak: StochasticMLP,
    pub trace: TrainTrace,
    /// Final prior variance (changes only when it is learned).
    pub prior_variance: f64,
    /// Final Catoni `beta`, when that objective was used.
    pub catoni_beta: Option<f64>,
}

fn cosine_factor(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.01 + 0.99 * 0.5 * (1.0 + (PI * t).cos())
}

fn batch_risk(g: &Graph, output: Var, batch: &Dataset) -> f64 {
    match &batch.targets {
        Targets::Classes { labels, .. } => classification_error(g.value(output), labels),
        Targets::Regression { values, mask } => {
            let out = g.value(output);
            let mut se = 0.0;
            for ((o, y), k) in out.data().iter().zip(values.data()).zip(mask.data()) {
                se += k * (o - y) * (o - y);
            }
            se / mask.sum().max(1.0)
        }
    }
}

fn diverged(step: usize, epoch: usize, value: f64) -> Error {
    Error::Diverged { step, epoch, value }
}

/// Trains the location network only (zero noise, likelihood only).
fn pretrain(model: &mut StochasticMLP, data: &Dataset, config: &TrainConfig, stream: &mut RandomStream) -> Result<()> {
    let mut adam = Adam::new(config.pretrain_learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.pretrain_epochs {
        stream.shuffle(&mut order);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.subset(chunk);
            let mut g = Graph::new();
            let leaves = model.leaves(&mut g, true);
            let x = g.constant(batch.x.clone());
            let (out, _) = model.forward(&mut g, &leaves, x, false, stream)?;
            let loss = nll_graph(&mut g, out, &batch, config.noise_variance)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(diverged(step, epoch, value));
            }
            let grads = g.backward(loss)?;
            let flat: Vec<Tensor> = leaves.iter().flatten().map(|&v| grads.get(v)).collect();
            adam.update(&mut model.params_mut(), &flat);
        }
    }
    Ok(())
}

/// Mini-batch Adam on the configured objective with one weight draw per
/// mini-batch (averaged over `samples_per_step` draws).
pub fn train(model: StochasticMLP, prior: &ModelPrior, data: &Dataset, config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut model = model;
    let root = RandomStream::new(config.seed, 0);
    let mut shuffle_stream = root.child(1);
    let mut noise_stream = root.child(2);
    if config.pretrain_epochs > 0 {
        pretrain(&mut model, data, config, &mut root.child(3))?;
    }

    let m = data.len();
    let (mut beta_free, mut lambda_free, learn_lambda, delta) = match config.objective {
        Objective::Elbo => (0.0, 0.0, false, 0.0),
        Objective::Catoni {
            delta,
            beta_init,
            learn_prior_variance,
        } => {
            if !(beta_init > 0.5) {
                return Err(invalid("Catoni beta must exceed 1/2"));
            }
            if learn_prior_variance && !(prior.variance < PRIOR_GRID_C) {
                return Err(invalid(format!(
                    "a learned prior variance must start below {PRIOR_GRID_C}"
                )));
            }
            let r = prior.variance / PRIOR_GRID_C;
            (
                softplus_inv(beta_init - 0.5),
                (r / (1.0 - r)).ln(),
                learn_prior_variance,
                delta,
            )
        }
    };
    let lambda_of = |free: f64| {
        if learn_lambda {
            PRIOR_GRID_C / (1.0 + (-free).exp())
        } else {
            prior.variance
        }
    };

    let mut polyak = model.clone();
    let mut adam = Adam::new(config.learning_rate);
    let mut aux_adam = Adam::new(config.learning_rate);
    let steps_per_epoch = m.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..m).collect();
    let mut trace = TrainTrace::default();
    let mut step = 0;
    let mut current_beta = config.beta_schedule.at(0);

    for epoch in 0..config.epochs {
        shuffle_stream.shuffle(&mut order);
        let (mut obj_sum, mut risk_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk);
            let mut g = Graph::lenient();
            let leaves = model.leaves(&mut g, true);
            let lam = if learn_lambda {
                let lf = g.param(Tensor::scalar(lambda_free));
                let s = g.sigmoid(lf)?;
                (g.scale(s, PRIOR_GRID_C)?, Some(lf))
            } else {
                (g.scalar(prior.variance), None)
            };
            let bf = g.param(Tensor::scalar(beta_free));
            let mut losses = Vec::with_capacity(config.samples_per_step);
            let (mut risk, mut kl_val) = (0.0, 0.0);
            for _ in 0..config.samples_per_step {
                let parts = match config.objective {
                    Objective::Elbo => {
                        current_beta = config.beta_schedule.at(step);
                        elbo_graph(
                            &mut g,
                            &model,
                            &leaves,
                            &batch,
                            current_beta,
                            prior,
                            lam.0,
                            m,
                            config.kl_estimator,
                            config.noise_variance,
                            &mut noise_stream,
                        )?
                    }
                    Objective::Catoni { .. } => catoni_graph(
                        &mut g,
                        &model,
                        &leaves,
                        &batch,
                        bf,
                        prior,
                        lam.0,
                        learn_lambda,
                        m,
                        delta,
                        config.kl_estimator,
                        &mut noise_stream,
                    )?,
                };
                risk += batch_risk(&g, parts.output, &batch);
                kl_val += g.item(parts.kl);
                losses.push(parts.loss);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = g.add(loss, l)?;
            }
            let loss = g.scale(loss, 1.0 / config.samples_per_step as f64)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(diverged(step, epoch, value));
            }
            let grads = g.backward(loss)?;
            let flat: Vec<Tensor> = leaves.iter().flatten().map(|&v| grads.get(v)).collect();
            if flat.iter().any(|t| !t.is_finite()) {
                return Err(diverged(step, epoch, value));
            }
            let lr_scale = if config.cosine_lr {
                cosine_factor(step, total_steps)
            } else {
                1.0
            };
            adam.lr = config.learning_rate * lr_scale;
            adam.update(&mut model.params_mut(), &flat);
            if let Objective::Catoni { .. } = config.objective {
                let mut aux = vec![Tensor::scalar(beta_free), Tensor::scalar(lambda_free)];
                let mut aux_grads = vec![grads.get(bf), Tensor::scalar(0.0)];
                if let Some(lf) = lam.1 {
                    aux_grads[1] = grads.get(lf);
                }
                aux_adam.lr = adam.lr;
                aux_adam.update(&mut aux.iter_mut().collect::<Vec<_>>(), &aux_grads);
                beta_free = aux[0].item();
                lambda_free = aux[1].item();
                current_beta = 0.5 + softplus(beta_free);
            }
            let c = config.polyak;
            for (avg, cur) in polyak.params_mut().into_iter().zip(model.params()) {
                for (a, v) in avg.data_mut().iter_mut().zip(cur.data()) {
                    *a = c * *a + (1.0 - c) * v;
                }
            }
            let k = config.samples_per_step as f64;
            obj_sum += value;
            risk_sum += risk / k;
            kl_sum += kl_val / k;
            batches += 1.0;
            step += 1;
        }
        trace.records.push(EpochRecord {
            epoch,
            objective: obj_sum / batches,
            risk: risk_sum / batches,
            kl: kl_sum / batches,
            beta: current_beta,
        });
    }
    let catoni_beta = match config.objective {
        Objective::Catoni { .. } => Some(0.5 + softplus(beta_free)),
        Objective::Elbo => None,
    };
    Ok(TrainResult {
        model,
        polyak,
        trace,
        prior_variance: lambda_of(lambda_free),
        catoni_beta,
    })
}

/// Certified McAllester bound on the zero-one risk of `model` against
/// `prior`, estimating the empirical risk from posterior draws on `data`.
pub fn certify_model(
    model: &StochasticMLP,
    prior: &ModelPrior,
    data: &Dataset,
    config: &CertifyConfig,
    stream: &mut RandomStream,
) -> Result<BoundReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Unsupported("certification needs class labels".into()))?;
    let priors = prior.blocks();
    let blocks: Vec<_> = model.blocks().into_iter().zip(priors.iter()).collect();
    certify(
        &blocks,
        data.len(),
        prior.variance,
        config,
        |st| model.sample_network(st)?.error_rate(&data.x, labels),
        stream,
    )
}
