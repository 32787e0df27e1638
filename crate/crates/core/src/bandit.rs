//! Contextual bandits with Thompson sampling over stochastic-network
//! posteriors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::flow::Family;
use crate::snn::{elbo_graph, Activation, Dataset, KlEstimator, ModelPrior, StochasticMLP};
use crate::tensor::{Adam, Graph, RandomStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// `r_a = theta_a . x + noise` with Gaussian contexts.
    LinearGaussian,
    /// Binary contexts; action 0 is safe (reward 0), action 1 pays +5 when
    /// the hidden label is edible and +5 or -35 with equal odds otherwise.
    Mushroom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub context_dim: usize,
    pub actions: usize,
    pub noise_std: f64,
}

impl EnvConfig {
    pub fn linear_gaussian(context_dim: usize, actions: usize, noise_std: f64) -> Self {
        Self {
            kind: EnvKind::LinearGaussian,
            context_dim,
            actions,
            noise_std,
        }
    }

    pub fn mushroom(context_dim: usize) -> Self {
        Self {
            kind: EnvKind::Mushroom,
            context_dim,
            actions: 2,
            noise_std: 0.0,
        }
    }
}

/// One round: the context, every action's realized reward, and the hidden
/// expected rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub context: Vec<f64>,
    pub rewards: Vec<f64>,
    pub expected: Vec<f64>,
}

impl Round {
    pub fn optimal(&self) -> f64 {
        self.expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Reward parameters of an environment, drawn once per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvModel {
    pub config: EnvConfig,
    /// `(actions, context_dim)` for linear-gaussian; the edibility direction
    /// (one row) for mushroom.
    pub weights: Tensor,
}

impl EnvModel {
    pub fn expected(&self, context: &[f64]) -> Vec<f64> {
        let d = self.config.context_dim;
        let dot = |row: usize| -> f64 { (0..d).map(|j| self.weights.get(row, j) * context[j]).sum() };
        match self.config.kind {
            EnvKind::LinearGaussian => (0..self.config.actions).map(dot).collect(),
            EnvKind::Mushroom => {
                if self.edible(context) {
                    vec![0.0, 5.0]
                } else {
                    vec![0.0, -15.0]
                }
            }
        }
    }

    fn edible(&self, context: &[f64]) -> bool {
        let d = self.config.context_dim;
        (0..d).map(|j| self.weights.get(0, j) * (context[j] - 0.5)).sum::<f64>() > 0.0
    }
}

/// A seeded environment. Two environments built from the same config and
/// seed produce identical rounds.
#[derive(Clone, Debug)]
pub struct BanditEnv {
    pub model: EnvModel,
    stream: RandomStream,
}

impl BanditEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        if config.context_dim == 0 || config.actions < 2 {
            return Err(invalid("need a positive context dimension and at least two actions"));
        }
        if config.kind == EnvKind::Mushroom && config.actions != 2 {
            return Err(invalid("the mushroom environment has exactly two actions"));
        }
        let mut st = RandomStream::new(seed, 0);
        let rows = if config.kind == EnvKind::Mushroom {
            1
        } else {
            config.actions
        };
        let weights = Tensor::randn(&[rows, config.context_dim], &mut st);
        Ok(Self {
            model: EnvModel { config, weights },
            stream: RandomStream::new(seed, 1),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.model.config
    }

    pub fn next_round(&mut self) -> Round {
        let cfg = &self.model.config;
        let st = &mut self.stream;
        let context: Vec<f64> = match cfg.kind {
            EnvKind::LinearGaussian => (0..cfg.context_dim)
                .map(|_| st.standard_normal() / (cfg.context_dim as f64).sqrt())
                .collect(),
            EnvKind::Mushroom => (0..cfg.context_dim)
                .map(|_| if st.bernoulli(0.5) { 1.0 } else { 0.0 })
                .collect(),
        };
        let expected = self.model.expected(&context);
        let rewards = match cfg.kind {
            EnvKind::LinearGaussian => expected
                .iter()
                .map(|m| m + cfg.noise_std * st.standard_normal())
                .collect(),
            EnvKind::Mushroom => {
                let coin = st.bernoulli(0.5);
                let risky = if self.model.edible(&context) || coin {
                    5.0
                } else {
                    -35.0
                };
                vec![0.0, risky]
            }
        };
        Round {
            context,
            rewards,
            expected,
        }
    }
}

pub trait Agent {
    fn act(&mut self, context: &[f64], stream: &mut RandomStream) -> Result<usize>;
    fn observe(&mut self, context: &[f64], action: usize, reward: f64, stream: &mut RandomStream) -> Result<()>;
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub struct UniformAgent {
    pub actions: usize,
}

impl Agent for UniformAgent {
    fn act(&mut self, _: &[f64], stream: &mut RandomStream) -> Result<usize> {
        Ok(stream.below(self.actions))
    }

    fn observe(&mut self, _: &[f64], _: usize, _: f64, _: &mut RandomStream) -> Result<()> {
        Ok(())
    }
}

/// Acts greedily on the true expected rewards.
pub struct OracleAgent {
    pub model: EnvModel,
}

impl Agent for OracleAgent {
    fn act(&mut self, context: &[f64], _: &mut RandomStream) -> Result<usize> {
        Ok(argmax(&self.model.expected(context)))
    }

    fn observe(&mut self, _: &[f64], _: usize, _: f64, _: &mut RandomStream) -> Result<()> {
        Ok(())
    }
}

/// Exact Bayesian linear regression per action with known noise variance,
/// prior `N(0, I / prior_precision)`.
pub struct ConjugateLinearAgent {
    pub noise_var: f64,
    precision: Vec<DMatrix<f64>>,
    rhs: Vec<DVector<f64>>,
    plays: usize,
}

impl ConjugateLinearAgent {
    pub fn new(context_dim: usize, actions: usize, noise_var: f64, prior_precision: f64) -> Self {
        Self {
            noise_var,
            precision: vec![DMatrix::identity(context_dim, context_dim) * prior_precision; actions],
            rhs: vec![DVector::zeros(context_dim); actions],
            plays: 0,
        }
    }
}

impl Agent for ConjugateLinearAgent {
    fn act(&mut self, context: &[f64], stream: &mut RandomStream) -> Result<usize> {
        let k = self.precision.len();
        if self.plays < k {
            return Ok(self.plays);
        }
        let x = DVector::from_column_slice(context);
        let mut sampled = Vec::with_capacity(k);
        for a in 0..k {
            let chol = self.precision[a]
                .clone()
                .cholesky()
                .ok_or(Error::Singular("posterior precision"))?;
            let mean = chol.solve(&self.rhs[a]);
            // theta = mean + L^-T z has covariance (L L^T)^-1.
            let z = DVector::from_iterator(x.len(), (0..x.len()).map(|_| stream.standard_normal()));
            let noise = chol
                .l()
                .transpose()
                .solve_upper_triangular(&z)
                .ok_or(Error::Singular("posterior precision"))?;
            sampled.push((mean + noise).dot(&x));
        }
        Ok(argmax(&sampled))
    }

    fn observe(&mut self, context: &[f64], action: usize, reward: f64, _: &mut RandomStream) -> Result<()> {
        let x = DVector::from_column_slice(context);
        self.precision[action] += &x * x.transpose() / self.noise_var;
        self.rhs[action] += &x * (reward / self.noise_var);
        self.plays += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralAgentConfig {
    pub hidden: usize,
    pub sigma0: f64,
    pub prior_variance: f64,
    pub noise_variance: f64,
    pub retrain_period: usize,
    pub retrain_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Play each action once before the first posterior draw.
    pub warm_up: bool,
}

impl Default for NeuralAgentConfig {
    fn default() -> Self {
        Self {
            hidden: 50,
            sigma0: 0.05,
            prior_variance: 1.0,
            noise_variance: 1.0,
            retrain_period: 50,
            retrain_iterations: 50,
            batch_size: 128,
            learning_rate: 0.01,
            warm_up: true,
        }
    }
}

impl NeuralAgentConfig {
    /// Heavier retraining: 200 iterations on batches of 512.
    pub fn long_schedule() -> Self {
        Self {
            retrain_iterations: 200,
            batch_size: 512,
            ..Self::default()
        }
    }
}

/// Thompson sampling with a stochastic network mapping a context to one
/// predicted reward per action.
pub struct NeuralThompsonAgent {
    pub model: StochasticMLP,
    pub prior: ModelPrior,
    pub config: NeuralAgentConfig,
    contexts: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    k: usize,
}

impl NeuralThompsonAgent {
    pub fn new(
        family: Family,
        context_dim: usize,
        actions: usize,
        config: NeuralAgentConfig,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        let model = StochasticMLP::new(
            &[context_dim, config.hidden, actions],
            family,
            config.sigma0,
            Activation::Relu,
            stream,
        )?;
        let prior = ModelPrior::zero(&model, config.prior_variance)?;
        Ok(Self {
            model,
            prior,
            config,
            contexts: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            k: actions,
        })
    }

    pub fn buffer_len(&self) -> usize {
        self.actions.len()
    }

    fn buffer(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.model.input_dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut values = Tensor::zeros(&[idx.len(), self.k]);
        let mut mask = Tensor::zeros(&[idx.len(), self.k]);
        for (r, &i) in idx.iter().enumerate() {
            x.extend_from_slice(&self.contexts[i * d..(i + 1) * d]);
            values.set(r, self.actions[i], self.rewards[i]);
            mask.set(r, self.actions[i], 1.0);
        }
        Dataset::regression(Tensor::new(vec![idx.len(), d], x)?, values, mask)
    }

    fn retrain(&mut self, stream: &mut RandomStream) -> Result<()> {
        let n = self.buffer_len();
        let mut adam = Adam::new(self.config.learning_rate);
        for _ in 0..self.config.retrain_iterations {
            let idx: Vec<usize> = (0..self.config.batch_size.min(n)).map(|_| stream.below(n)).collect();
            let batch = self.buffer(&idx)?;
            let mut g = Graph::lenient();
            let leaves = self.model.leaves(&mut g, true);
            let lam = g.scalar(self.prior.variance);
            let parts = elbo_graph(
                &mut g,
                &self.model,
                &leaves,
                &batch,
                1.0,
                &self.prior,
                lam,
                n,
                KlEstimator::Analytic,
                self.config.noise_variance,
                stream,
            )?;
            let value = g.item(parts.loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: adam.steps() as usize,
                    epoch: n,
                    value,
                });
            }
            let grads = g.backward(parts.loss)?;
            let flat: Vec<Tensor> = leaves.iter().flatten().map(|&v| grads.get(v)).collect();
            adam.update(&mut self.model.params_mut(), &flat);
        }
        Ok(())
    }
}

/// One Thompson decision: a single posterior draw, then the greedy action.
pub fn thompson_step(model: &StochasticMLP, context: &[f64], stream: &mut RandomStream) -> Result<usize> {
    if context.len() != model.input_dim() {
        return Err(invalid(format!(
            "context has {} features, model expects {}",
            context.len(),
            model.input_dim()
        )));
    }
    let net = model.sample_network(stream)?;
    let out = net.logits(&Tensor::new(vec![1, context.len()], context.to_vec())?)?;
    Ok(argmax(out.data()))
}

impl Agent for NeuralThompsonAgent {
    fn act(&mut self, context: &[f64], stream: &mut RandomStream) -> Result<usize> {
        if self.config.warm_up && self.buffer_len() < self.k {
            return Ok(self.buffer_len());
        }
        thompson_step(&self.model, context, stream)
    }

    fn observe(&mut self, context: &[f64], action: usize, reward: f64, stream: &mut RandomStream) -> Result<()> {
        self.contexts.extend_from_slice(context);
        self.actions.push(action);
        self.rewards.push(reward);
        if self.buffer_len().is_multiple_of(self.config.retrain_period) {
            self.retrain(stream)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub t: usize,
    pub action: usize,
    pub reward: f64,
    pub instant_regret: f64,
    pub cumulative_regret: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub records: Vec<RegretRecord>,
}

impl RegretTrace {
    pub const CSV_HEADER: &'static str = "t,action,reward,inst_regret,cum_regret";

    pub fn total(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_regret)
    }

    /// Cumulative regret after the first `t` rounds.
    pub fn at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.records[t - 1].cumulative_regret
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:?},{:?},{:?}",
                r.t, r.action, r.reward, r.instant_regret, r.cumulative_regret
            );
        }
        s
    }
}

/// Runs `horizon` observe-act-record rounds.
pub fn run_episode(
    agent: &mut dyn Agent,
    env: &mut BanditEnv,
    horizon: usize,
    stream: &mut RandomStream,
) -> Result<RegretTrace> {
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let mut trace = RegretTrace::default();
    let mut cumulative = 0.0;
    for t in 1..=horizon {
        let round = env.next_round();
        let action = agent.act(&round.context, stream)?;
        let reward = round.rewards[action];
        agent.observe(&round.context, action, reward, stream)?;
        let instant = (round.optimal() - round.expected[action]).max(0.0);
        cumulative += instant;
        trace.records.push(RegretRecord {
            t,
            action,
            reward,
            instant_regret: instant,
            cumulative_regret: cumulative,
        });
    }
    Ok(trace)
}

/// `R_T(agent) / R_T(uniform)`.
pub fn normalized_regret(trace: &RegretTrace, uniform: &RegretTrace) -> Result<f64> {
    let u = uniform.total();
    if u <= 0.0 {
        return Err(invalid("uniform policy has zero regret; environment is degenerate"));
    }
    Ok(trace.total() / u)
}

/// Sample mean and its standard error (zero for a single value).
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

/// `agent,mean,std_error,runs` rows of normalized regret.
pub fn summary_csv(rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("agent,mean_normalized_regret,std_error,runs\n");
    for (name, vals) in rows {
        let (mean, se) = mean_and_std_error(vals);
        let _ = writeln!(s, "{name},{mean:?},{se:?},{}", vals.len());
    }
    s
}
