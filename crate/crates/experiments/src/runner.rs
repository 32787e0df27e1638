//! Runs a configured experiment and writes its artifacts.

use std::path::{Path, PathBuf};

use kronflow::bandit::{
    mean_and_std_error, normalized_regret, run_episode, Agent, BanditEnv, ConjugateLinearAgent, EnvConfig,
    NeuralThompsonAgent, RegretTrace, UniformAgent,
};
use kronflow::flow::Checkpoint;
use kronflow::pacbayes::BoundReport;
use kronflow::snn::{certify_model, train, Dataset, ModelPrior, StochasticMLP, TrainResult};
use kronflow::{Family, RandomStream};

use crate::config::{DataConfig, ExperimentConfig, ExperimentKind, PriorCenter};
use crate::data::{blobs, load_idx, moons, DataSource, Split};
use crate::error::{io_err, Error, Result};
use crate::output::{num, write_text, LineChart, Provenance, Series, Table};
use crate::simulate::{simulate_kl, SimFamily, SimulationResults};

/// Runs `config` and writes every artifact into `out`, returning the paths
/// written.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut ctx = Context {
        config,
        hash: config.hash()?,
        out,
        written: Vec::new(),
    };
    match config.experiment.kind {
        ExperimentKind::SimulateKl => run_simulate_kl(&mut ctx)?,
        ExperimentKind::TrainSnn => run_train_snn(&mut ctx)?,
        ExperimentKind::Certify => run_certify(&mut ctx)?,
        ExperimentKind::Bandit => run_bandit(&mut ctx)?,
    }
    Ok(ctx.written)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    hash: String,
    out: &'a Path,
    written: Vec<PathBuf>,
}

impl Context<'_> {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        write_text(&path, text)?;
        self.written.push(path);
        Ok(())
    }

    fn write_table(&mut self, name: &str, table: &Table) -> Result<()> {
        let text = table.to_csv(&self.hash)?;
        self.write(name, &text)
    }

    fn write_chart(&mut self, name: &str, chart: &LineChart) -> Result<()> {
        if chart.is_empty() {
            return Ok(());
        }
        let prov = Provenance {
            config_hash: self.hash.clone(),
            seeds: self.config.experiment.seeds.clone(),
        };
        self.write(name, &chart.to_svg(&prov))
    }
}

fn shape_tag(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn simulate_tables(results: &[(u64, SimulationResults)]) -> (Table, Table) {
    let mut trials = Table::new(&["shape", "d", "family", "trial", "final_kl"]);
    let mut summary = Table::new(&[
        "shape",
        "d",
        "family",
        "trials",
        "mean_kl",
        "std_kl",
        "band_low",
        "band_high",
    ]);
    for (seed, res) in results {
        for r in &res.rows {
            trials.push(
                *seed,
                vec![
                    shape_tag(&r.shape),
                    r.dim.to_string(),
                    r.family.tag().into(),
                    r.trial.to_string(),
                    num(r.kl),
                ],
            );
        }
        for s in res.summary() {
            let (lo, hi) = s.band();
            summary.push(
                *seed,
                vec![
                    shape_tag(&s.shape),
                    s.dim.to_string(),
                    s.family.tag().into(),
                    s.trials.to_string(),
                    num(s.mean),
                    num(s.std_dev),
                    num(lo),
                    num(hi),
                ],
            );
        }
    }
    (trials, summary)
}

fn run_simulate_kl(ctx: &mut Context) -> Result<()> {
    let cfg = ctx.config;
    let families = cfg
        .experiment
        .families
        .iter()
        .map(|&f| SimFamily::try_from(f))
        .collect::<Result<Vec<_>>>()?;
    let mut all = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let res = simulate_kl(&cfg.simulate_kl, &families, &RandomStream::new(seed, 0))?;
        all.push((seed, res));
    }
    let (trials, summary) = simulate_tables(&all);
    let mut text = trials.to_csv(&ctx.hash)?;
    if !summary.is_empty() {
        text.push('\n');
        text.push_str(&summary.to_csv(&ctx.hash)?);
    }
    ctx.write("simulate_kl.csv", &text)?;

    let mut chart = LineChart {
        title: "Final KL to a random Gaussian target".into(),
        x_label: "weight shape (sorted by dimension)".into(),
        y_label: "KL(q || p)".into(),
        log_y: true,
        ..Default::default()
    };
    for (seed, res) in &all {
        let summary = res.summary();
        let mut shapes: Vec<(usize, Vec<usize>)> = Vec::new();
        for s in &summary {
            if !shapes.iter().any(|(_, sh)| *sh == s.shape) {
                shapes.push((s.dim, s.shape.clone()));
            }
        }
        if chart.x_ticks.is_empty() {
            chart.x_ticks = shapes
                .iter()
                .enumerate()
                .map(|(i, (d, sh))| (i as f64, format!("{} ({d})", shape_tag(sh))))
                .collect();
        }
        for &family in &families {
            let mut series = Series {
                name: if all.len() > 1 {
                    format!("{} seed {seed}", family.tag())
                } else {
                    family.tag().into()
                },
                ..Default::default()
            };
            for (i, (_, sh)) in shapes.iter().enumerate() {
                if let Some(s) = summary.iter().find(|s| s.shape == *sh && s.family == family) {
                    let (lo, hi) = s.band();
                    series.points.push((i as f64, s.mean));
                    series.band.push((i as f64, lo, hi));
                }
            }
            chart.series.push(series);
        }
    }
    ctx.write_chart("simulate_kl.svg", &chart)
}

pub fn load_data(data: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut st = RandomStream::new(seed, 1);
    let handle = match data.source {
        DataSource::Blobs => blobs(data.train + data.test, data.classes, data.noise, &mut st)?,
        DataSource::Moons => moons(data.train + data.test, data.noise, &mut st)?,
        DataSource::Idx => {
            let need = |p: &Option<PathBuf>, what: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("data.{what} is required for idx data")))
            };
            let train = load_idx(
                &need(&data.images, "images")?,
                &need(&data.labels, "labels")?,
                data.subset,
            )?;
            if let (Some(ti), Some(tl)) = (&data.test_images, &data.test_labels) {
                let test = load_idx(ti, tl, data.subset)?;
                return Ok((train.split(Split::Train)?, test.split(Split::Train)?));
            }
            let n = train.len();
            return Ok((
                train
                    .clone()
                    .with_test_tail(data.test.min(n / 2))?
                    .split(Split::Train)?,
                train.with_test_tail(data.test.min(n / 2))?.split(Split::Test)?,
            ));
        }
    };
    let handle = handle.with_test_tail(data.test)?;
    Ok((handle.split(Split::Train)?, handle.split(Split::Test)?))
}

fn classes(data: &Dataset) -> Result<usize> {
    match &data.targets {
        kronflow::snn::Targets::Classes { n_classes, .. } => Ok(*n_classes),
        _ => Err(Error::Invalid("expected a classification dataset".into())),
    }
}

/// Average zero-one error of `draws` posterior networks.
pub fn gibbs_error(model: &StochasticMLP, data: &Dataset, draws: usize, stream: &mut RandomStream) -> Result<f64> {
    let labels = data.labels().ok_or_else(|| Error::Invalid("unlabelled data".into()))?;
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        total += model.sample_network(stream)?.error_rate(&data.x, labels)?;
    }
    Ok(total / draws.max(1) as f64)
}

pub struct TrainedRun {
    pub result: TrainResult,
    /// The prior at the end of training (variance may have been learned).
    pub prior: ModelPrior,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn train_run(config: &ExperimentConfig, family: Family, seed: u64) -> Result<TrainedRun> {
    let snn = &config.snn;
    let (train_set, test_set) = load_data(&config.data, seed)?;
    let mut sizes = vec![train_set.x.shape()[1]];
    sizes.extend(&snn.hidden);
    sizes.push(classes(&train_set)?);
    let mut st = RandomStream::new(seed, 2);
    let model = StochasticMLP::new(&sizes, family, snn.sigma0, snn.activation, &mut st)?;
    let prior = match snn.prior_center {
        PriorCenter::Init => ModelPrior::at_locations(&model, snn.prior_variance)?,
        PriorCenter::Zero => ModelPrior::zero(&model, snn.prior_variance)?,
    };
    let mut tc = snn.train.clone();
    tc.seed = seed;
    let result = train(model, &prior, &train_set, &tc)?;
    let prior = ModelPrior::new(prior.centers.clone(), result.prior_variance)?;
    Ok(TrainedRun {
        result,
        prior,
        train: train_set,
        test: test_set,
    })
}

fn checkpoint(model: &StochasticMLP) -> Checkpoint {
    let mut blocks = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        blocks.push((format!("layer{i}.weight"), l.weight.clone()));
        blocks.push((format!("layer{i}.bias"), l.bias.clone()));
    }
    Checkpoint::new(blocks)
}

fn run_train_snn(ctx: &mut Context) -> Result<()> {
    let cfg = ctx.config;
    let mut traces = Table::new(&["family", "epoch", "objective", "risk", "kl", "beta"]);
    let mut summary = Table::new(&[
        "family",
        "train_error",
        "test_error",
        "final_kl",
        "prior_variance",
        "catoni_beta",
    ]);
    for &seed in &cfg.experiment.seeds {
        for &family in &cfg.experiment.families {
            let run = train_run(cfg, family, seed)?;
            for r in &run.result.trace.records {
                traces.push(
                    seed,
                    vec![
                        family.tag().into(),
                        r.epoch.to_string(),
                        num(r.objective),
                        num(r.risk),
                        num(r.kl),
                        num(r.beta),
                    ],
                );
            }
            let mut st = RandomStream::new(seed, 3);
            let draws = cfg.snn.eval_draws;
            let train_err = gibbs_error(&run.result.model, &run.train, draws, &mut st)?;
            let test_err = gibbs_error(&run.result.model, &run.test, draws, &mut st)?;
            let kl = run.result.trace.records.last().map_or(f64::NAN, |r| r.kl);
            summary.push(
                seed,
                vec![
                    family.tag().into(),
                    num(train_err),
                    num(test_err),
                    num(kl),
                    num(run.result.prior_variance),
                    run.result.catoni_beta.map(num).unwrap_or_default(),
                ],
            );
            let ck = checkpoint(&run.result.model).to_json()?;
            ctx.write(&format!("model_{}_seed{seed}.json", family.tag()), &ck)?;
        }
    }
    ctx.write_table("train_snn_trace.csv", &traces)?;
    ctx.write_table("train_snn.csv", &summary)
}

pub fn certify_run(config: &ExperimentConfig, family: Family, seed: u64) -> Result<(BoundReport, f64)> {
    let run = train_run(config, family, seed)?;
    let report = certify_model(
        &run.result.model,
        &run.prior,
        &run.train,
        &config.certify,
        &mut RandomStream::new(seed, 4),
    )?;
    let held_out = gibbs_error(
        &run.result.model,
        &run.test,
        config.snn.eval_draws,
        &mut RandomStream::new(seed, 3),
    )?;
    Ok((report, held_out))
}

fn run_certify(ctx: &mut Context) -> Result<()> {
    let cfg = ctx.config;
    let mut header = vec!["family"];
    header.extend(BoundReport::CSV_HEADER.split(','));
    header.push("held_out_error");
    let mut table = Table::new(&header);
    for &seed in &cfg.experiment.seeds {
        for &family in &cfg.experiment.families {
            let (report, held_out) = certify_run(cfg, family, seed)?;
            let mut row = vec![family.tag().to_string()];
            row.extend(report.csv_row().split(',').map(String::from));
            row.push(num(held_out));
            table.push(seed, row);
            ctx.write(
                &format!("bound_{}_seed{seed}.txt", family.tag()),
                &report.to_key_value(),
            )?;
        }
    }
    ctx.write_table("certify.csv", &table)
}

fn env_tag(i: usize, env: &EnvConfig) -> String {
    let kind = match env.kind {
        kronflow::bandit::EnvKind::LinearGaussian => "linear-gaussian",
        kronflow::bandit::EnvKind::Mushroom => "mushroom",
    };
    format!("{i}-{kind}")
}

/// Every agent's regret trace on one environment and seed, uniform first.
pub fn bandit_traces(config: &ExperimentConfig, env: &EnvConfig, seed: u64) -> Result<Vec<(String, RegretTrace)>> {
    let b = &config.bandit;
    let episode = |agent: &mut dyn Agent| -> Result<RegretTrace> {
        let mut e = BanditEnv::new(env.clone(), seed)?;
        Ok(run_episode(agent, &mut e, b.horizon, &mut RandomStream::new(seed, 99))?)
    };
    let mut out = vec![(
        "uniform".to_string(),
        episode(&mut UniformAgent { actions: env.actions })?,
    )];
    let mut conj = ConjugateLinearAgent::new(
        env.context_dim,
        env.actions,
        b.conjugate_noise_variance,
        b.conjugate_prior_precision,
    );
    out.push(("conjugate".into(), episode(&mut conj)?));
    for (i, &family) in config.experiment.families.iter().enumerate() {
        let mut st = RandomStream::new(seed, 5).child(i as u64);
        let mut agent = NeuralThompsonAgent::new(family, env.context_dim, env.actions, b.agent.clone(), &mut st)?;
        out.push((family.tag().into(), episode(&mut agent)?));
    }
    Ok(out)
}

fn run_bandit(ctx: &mut Context) -> Result<()> {
    let cfg = ctx.config;
    let mut traces = Table::new(&["env", "agent", "t", "action", "reward", "inst_regret", "cum_regret"]);
    let mut summary = Table::new(&["env", "agent", "mean_normalized_regret", "std_error", "runs"]);
    for (ei, env) in cfg.bandit.envs.iter().enumerate() {
        let tag = env_tag(ei, env);
        let mut normalized: Vec<(String, Vec<f64>)> = Vec::new();
        let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
        for &seed in &cfg.experiment.seeds {
            let runs = bandit_traces(cfg, env, seed)?;
            let uniform = runs[0].1.clone();
            for (name, trace) in &runs {
                for r in &trace.records {
                    traces.push(
                        seed,
                        vec![
                            tag.clone(),
                            name.clone(),
                            r.t.to_string(),
                            r.action.to_string(),
                            num(r.reward),
                            num(r.instant_regret),
                            num(r.cumulative_regret),
                        ],
                    );
                }
                let nr = normalized_regret(trace, &uniform)?;
                match normalized.iter_mut().find(|(n, _)| n == name) {
                    Some((_, v)) => v.push(nr),
                    None => normalized.push((name.clone(), vec![nr])),
                }
                let cum: Vec<f64> = trace.records.iter().map(|r| r.cumulative_regret).collect();
                match curves.iter_mut().find(|(n, _)| n == name) {
                    Some((_, c)) => c.iter_mut().zip(&cum).for_each(|(a, b)| *a += b),
                    None => curves.push((name.clone(), cum)),
                }
            }
        }
        let first_seed = cfg.experiment.seeds.first().copied().unwrap_or(0);
        for (name, vals) in &normalized {
            let (mean, se) = mean_and_std_error(vals);
            summary.push(
                first_seed,
                vec![tag.clone(), name.clone(), num(mean), num(se), vals.len().to_string()],
            );
        }
        let n = cfg.experiment.seeds.len().max(1) as f64;
        let chart = LineChart {
            title: format!("Cumulative regret, environment {tag}"),
            x_label: "t".into(),
            y_label: "mean cumulative regret".into(),
            series: curves
                .into_iter()
                .map(|(name, c)| Series {
                    name,
                    points: c.iter().enumerate().map(|(t, v)| ((t + 1) as f64, v / n)).collect(),
                    band: Vec::new(),
                })
                .collect(),
            ..Default::default()
        };
        ctx.write_chart(&format!("bandit_regret_{tag}.svg"), &chart)?;
    }
    ctx.write_table("bandit_traces.csv", &traces)?;
    ctx.write_table("bandit_summary.csv", &summary)
}
