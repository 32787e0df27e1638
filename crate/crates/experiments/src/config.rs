//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use kronflow::bandit::{EnvConfig, NeuralAgentConfig};
use kronflow::pacbayes::CertifyConfig;
use kronflow::snn::{Activation, Objective, TrainConfig};
use kronflow::Family;

use crate::data::DataSource;
use crate::error::{io_err, Error, Result};
use crate::simulate::SimulateKlConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SimulateKl,
    TrainSnn,
    Certify,
    Bandit,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::SimulateKl => "simulate-kl",
            Self::TrainSnn => "train-snn",
            Self::Certify => "certify",
            Self::Bandit => "bandit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "all_families")]
    pub families: Vec<Family>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn all_families() -> Vec<Family> {
    vec![Family::Diag, Family::KDiag, Family::KLinear, Family::KNonlinear]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training examples for synthetic sources.
    pub train: usize,
    /// Held-out examples for synthetic sources.
    pub test: usize,
    pub classes: usize,
    pub noise: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub subset: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            train: 600,
            test: 600,
            classes: 3,
            noise: 0.8,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            subset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorCenter {
    Zero,
    /// The posterior means at initialization.
    Init,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnnConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma0: f64,
    pub prior_variance: f64,
    pub prior_center: PriorCenter,
    /// Posterior draws used to estimate held-out error.
    pub eval_draws: usize,
    pub train: TrainConfig,
}

impl Default for SnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100],
            activation: Activation::Relu,
            sigma0: 0.05,
            prior_variance: 0.01,
            prior_center: PriorCenter::Init,
            eval_draws: 100,
            train: TrainConfig {
                learning_rate: 0.01,
                epochs: 30,
                batch_size: 100,
                objective: Objective::Catoni {
                    delta: 0.035,
                    beta_init: 2.0,
                    learn_prior_variance: true,
                },
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    pub horizon: usize,
    pub envs: Vec<EnvConfig>,
    pub agent: NeuralAgentConfig,
    pub conjugate_noise_variance: f64,
    pub conjugate_prior_precision: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            horizon: 2000,
            envs: vec![EnvConfig::linear_gaussian(8, 4, 0.1), EnvConfig::mushroom(10)],
            agent: NeuralAgentConfig::default(),
            conjugate_noise_variance: 0.01,
            conjugate_prior_precision: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub simulate_kl: SimulateKlConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub snn: SnnConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub bandit: BanditConfig,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        let families = match kind {
            ExperimentKind::SimulateKl => vec![Family::Diag, Family::KDiag, Family::KLinear],
            ExperimentKind::Certify => vec![Family::Diag, Family::KLinear],
            _ => all_families(),
        };
        Self {
            experiment: ExperimentSection {
                kind,
                families,
                seeds: default_seeds(),
                out: default_out(),
            },
            simulate_kl: SimulateKlConfig::default(),
            data: DataConfig::default(),
            snn: SnnConfig::default(),
            certify: CertifyConfig::default(),
            bandit: BanditConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML, with the
    /// output directory blanked so relocating a run keeps its hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.experiment.out = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
