//! TOML experiment configuration.
//!
//! Every section is optional and every missing key takes its default.
//!
//! ```toml
//! [model]
//! depth = 4
//! [adapt]
//! lambda_dm = 50.0
//! learning_rate = 3e-3
//! [bank]
//! tau = 0.05
//! [stream]
//! scenario = "ctta"
//! kinds = ["gaussian_noise", "contrast"]
//! severity = 5
//! [pretrain]
//! epochs = 8
//! [run]
//! method = "imse_retrieval"
//! seed = 1
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::corrupt::CorruptionKind;
use super::data::Dataset;
use super::pretrain::PretrainConfig;
use super::run::{run_scenario, source_descriptor, BankConfig, Method, RunOutput};
use super::stream::{Scenario, StreamSpec, CTTA_BATCHES, DEFAULT_BATCH_SIZE, GRADUAL_BATCHES};
use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::model::{ViTConfig, VisionTransformer};
use crate::tensor::Real;

/// Environment variable naming the float precision, `f32` or `f64`.
pub const PRECISION_ENV: &str = "IMSE_PRECISION";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

impl Precision {
    /// The environment's choice, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var(PRECISION_ENV) {
            Ok(v) => v.trim().parse().map(Some),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub scenario: Scenario,
    /// Corruptions in stream order; repeats are allowed.
    pub kinds: Vec<CorruptionKind>,
    /// Ignored by `gradual`, which ramps through every severity.
    pub severity: u8,
    /// Batches per segment; the scenario default when absent.
    pub batches: Option<usize>,
    pub batch_size: usize,
    pub dirichlet_alpha: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Ctta,
            kinds: CorruptionKind::ALL.to_vec(),
            severity: 5,
            batches: None,
            batch_size: DEFAULT_BATCH_SIZE,
            dirichlet_alpha: 0.1,
        }
    }
}

impl StreamConfig {
    pub fn build(&self, seed: u64) -> Result<StreamSpec> {
        let (k, s, bs) = (&self.kinds, self.severity, self.batch_size);
        let batches = self.batches.unwrap_or(match self.scenario {
            Scenario::Gradual => GRADUAL_BATCHES,
            _ => CTTA_BATCHES,
        });
        match self.scenario {
            Scenario::Tta => StreamSpec::tta(k, s, batches, bs, seed),
            Scenario::Ctta => StreamSpec::ctta(k, s, batches, bs, seed),
            Scenario::Gradual => StreamSpec::gradual(k, batches, bs, seed),
            Scenario::Recurring => StreamSpec::recurring(k, s, batches, bs, seed),
            Scenario::Dirichlet => StreamSpec::dirichlet(k, s, batches, bs, self.dirichlet_alpha, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Seed of the test stream.
    pub seed: u64,
    /// Seed of the synthetic source task.
    pub data_seed: u64,
    pub precision: Precision,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Imse,
            seed: 0,
            data_seed: 0,
            precision: Precision::F64,
            checkpoint: None,
            out: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    pub adapt: AdaptConfig,
    pub bank: BankConfig,
    pub stream: StreamConfig,
    pub pretrain: PretrainConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies the precision environment variable on top of the file.
    pub fn with_env(mut self) -> Result<Self> {
        if let Some(p) = Precision::from_env()? {
            self.run.precision = p;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapt.validate()?;
        self.pretrain.validate()?;
        if !(self.bank.tau > 0.0) || !(0.0..=1.0).contains(&self.bank.alpha) {
            return Err(Error::InvalidConfig {
                field: "bank",
                reason: "tau must be positive and alpha must lie in [0, 1]".into(),
            });
        }
        self.stream.build(self.run.seed).map(|_| ())
    }
}

/// Runs the configured stream and method from a decomposed checkpoint.
pub fn execute<T: Real>(
    cfg: &ExperimentConfig,
    model: &VisionTransformer<T>,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput<T>> {
    let stream = cfg.stream.build(cfg.run.seed)?;
    let desc = source_descriptor(model, train, cfg.bank.source_images)?;
    run_scenario(model, test, &desc, &stream, cfg.run.method, &cfg.adapt, &cfg.bank)
}
