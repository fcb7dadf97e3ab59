//! Scenario runs: stream batches through a method and record metrics.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::stream::{Scenario, StreamSpec};
use crate::adapt::{adapt_step, measure, trainable_entries, AdaptConfig, LossReport, Mode};
use crate::bank::{DomainBank, DomainDescriptor, Observation, DEFAULT_ALPHA, TAU_CTTA};
use crate::error::{Error, Result};
use crate::model::{Trainability, VisionTransformer};
use crate::spectral::CodeHolder;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    EntminOnly,
    Imse,
    ImseRetrieval,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Source, Method::EntminOnly, Method::Imse, Method::ImseRetrieval];

    pub fn name(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::EntminOnly => "entmin_only",
            Self::Imse => "imse",
            Self::ImseRetrieval => "imse_retrieval",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Clean training images summarized into the source entry.
    pub source_images: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            tau: TAU_CTTA,
            alpha: DEFAULT_ALPHA,
            source_images: 512,
        }
    }
}

/// One row per processed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub domain: String,
    pub batch: usize,
    pub accuracy: f64,
    pub kept_samples: usize,
    pub entmin: f64,
    pub dm: f64,
    pub last_block_std: f64,
    pub bank_size: usize,
    pub shift_stored: Option<usize>,
    pub shift_retrieved: Option<usize>,
    pub wall_ms: f64,
}

pub struct RunOutput<T: Real> {
    pub records: Vec<MetricsRecord>,
    /// The model as it stands after the last batch.
    pub model: VisionTransformer<T>,
    pub bank: Option<DomainBank>,
    /// Trainable sigma entries during the run.
    pub trainable: usize,
}

/// Descriptor of clean images pushed through the frozen embedding.
pub fn source_descriptor<T: Real>(model: &VisionTransformer<T>, train: &Dataset, images: usize) -> Result<DomainDescriptor> {
    let n = images.min(train.len());
    let idx: Vec<usize> = (0..n).collect();
    DomainDescriptor::from_tokens(&model.embed(&train.batch::<T>(&idx))?)
}

fn method_config(method: Method, adapt: &AdaptConfig) -> AdaptConfig {
    let mut cfg = adapt.clone();
    match method {
        Method::EntminOnly => cfg.mode = Mode::EntminOnly,
        Method::Imse | Method::ImseRetrieval => cfg.mode = Mode::Imse,
        Method::Source => {}
    }
    cfg
}

/// Streams `stream` over `test` starting from the decomposed `source`.
///
/// Predictions come from each batch's forward before its update. Under
/// `tta` the source code (and a fresh optimizer and bank) is restored at
/// every segment boundary; other scenarios never see boundaries. With
/// retrieval the bank observes each batch before the adaptation step, and
/// a detected shift also clears the optimizer moments.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario<T: Real>(
    source: &VisionTransformer<T>,
    test: &Dataset,
    source_desc: &DomainDescriptor,
    stream: &StreamSpec,
    method: Method,
    adapt: &AdaptConfig,
    bank_cfg: &BankConfig,
) -> Result<RunOutput<T>> {
    if !source.is_decomposed() {
        return Err(Error::InvalidArgument("runs need a decomposed checkpoint".into()));
    }
    adapt.validate()?;
    if method == Method::ImseRetrieval && stream.scenario == Scenario::Tta {
        log::warn!("retrieval under tta: the bank is reset at every corruption boundary");
    }
    let cfg = method_config(method, adapt);
    let mut model = source.clone();
    model.set_trainability(Trainability::Spectral);
    model.set_masks(cfg.mask_strategy, cfg.mask_r)?;
    let source_code = model.extract_code();
    let trainable = trainable_entries(&model).len();
    let mut opt = cfg.new_optimizer(trainable);
    let new_bank = || DomainBank::new(source_desc.clone(), source_code.clone(), bank_cfg.alpha, bank_cfg.tau);
    let mut bank = if method == Method::ImseRetrieval { Some(new_bank()?) } else { None };
    let last_block = format!("blocks.{}.", model.config().depth - 1);

    let plans = stream.plan(test)?;
    let mut records = Vec::with_capacity(plans.len());
    let mut prev: Option<(usize, String)> = None;
    for (bi, plan) in plans.iter().enumerate() {
        let start = Instant::now();
        if stream.scenario == Scenario::Tta && prev.as_ref().is_some_and(|(s, _)| *s != plan.segment) {
            model.load_code(&source_code)?;
            opt.reset();
            if bank.is_some() {
                bank = Some(new_bank()?);
            }
        }
        let (images, labels) = plan.load::<T>(test);
        let mut shift = (None, None);
        if let Some(b) = bank.as_mut() {
            let desc = DomainDescriptor::from_tokens(&model.embed(&images)?)?;
            // the label names the domain that just ended; it is never used
            // for decisions
            let label = prev.as_ref().map(|(_, d)| d.as_str());
            if let Observation::Shift { stored, retrieved } = b.observe_labeled(&desc, &mut model, label)? {
                opt.reset();
                shift = (Some(stored), Some(retrieved));
            }
        }
        let report: LossReport = match method {
            Method::Source => measure(&model, &images, &cfg)?,
            _ => adapt_step(&mut model, &images, &cfg, &mut opt)?,
        };
        let correct = report.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
        records.push(MetricsRecord {
            scenario: stream.scenario.name().into(),
            method: method.name().into(),
            seed: stream.seed,
            domain: plan.domain.clone(),
            batch: bi,
            accuracy: correct as f64 / labels.len() as f64,
            kept_samples: report.kept_samples,
            entmin: report.entmin,
            dm: report.dm,
            last_block_std: report.mean_std_with_prefix(&last_block),
            bank_size: bank.as_ref().map_or(0, DomainBank::len),
            shift_stored: shift.0,
            shift_retrieved: shift.1,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        prev = Some((plan.segment, plan.domain.clone()));
    }
    Ok(RunOutput {
        records,
        model,
        bank,
        trainable,
    })
}
