use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adapt::{adapt_step, AdaptSettings, AdaptState, StepMetrics};
use super::config::ExperimentConfig;
use super::offline::{source_data, OfflineArtifacts};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::rng;
use crate::stream::{make_continual_stream, ContinualStream, LabeledBatch};

/// Per-domain summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub name: String,
    pub accuracy: f64,
    pub l_orth: f64,
    pub l_hsic: f64,
    pub l_ot: f64,
    pub l_total: f64,
    pub batches: usize,
}

/// Everything measured in one continual run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub domains: Vec<DomainResult>,
    pub steps: Vec<StepMetrics>,
    pub mean_shifted_accuracy: f64,
    pub source_accuracy_before: f64,
    pub source_accuracy_after: f64,
    /// `before − after` on the clean source back-test.
    pub source_drop: f64,
    pub events: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Checks that the stored hash matches the stored config and that every
    /// accuracy is a fraction.
    pub fn validate(&self) -> Result<()> {
        if self.config.hash()? != self.config_hash {
            return Err(Error::InvalidState(format!("run {}: config hash mismatch", self.run_id)));
        }
        let accs = self
            .domains
            .iter()
            .map(|d| d.accuracy)
            .chain([self.mean_shifted_accuracy, self.source_accuracy_before, self.source_accuracy_after]);
        for a in accs {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidState(format!("run {}: accuracy {a} outside [0, 1]", self.run_id)));
            }
        }
        Ok(())
    }
}

/// Accuracy over a list of labeled batches.
pub fn backtest_accuracy(model: &ToyModel, batches: &[LabeledBatch]) -> Result<f64> {
    let mut hits = 0.0;
    let mut total = 0usize;
    for b in batches {
        hits += model.accuracy(&b.features, &b.labels)? * b.len() as f64;
        total += b.len();
    }
    Ok(hits / total.max(1) as f64)
}

/// The stream a config describes.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<ContinualStream> {
    let (_, test) = source_data(cfg)?;
    make_continual_stream(&test, &cfg.domain_sequence(), &cfg.stream_options())
}

/// Streams every domain through [`adapt_step`], scores the online
/// predictions with the hidden labels, then back-tests on clean source data.
pub fn run_continual(cfg: &ExperimentConfig, artifacts: &OfflineArtifacts) -> Result<RunRecord> {
    let stream = build_stream(cfg)?;
    run_continual_on(cfg, artifacts, &stream)
}

/// [`run_continual`] on an explicit stream.
pub fn run_continual_on(cfg: &ExperimentConfig, artifacts: &OfflineArtifacts, stream: &ContinualStream) -> Result<RunRecord> {
    Ok(run_with_model(cfg, artifacts, stream)?.0)
}

/// [`run_continual_on`], also returning the adapted model.
pub fn run_with_model(
    cfg: &ExperimentConfig,
    artifacts: &OfflineArtifacts,
    stream: &ContinualStream,
) -> Result<(RunRecord, ToyModel)> {
    cfg.validate()?;
    let started = Instant::now();
    if artifacts.model.kind != cfg.ablation.use_adapter {
        return Err(Error::InvalidArgument(format!(
            "artifacts hold a {} model but the config asks for {}",
            artifacts.model.kind, cfg.ablation.use_adapter
        )));
    }
    let settings = AdaptSettings::from_config(cfg);
    let mut state = AdaptState::new(
        artifacts.model.clone(),
        artifacts.generator.as_ref(),
        &artifacts.centers,
        settings,
        rng::derive_seed(cfg.seed, "adapt"),
    )?;

    let mut steps = Vec::with_capacity(stream.len());
    for batch in &stream.batches {
        steps.push(adapt_step(batch, &mut state)?);
    }

    let mut domains = Vec::with_capacity(stream.domains.len());
    for (di, name) in stream.domains.iter().enumerate() {
        let mut hits = 0usize;
        let mut seen = 0usize;
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, m) in steps.iter().enumerate().filter(|(_, m)| m.domain_index == di) {
            let labels = stream.hidden.for_batch(b);
            hits += m.predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            for (s, v) in sums.iter_mut().zip([m.l_orth, m.l_hsic, m.l_ot, m.l_total]) {
                *s += v;
            }
            batches += 1;
        }
        let k = batches.max(1) as f64;
        domains.push(DomainResult {
            name: name.clone(),
            accuracy: hits as f64 / seen.max(1) as f64,
            l_orth: sums[0] / k,
            l_hsic: sums[1] / k,
            l_ot: sums[2] / k,
            l_total: sums[3] / k,
            batches,
        });
    }
    let mean_shifted_accuracy = domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len().max(1) as f64;
    let source_accuracy_before = backtest_accuracy(&artifacts.model, &stream.source_tail)?;
    let source_accuracy_after = backtest_accuracy(&state.model, &stream.source_tail)?;
    let label = cfg.variant_label();
    let record = RunRecord {
        run_id: format!("{label}-s{}", cfg.seed),
        label,
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        domains,
        steps,
        mean_shifted_accuracy,
        source_accuracy_before,
        source_accuracy_after,
        source_drop: source_accuracy_before - source_accuracy_after,
        events: state.events,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((record, state.model))
}

