use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::adapter::adapter_loss;
use crate::align::{compute_class_centers, ClassCenters};
use crate::error::{Error, Result};
use crate::model::{source_loss, Scope, ToyModel};
use crate::numerics::{collect_grads, Adam, Tape};
use crate::paramgen::{Condition, ParameterGenerator, SnapshotCollector};
use crate::rng;
use crate::stream::{make_source, LabeledBatch};

pub const MODEL_FILE: &str = "model.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const CENTERS_FILE: &str = "centers.json";
pub const OFFLINE_REPORT_FILE: &str = "offline_report.json";

/// Summary of an offline training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub seed: u64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub source_test_accuracy: f64,
    pub snapshots: usize,
    /// Per-site mean per-entry reconstruction error of the generator's autoencoder.
    pub recon_error: Vec<f64>,
    /// Per-site mean denoising loss over the last tenth of training.
    pub final_denoise_loss: Vec<f64>,
}

/// Model, generator and source class centers produced offline.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineArtifacts {
    pub model: ToyModel,
    /// Absent when the model has no adapter sites.
    pub generator: Option<ParameterGenerator>,
    pub centers: ClassCenters,
    pub report: OfflineReport,
}

/// Source data for a seed.
pub fn source_data(cfg: &ExperimentConfig) -> Result<(LabeledBatch, LabeledBatch)> {
    make_source(
        rng::derive_seed(cfg.seed, "source"),
        cfg.offline.n_train,
        cfg.offline.n_test,
        cfg.model.classes,
        cfg.model.d_in,
    )
}

/// Trains the source model with its adapters, then the parameter generator
/// on snapshots of the adapters, then records the source class centers.
pub fn offline_train(cfg: &ExperimentConfig) -> Result<OfflineArtifacts> {
    cfg.validate()?;
    let (train, test) = source_data(cfg)?;
    let mut model = ToyModel::new(&cfg.dims(), cfg.ablation.use_adapter, rng::derive_seed(cfg.seed, "model"))?;
    let mut collector = SnapshotCollector::new(cfg.generator.snapshot_every, cfg.generator.warmup)?;
    let mut opt = Adam::new(cfg.offline.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "offline-shuffle");
    let mut loss_curve = Vec::with_capacity(cfg.offline.epochs);
    let mut step = 0;
    let l = &cfg.losses;
    for _ in 0..cfg.offline.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.offline.batch_size) {
            let x = train.features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let bound = model.bind(&tape, Scope::All);
            let out = bound.forward(tape.constant(x))?;
            let mut loss = source_loss(out.logits, &y)?;
            if l.lambda_a > 0.0 && idx.len() >= 2 {
                for f in &out.adapter_feats {
                    let la = adapter_loss(f, l.lambda_orth, l.lambda_hsic, l.kernel)?;
                    loss = loss.add(la.scale(l.lambda_a))?;
                }
            }
            epoch_loss += loss.item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut params = model.params_mut(Scope::All);
            collect_grads(&mut params, &bound.trainable, &grads)?;
            opt.step(&mut params)?;
            step += 1;
            if !model.sites().is_empty() {
                let cond = Condition::from_pooled(&out.pooled)?;
                collector.observe(step, &model.sites(), &cond);
            }
        }
        loss_curve.push(epoch_loss / batches.max(1) as f64);
    }
    let source_test_accuracy = model.accuracy(&test.features, &test.labels)?;

    let mut recon_error = Vec::new();
    let mut final_denoise_loss = Vec::new();
    let generator = if model.sites().is_empty() {
        None
    } else {
        let settings = cfg.generator.settings();
        let mut generator = ParameterGenerator::new(&settings)?;
        let report = generator.train(&collector, &settings, rng::derive_seed(cfg.seed, "generator"))?;
        recon_error = report.recon_error;
        final_denoise_loss = report
            .denoise_curves
            .iter()
            .map(|c| {
                let tail = &c[c.len() - (c.len() / 10).max(1)..];
                tail.iter().sum::<f64>() / tail.len() as f64
            })
            .collect();
        Some(generator)
    };

    let (_, feats) = model.predict(&train.features)?;
    let centers = compute_class_centers(&feats, &train.labels, cfg.model.classes)?;
    Ok(OfflineArtifacts {
        model,
        generator,
        centers,
        report: OfflineReport {
            seed: cfg.seed,
            loss_curve,
            source_test_accuracy,
            snapshots: collector.len(),
            recon_error,
            final_denoise_loss,
        },
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl OfflineArtifacts {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MODEL_FILE), &self.model)?;
        if let Some(g) = &self.generator {
            g.save(&dir.join(GENERATOR_FILE))?;
        }
        write_json(&dir.join(CENTERS_FILE), &self.centers)?;
        write_json(&dir.join(OFFLINE_REPORT_FILE), &self.report)
    }

    /// Loads artifacts written by [`OfflineArtifacts::save`]. A missing file
    /// is reported with its path; the generator is required whenever the
    /// model has adapter sites.
    pub fn load(dir: &Path) -> Result<Self> {
        let need = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::InvalidState(format!("missing checkpoint {}", p.display())))
            }
        };
        let model: ToyModel = read_json(&need(MODEL_FILE)?)?;
        let generator = if model.sites().is_empty() {
            None
        } else {
            Some(ParameterGenerator::load(&need(GENERATOR_FILE)?)?)
        };
        let centers = read_json(&need(CENTERS_FILE)?)?;
        let report = read_json(&need(OFFLINE_REPORT_FILE)?)?;
        Ok(OfflineArtifacts { model, generator, centers, report })
    }
}
