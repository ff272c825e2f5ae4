use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{AlignChoice, ExperimentConfig};
use super::offline::{offline_train, OfflineArtifacts};
use super::run::{run_continual, RunRecord};
use crate::adapter::AdapterKind;
use crate::error::{Error, Result};

/// Offline artifacts keyed by adapter variant and seed, trained on demand
/// from a base config and optionally persisted under a directory.
pub struct ArtifactCache {
    base: ExperimentConfig,
    dir: Option<PathBuf>,
    entries: BTreeMap<(String, u64), OfflineArtifacts>,
}

impl ArtifactCache {
    pub fn new(base: &ExperimentConfig, dir: Option<&Path>) -> Self {
        ArtifactCache {
            base: base.clone(),
            dir: dir.map(Path::to_path_buf),
            entries: BTreeMap::new(),
        }
    }

    pub fn offline_config(&self, kind: AdapterKind, seed: u64) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.seed = seed;
        c.ablation.use_adapter = kind;
        c
    }

    pub fn get(&mut self, kind: AdapterKind, seed: u64) -> Result<&OfflineArtifacts> {
        let key = (kind.to_string(), seed);
        if !self.entries.contains_key(&key) {
            let sub = self.dir.as_ref().map(|d| d.join(format!("offline-{kind}-s{seed}")));
            let artifacts = match &sub {
                Some(p) if p.join(super::offline::MODEL_FILE).is_file() => OfflineArtifacts::load(p)?,
                _ => {
                    let a = offline_train(&self.offline_config(kind, seed))?;
                    if let Some(p) = &sub {
                        a.save(p)?;
                    }
                    a
                }
            };
            self.entries.insert(key.clone(), artifacts);
        }
        Ok(&self.entries[&key])
    }

    /// Runs `cfg` against the cached artifacts of its variant and seed.
    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<RunRecord> {
        let artifacts = self.get(cfg.ablation.use_adapter, cfg.seed)?;
        run_continual(cfg, artifacts)
    }
}

/// Ablation axes; the grid is their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub adapters: Vec<AdapterKind>,
    pub generators: Vec<bool>,
    pub aligns: Vec<AlignChoice>,
    pub seeds: Vec<u64>,
}

impl GridAxes {
    pub fn full(seeds: Vec<u64>) -> Self {
        GridAxes {
            adapters: vec![AdapterKind::Dual, AdapterKind::PlainLora],
            generators: vec![true, false],
            aligns: vec![AlignChoice::Ot, AlignChoice::Kl, AlignChoice::Off],
            seeds,
        }
    }

    /// Configs of every cell and seed, cells outermost.
    pub fn configs(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &adapter in &self.adapters {
            for &gen in &self.generators {
                for &align in &self.aligns {
                    for &seed in &self.seeds {
                        let mut c = base.clone();
                        c.seed = seed;
                        c.ablation.use_adapter = adapter;
                        c.ablation.use_generator = gen;
                        c.ablation.align = align;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// One aggregated row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_source_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Runs of the Cartesian grid.
    pub records: Vec<RunRecord>,
    /// Direct-test baseline, one run per seed.
    pub direct_test: Vec<RunRecord>,
    /// Grid cells in axis order, then the `direct_test` row.
    pub rows: Vec<AblationRow>,
}

pub const DIRECT_TEST_LABEL: &str = "direct_test";

fn aggregate(label: &str, runs: &[&RunRecord]) -> AblationRow {
    let n = runs.len().max(1) as f64;
    let mean = runs.iter().map(|r| r.mean_shifted_accuracy).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.mean_shifted_accuracy - mean).powi(2)).sum::<f64>() / n;
    AblationRow {
        label: label.to_string(),
        runs: runs.len(),
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        mean_source_drop: runs.iter().map(|r| r.source_drop).sum::<f64>() / n,
    }
}

/// Runs every grid cell for every seed plus a direct-test baseline per seed.
pub fn run_ablation_grid(base: &ExperimentConfig, axes: &GridAxes, cache: &mut ArtifactCache) -> Result<AblationTable> {
    if axes.seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation grid needs at least one seed".into()));
    }
    let mut records = Vec::new();
    for cfg in axes.configs(base) {
        records.push(cache.run(&cfg)?);
    }
    let mut direct_test = Vec::new();
    for &seed in &axes.seeds {
        let mut c = base.direct_test();
        c.seed = seed;
        let mut r = cache.run(&c)?;
        r.label = DIRECT_TEST_LABEL.to_string();
        r.run_id = format!("{DIRECT_TEST_LABEL}-s{seed}");
        direct_test.push(r);
    }
    let mut rows = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for r in &records {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    for label in &labels {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| &r.label == label).collect();
        rows.push(aggregate(label, &runs));
    }
    rows.push(aggregate(DIRECT_TEST_LABEL, &direct_test.iter().collect::<Vec<_>>()));
    Ok(AblationTable { records, direct_test, rows })
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidState(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidState(format!("csv encoding: {e}")))
    }

    /// Every run, grid first.
    pub fn all_records(&self) -> Vec<RunRecord> {
        self.records.iter().chain(&self.direct_test).cloned().collect()
    }
}
