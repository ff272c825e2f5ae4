use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterKind, Kernel};
use crate::align::{AlignMode, CenterMass, OtOptions};
use crate::error::{Error, Result};
use crate::model::{hex, ModelDims};
use crate::paramgen::{GeneratorSettings, SamplerMode};
use crate::rng;
use crate::stream::{Corruption, DomainSpec, StreamOptions, MAX_SEVERITY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_in: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelSection {
            d_in: d.d_in,
            width: d.width,
            hidden_layers: d.hidden_layers,
            classes: d.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub r1: usize,
    pub r2: usize,
    /// Hidden-layer indices that carry an adapter.
    pub sites: Vec<usize>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let d = ModelDims::default();
        AdapterSection { r1: d.r1, r2: d.r2, sites: d.adapter_layers }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_orth: f64,
    pub lambda_hsic: f64,
    pub lambda_a: f64,
    pub lambda_ca: f64,
    pub kernel: Kernel,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_orth: 0.5,
            lambda_hsic: 0.5,
            lambda_a: 1.0,
            lambda_ca: 0.1,
            kernel: Kernel::Linear,
        }
    }
}

/// Test-time optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { lr: 1e-4, weight_decay: 5e-4, batch_size: 4 }
    }
}

/// Offline source training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineSection {
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for OfflineSection {
    fn default() -> Self {
        OfflineSection { n_train: 2000, n_test: 400, epochs: 10, batch_size: 32, lr: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub z_dim: usize,
    pub t0_frac: f64,
    pub snapshot_every: usize,
    pub warmup: usize,
    pub blend: f64,
    pub ae_hidden: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub denoiser_hidden: usize,
    pub denoiser_steps: usize,
    pub denoiser_batch: usize,
    pub denoiser_lr: f64,
    pub sampler: SamplerMode,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorSettings::default();
        GeneratorSection {
            steps: g.steps,
            z_dim: g.z_dim,
            t0_frac: g.t0_frac,
            snapshot_every: 5,
            warmup: 200,
            blend: 1.0,
            ae_hidden: g.ae_hidden,
            ae_epochs: g.ae_epochs,
            ae_lr: g.ae_lr,
            denoiser_hidden: g.denoiser_hidden,
            denoiser_steps: g.denoiser_steps,
            denoiser_batch: g.denoiser_batch,
            denoiser_lr: g.denoiser_lr,
            sampler: g.sampler,
        }
    }
}

impl GeneratorSection {
    pub fn settings(&self) -> GeneratorSettings {
        GeneratorSettings {
            steps: self.steps,
            z_dim: self.z_dim,
            t0_frac: self.t0_frac,
            ae_hidden: self.ae_hidden,
            ae_epochs: self.ae_epochs,
            ae_lr: self.ae_lr,
            denoiser_hidden: self.denoiser_hidden,
            denoiser_steps: self.denoiser_steps,
            denoiser_batch: self.denoiser_batch,
            denoiser_lr: self.denoiser_lr,
            sampler: self.sampler,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub mode: AlignMode,
    pub center_mass: CenterMass,
    pub eps: f64,
    pub tau_conf: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AlignSection {
    fn default() -> Self {
        let o = OtOptions::default();
        AlignSection { mode: o.mode, center_mass: o.center_mass, eps: o.eps, tau_conf: o.tau_conf, max_iter: o.max_iter, tol: o.tol }
    }
}

impl AlignSection {
    pub fn options(&self) -> OtOptions {
        OtOptions { mode: self.mode, center_mass: self.center_mass, eps: self.eps, tau_conf: self.tau_conf, max_iter: self.max_iter, tol: self.tol }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub sequence: Vec<Corruption>,
    pub severity: u8,
    pub batches_per_domain: usize,
    pub gradual: bool,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            sequence: vec![
                Corruption::AdditiveNoise,
                Corruption::Smoothing,
                Corruption::BrightnessShift,
                Corruption::ContrastScale,
                Corruption::FeatureDropout,
            ],
            severity: 5,
            batches_per_domain: 50,
            gradual: false,
        }
    }
}

/// Alignment term used at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignChoice {
    #[default]
    Ot,
    Kl,
    Off,
}

impl std::fmt::Display for AlignChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignChoice::Ot => "ot",
            AlignChoice::Kl => "kl",
            AlignChoice::Off => "off",
        })
    }
}

impl std::str::FromStr for AlignChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ot" => Ok(AlignChoice::Ot),
            "kl" => Ok(AlignChoice::Kl),
            "off" => Ok(AlignChoice::Off),
            other => Err(Error::InvalidArgument(format!("unknown alignment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub use_adapter: AdapterKind,
    pub use_generator: bool,
    pub align: AlignChoice,
    /// Seeds shared by every cell of an ablation grid.
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            use_adapter: AdapterKind::Dual,
            use_generator: true,
            align: AlignChoice::Ot,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a run depends on. Stored as TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub losses: LossSection,
    pub optimizer: OptimizerSection,
    pub offline: OfflineSection,
    pub generator: GeneratorSection,
    pub align: AlignSection,
    pub stream: StreamSection,
    pub ablation: AblationSection,
}

/// Config files store integers as signed 64-bit values.
pub const MAX_SEED: u64 = i64::MAX as u64;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = std::iter::once(&self.seed).chain(&self.ablation.seeds).find(|&&s| s > MAX_SEED) {
            return Err(Error::InvalidArgument(format!("seed {s} exceeds the largest storable seed {MAX_SEED}")));
        }
        let l = &self.losses;
        for (name, v) in [
            ("lambda_orth", l.lambda_orth),
            ("lambda_hsic", l.lambda_hsic),
            ("lambda_a", l.lambda_a),
            ("lambda_ca", l.lambda_ca),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if self.optimizer.batch_size == 0 || self.offline.batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if !(self.offline.lr > 0.0) || self.offline.n_train == 0 || self.offline.n_test == 0 {
            return Err(Error::InvalidArgument("offline section needs data and a positive lr".into()));
        }
        if !(0.0..=1.0).contains(&self.generator.blend) {
            return Err(Error::InvalidArgument(format!("blend {} outside [0, 1]", self.generator.blend)));
        }
        if self.generator.snapshot_every == 0 {
            return Err(Error::InvalidArgument("snapshot_every must be positive".into()));
        }
        self.generator.settings().validate()?;
        if !(self.align.eps > 0.0) || !(0.0..=1.0).contains(&self.align.tau_conf) {
            return Err(Error::InvalidArgument("align needs eps > 0 and tau_conf in [0, 1]".into()));
        }
        if self.stream.severity > MAX_SEVERITY || self.stream.sequence.is_empty() || self.stream.batches_per_domain == 0 {
            return Err(Error::InvalidArgument("stream needs a sequence, batches and severity in 0..=5".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.model.d_in,
            width: self.model.width,
            hidden_layers: self.model.hidden_layers,
            classes: self.model.classes,
            adapter_layers: self.adapter.sites.clone(),
            r1: self.adapter.r1,
            r2: self.adapter.r2,
        }
    }

    pub fn domain_sequence(&self) -> Vec<DomainSpec> {
        self.stream
            .sequence
            .iter()
            .enumerate()
            .map(|(i, &c)| DomainSpec::new(c, self.stream.severity, rng::derive_seed(self.seed, &format!("domain-{i}"))))
            .collect()
    }

    pub fn stream_options(&self) -> StreamOptions {
        StreamOptions {
            batch_size: self.optimizer.batch_size,
            batches_per_domain: Some(self.stream.batches_per_domain),
            gradual: self.stream.gradual,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Short tag of the ablation cell, e.g. `dual-gen-ot`.
    pub fn variant_label(&self) -> String {
        let a = &self.ablation;
        let gen = if a.use_generator { "gen" } else { "nogen" };
        format!("{}-{gen}-{}", a.use_adapter, a.align)
    }

    /// The frozen-source baseline: dual adapters present but never updated.
    pub fn direct_test(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.ablation.use_adapter = AdapterKind::Dual;
        c.ablation.use_generator = false;
        c.ablation.align = AlignChoice::Off;
        c.losses.lambda_orth = 0.0;
        c.losses.lambda_hsic = 0.0;
        c
    }

    pub fn is_direct_test(&self) -> bool {
        !self.ablation.use_generator
            && self.ablation.align == AlignChoice::Off
            && (self.ablation.use_adapter != AdapterKind::Dual
                || self.losses.lambda_a == 0.0
                || (self.losses.lambda_orth == 0.0 && self.losses.lambda_hsic == 0.0))
    }
}
