use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::ParamAutoencoder;
use super::denoiser::{reverse_diffusion, train_denoiser, Denoiser};
use super::schedule::{q_sample, DiffusionSchedule};
use super::snapshots::{Condition, ParamVector, SnapshotCollector};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Ancestral,
    Deterministic,
}

/// Architecture and training settings of a [`ParameterGenerator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub steps: usize,
    pub z_dim: usize,
    pub t0_frac: f64,
    pub ae_hidden: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub denoiser_hidden: usize,
    pub denoiser_steps: usize,
    pub denoiser_batch: usize,
    pub denoiser_lr: f64,
    pub sampler: SamplerMode,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        GeneratorSettings {
            steps: 100,
            z_dim: 16,
            t0_frac: 0.3,
            ae_hidden: 64,
            ae_epochs: 400,
            ae_lr: 5e-3,
            denoiser_hidden: 64,
            denoiser_steps: 1500,
            denoiser_batch: 64,
            denoiser_lr: 2e-3,
            sampler: SamplerMode::Ancestral,
        }
    }
}

impl GeneratorSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.z_dim == 0 || self.ae_hidden == 0 || self.denoiser_hidden == 0 {
            return Err(Error::InvalidArgument("generator widths and step count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.t0_frac) {
            return Err(Error::InvalidArgument(format!("t0_frac {} outside [0, 1]", self.t0_frac)));
        }
        if !(self.ae_lr > 0.0 && self.denoiser_lr > 0.0) || self.denoiser_batch == 0 {
            return Err(Error::InvalidArgument("generator learning rates and batch must be positive".into()));
        }
        Ok(())
    }
}

/// Autoencoder and denoiser of one adapter site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteGenerator {
    pub site_id: usize,
    pub autoencoder: ParamAutoencoder,
    pub denoiser: Denoiser,
    /// Per-dimension statistics used to standardize latent codes.
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
}

impl SiteGenerator {
    fn standardize(&self, z: &Tensor) -> Tensor {
        let k = self.latent_mean.len();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.latent_mean[i % k]) / self.latent_std[i % k];
        }
        out
    }

    fn unstandardize(&self, z: &Tensor) -> Tensor {
        let k = self.latent_mean.len();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.latent_std[i % k] + self.latent_mean[i % k];
        }
        out
    }
}

/// Losses recorded while training a generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainingReport {
    /// Per site, mean per-entry reconstruction error after each epoch.
    pub recon_curves: Vec<Vec<f64>>,
    /// Per site, denoising loss of each step.
    pub denoise_curves: Vec<Vec<f64>>,
    /// Per site, final mean per-entry reconstruction error on the snapshots.
    pub recon_error: Vec<f64>,
}

/// Conditional diffusion generator over adapter parameters, one
/// autoencoder/denoiser pair per site. Untrained until [`ParameterGenerator::train`]
/// populates `sites`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGenerator {
    pub schedule: DiffusionSchedule,
    pub sites: Vec<SiteGenerator>,
    pub z_dim: usize,
    pub t0_frac: f64,
    #[serde(default)]
    pub sampler: SamplerMode,
}

impl ParameterGenerator {
    pub fn new(settings: &GeneratorSettings) -> Result<Self> {
        settings.validate()?;
        Ok(ParameterGenerator {
            schedule: DiffusionSchedule::scaled_linear(settings.steps)?,
            sites: Vec::new(),
            z_dim: settings.z_dim,
            t0_frac: settings.t0_frac,
            sampler: settings.sampler,
        })
    }

    pub fn is_trained(&self) -> bool {
        !self.sites.is_empty()
    }

    /// Noising depth `⌈t0_frac·T⌉`.
    pub fn start_step(&self) -> usize {
        (self.t0_frac * self.schedule.steps() as f64).ceil() as usize
    }

    /// Trains autoencoders, then denoisers, on the collected snapshots.
    pub fn train(
        &mut self,
        snapshots: &SnapshotCollector,
        settings: &GeneratorSettings,
        seed: u64,
    ) -> Result<GeneratorTrainingReport> {
        snapshots.ensure_ready()?;
        let mut report = GeneratorTrainingReport::default();
        let mut sites = Vec::new();
        for site_id in 0..snapshots.sites() {
            let (w, cond) = snapshots.site_matrix(site_id)?;
            let mut g = rng::stream(seed, &format!("generator-site-{site_id}"));
            let mut ae = ParamAutoencoder::new(w.cols(), settings.ae_hidden, settings.z_dim, &mut g)?;
            let curve = ae.fit(&w, settings.ae_epochs, settings.ae_lr)?;
            report.recon_error.push(ae.mean_recon_error(&w)?);
            report.recon_curves.push(curve);

            let z = ae.encode(&w)?;
            let (n, k) = z.dims2();
            let mean = z.mean_rows().into_data();
            let std: Vec<f64> = (0..k)
                .map(|j| {
                    let var = (0..n).map(|i| (z.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
                    var.sqrt().max(1e-6)
                })
                .collect();
            let mut site = SiteGenerator {
                site_id,
                autoencoder: ae,
                denoiser: Denoiser::new(settings.z_dim, cond.cols(), settings.denoiser_hidden, &mut g),
                latent_mean: mean,
                latent_std: std,
            };
            let zs = site.standardize(&z);
            let curve = train_denoiser(
                &mut site.denoiser,
                &zs,
                &cond,
                &self.schedule,
                settings.denoiser_steps,
                settings.denoiser_batch,
                settings.denoiser_lr,
                &mut g,
            )?;
            report.denoise_curves.push(curve);
            sites.push(site);
        }
        self.sites = sites;
        Ok(report)
    }

    fn site(&self, site_id: usize) -> Result<&SiteGenerator> {
        if !self.is_trained() {
            return Err(Error::InvalidState("parameter generator has not been trained".into()));
        }
        self.sites
            .iter()
            .find(|s| s.site_id == site_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no generator registered for site {site_id}")))
    }

    pub fn encode(&self, w: &ParamVector) -> Result<Tensor> {
        self.site(w.site_id)?.autoencoder.encode(&w.as_row())
    }

    pub fn decode(&self, site_id: usize, z: &Tensor) -> Result<ParamVector> {
        let out = self.site(site_id)?.autoencoder.decode(z)?;
        Ok(ParamVector { site_id, values: out.into_data() })
    }

    /// Anchored regeneration: encode `w_current`, noise it to the start step,
    /// denoise back conditioned on `cond`, decode.
    pub fn generate_parameters(&self, w_current: &ParamVector, cond: &Condition, g: &mut Rng) -> Result<ParamVector> {
        let site = self.site(w_current.site_id)?;
        let c = cond.as_row();
        if c.cols() != site.denoiser.c_dim {
            return Err(Error::shape("generator condition", c.shape(), &[1, site.denoiser.c_dim]));
        }
        let z0 = site.autoencoder.encode(&w_current.as_row())?;
        let t0 = self.start_step();
        let z_hat = if t0 == 0 {
            z0
        } else {
            let zs = site.standardize(&z0);
            let noise = Tensor::row(rng::normal_vec(g, zs.numel()));
            let zt = q_sample(&zs, t0, &self.schedule, &noise)?;
            let posterior = match self.sampler {
                SamplerMode::Ancestral => Some(&mut *g),
                SamplerMode::Deterministic => None,
            };
            let zs_hat = reverse_diffusion(&site.denoiser, &zt, &c, t0, &self.schedule, posterior)?;
            site.unstandardize(&zs_hat)
        };
        let values = site.autoencoder.decode(&z_hat)?.into_data();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generated adapter parameters".into()));
        }
        Ok(ParamVector { site_id: w_current.site_id, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterSite;

    fn collector(n: usize) -> SnapshotCollector {
        let mut g = rng::stream(9, "snap");
        let mut site = AdapterSite::new(Tensor::eye(8), 2, Some(2), &mut g).unwrap();
        let mut c = SnapshotCollector::new(1, 0).unwrap();
        for step in 1..=n {
            for p in site.factors_mut() {
                for v in p.value.data_mut() {
                    *v += 0.01 * rng::normal_vec(&mut g, 1)[0];
                }
            }
            let cond = Condition::new(rng::normal_vec(&mut g, 3)).unwrap();
            c.observe(step, &[&site], &cond);
        }
        c
    }

    fn small_settings() -> GeneratorSettings {
        GeneratorSettings {
            steps: 20,
            z_dim: 4,
            ae_hidden: 16,
            ae_epochs: 200,
            denoiser_hidden: 16,
            denoiser_steps: 100,
            ..GeneratorSettings::default()
        }
    }

    #[test]
    fn untrained_generator_refuses() {
        let gen = ParameterGenerator::new(&GeneratorSettings::default()).unwrap();
        let w = ParamVector { site_id: 0, values: vec![0.0; 64] };
        let cond = Condition::new(vec![0.0; 3]).unwrap();
        let err = gen.generate_parameters(&w, &cond, &mut rng::stream(1, "g")).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn too_few_snapshots_refuse_training() {
        let mut gen = ParameterGenerator::new(&small_settings()).unwrap();
        let err = gen.train(&collector(10), &small_settings(), 1).unwrap_err();
        assert!(err.to_string().contains("64"));
    }

    #[test]
    fn trained_generator_contracts() {
        let settings = small_settings();
        let snaps = collector(70);
        let mut gen = ParameterGenerator::new(&settings).unwrap();
        let report = gen.train(&snaps, &settings, 3).unwrap();
        assert!(report.recon_error[0] < 1e-3);

        let w = snaps.snapshots[5].params[0].clone();
        let cond = snaps.snapshots[5].condition.clone();
        let a = gen.generate_parameters(&w, &cond, &mut rng::stream(4, "g")).unwrap();
        let b = gen.generate_parameters(&w, &cond, &mut rng::stream(4, "g")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), w.len());
        assert!(a.values.iter().all(|v| v.is_finite()));

        let unknown = ParamVector { site_id: 7, values: w.values.clone() };
        assert!(matches!(gen.encode(&unknown), Err(Error::InvalidArgument(_))));

        let mut anchored = gen.clone();
        anchored.t0_frac = 0.0;
        let round_trip = anchored.generate_parameters(&w, &cond, &mut rng::stream(5, "g")).unwrap();
        let expect = gen.decode(0, &gen.encode(&w).unwrap()).unwrap();
        assert_eq!(round_trip, expect);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.json");
        gen.save(&path).unwrap();
        assert_eq!(ParameterGenerator::load(&path).unwrap(), gen);
    }
}
