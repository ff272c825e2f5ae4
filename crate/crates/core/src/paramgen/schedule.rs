use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Noise-variance sequence `β_1..β_T` and cumulative products `ᾱ_t`.
///
/// Steps are indexed from 1; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRecord {
    betas: Vec<f64>,
}

impl From<DiffusionSchedule> for ScheduleRecord {
    fn from(s: DiffusionSchedule) -> Self {
        ScheduleRecord { betas: s.betas }
    }
}

impl TryFrom<ScheduleRecord> for DiffusionSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRecord) -> Result<Self> {
        DiffusionSchedule::from_betas(r.betas)
    }
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie strictly inside (0, 1)".into()));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    /// Linear ramp from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        DiffusionSchedule::from_betas(betas)
    }

    /// The usual `1e-4 → 0.02` linear ramp, rescaled by `1000/T` so that a
    /// short chain still ends near pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps as f64;
        DiffusionSchedule::linear(steps, (1e-4 * k).min(0.5), (0.02 * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Closed-form forward marginal `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·noise`.
pub fn q_sample(z0: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(noise, |z, e| s0 * z + s1 * e)
}

/// One forward transition `z_t = √(1−β_t)·z_{t−1} + √β_t·noise`.
pub fn q_step(z_prev: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    let (s0, s1) = ((1.0 - b).sqrt(), b.sqrt());
    z_prev.zip_map(noise, |z, e| s0 * z + s1 * e)
}
