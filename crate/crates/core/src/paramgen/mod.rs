//! Diffusion-based generation of adapter parameters.

mod autoencoder;
mod denoiser;
mod generator;
mod mlp;
mod schedule;
mod snapshots;

pub use autoencoder::ParamAutoencoder;
pub use denoiser::{
    diffusion_loss, diffusion_loss_on, noisy_latents, reverse_diffusion, sample_training_noise, time_embedding, train_denoiser, Denoiser,
    NoisePredictor, TIME_EMBED_DIM,
};
pub use generator::{GeneratorSettings, GeneratorTrainingReport, ParameterGenerator, SamplerMode, SiteGenerator};
pub use mlp::{Linear, Mlp};
pub use schedule::{q_sample, q_step, DiffusionSchedule};
pub use snapshots::{Condition, ParamVector, Snapshot, SnapshotCollector, MIN_SNAPSHOTS};
