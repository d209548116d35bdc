//! Noise schedule, v-parameterisation, the tiny denoiser, training and
//! DDIM sampling.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserConfig, TinyDenoiser};
pub use sampler::{sample_chunk, sample_from};
pub use schedule::{make_linear_schedule, NoiseSchedule};
pub use train::{batch_loss, train_step, StepStats, TrainExample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [1, {steps}]")]
    Timestep { t: usize, steps: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training: {0}")]
    Training(String),
}

/// Schedule and sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
    pub sampler_steps: usize,
    pub guidance: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_first: 0.00085, beta_last: 0.0120, sampler_steps: 16, guidance: 1.0 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_linear_schedule(self.train_steps, self.beta_first, self.beta_last)
    }
}

/// Full-scale reference settings, kept for documentation and config dumps;
/// desk runs use [`DiffusionConfig::default`] and [`DenoiserConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub diffusion_steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
    pub input_channels: usize,
    pub latent_shape: [usize; 3],
    pub base_channels: usize,
    pub attention_resolutions: Vec<usize>,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub context_dim: usize,
    pub video_resolution: [usize; 2],
    pub chunk_size: usize,
    pub memory_size: usize,
    pub views: Vec<String>,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub batch_size_single_view: usize,
    pub batch_size_multi_view: usize,
    pub parameterization: String,
    pub max_steps: usize,
    pub grad_clip_norm: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 1000,
            beta_first: 0.00085,
            beta_last: 0.0120,
            input_channels: 19,
            latent_shape: [40, 64, 4],
            base_channels: 320,
            attention_resolutions: vec![1, 2, 4],
            channel_multipliers: vec![1, 2, 4, 4],
            blocks_per_resolution: 2,
            context_dim: 1024,
            video_resolution: [320, 512],
            chunk_size: 16,
            memory_size: 4,
            views: ["head", "head_left", "head_right", "left_hand", "right_hand"].map(String::from).to_vec(),
            learning_rate: 5e-5,
            adam_betas: [0.9, 0.999],
            batch_size_single_view: 8,
            batch_size_multi_view: 1,
            parameterization: "v".into(),
            max_steps: 100_000,
            grad_clip_norm: 0.5,
        }
    }
}

#[cfg(test)]
mod tests;
