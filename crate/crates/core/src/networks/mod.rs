//! Toy-scale style-based, progressively growing generator and the matching
//! discriminator.
//!
//! A generator maps a latent `z` through a small MLP to a style code `w`,
//! then synthesizes an image from a learned 4x4 constant. Each growth stage
//! doubles the resolution; during fade-in the new stage's RGB output is
//! blended with the upsampled output of the previous stage. The
//! discriminator mirrors this and exposes both a raw logit and its pre-logit
//! embedding.

mod discriminator;
mod generator;
mod params;

pub use discriminator::{discriminator_forward, BoundDiscriminator, DiscriminatorParams};
pub use generator::{generate, mapping_forward, synthesis_forward, BoundGenerator, GeneratorParams};
pub use params::{Bound, ParamSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("growth stage {stage} exceeds max stage {max}")]
    StageOverflow { stage: usize, max: usize },
    #[error("resolution mismatch: expected {expected}x{expected} images, got shape {got:?}")]
    ResolutionMismatch { expected: usize, got: Vec<usize> },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid network config: {0}")]
    Config(String),
}

/// Architecture shared by both generators and the discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Feature channels per growth stage.
    pub channels: Vec<usize>,
    pub max_stage: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            embed_dim: 64,
            channels: vec![64, 64, 32, 16],
            max_stage: 3,
        }
    }
}

impl NetConfig {
    pub fn with_max_stage(max_stage: usize) -> Self {
        Self {
            max_stage,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.latent_dim == 0 || self.embed_dim == 0 {
            return Err(NetworkError::Config("dims must be positive".into()));
        }
        if self.channels.len() <= self.max_stage {
            return Err(NetworkError::Config(format!(
                "max_stage {} needs {} channel entries, have {}",
                self.max_stage,
                self.max_stage + 1,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(NetworkError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn max_resolution(&self) -> usize {
        resolution(self.max_stage)
    }

    fn check_stage(&self, stage: usize) -> Result<(), NetworkError> {
        if stage > self.max_stage {
            return Err(NetworkError::StageOverflow {
                stage,
                max: self.max_stage,
            });
        }
        Ok(())
    }
}

/// Image side length at `stage`: `4 * 2^stage`.
pub fn resolution(stage: usize) -> usize {
    4 << stage
}

/// Progressive-growing position: current stage and fade-in weight of its
/// newest block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthState {
    pub stage: usize,
    pub alpha: f32,
}

impl GrowthState {
    pub fn new(stage: usize, alpha: f32) -> Self {
        Self {
            stage,
            alpha: alpha.clamp(0.0, 1.0),
        }
    }

    /// Fully faded-in state at `stage`.
    pub fn settled(stage: usize) -> Self {
        Self { stage, alpha: 1.0 }
    }

    pub fn resolution(&self) -> usize {
        resolution(self.stage)
    }

    /// True when the previous stage's path still contributes.
    pub(crate) fn fading(&self) -> bool {
        self.stage > 0 && self.alpha < 1.0
    }
}

/// A batch of latent vectors, `[batch, latent_dim]`, each row drawn from a
/// standard normal.
pub fn sample_latents<R: Rng>(rng: &mut R, batch: usize, dim: usize) -> Tensor<f32> {
    Tensor::from_fn([batch, dim], |_| rng.sample::<f64, _>(StandardNormal) as f32)
}
