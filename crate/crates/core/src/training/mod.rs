//! Data-free adversarial training: latent sampling, the D, G1, G2 update
//! sequence, progressive growth, stability diagnostics and checkpoints.

mod adam;
pub mod checkpoint;
mod diagnostics;
mod schedule;
mod state;
mod step;

pub use adam::{adam_update, AdamHyper, AdamState};
pub use diagnostics::{
    diagnose_series, read_metrics, stability_diagnose, write_metrics_line, DiagnoseReport,
    DiagnosticsRecord, MetricsError, Status,
};
pub use schedule::growth_schedule;
pub use state::{LatentBatch, TrainState};
pub use step::train_step;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{LossArrangement, LossError};
use crate::networks::{NetConfig, NetworkError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("diametric losses would see the same batch (id {0})")]
    SharedBatch(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub arrangement: LossArrangement,
    pub max_stage: usize,
    pub steps_per_stage: u64,
    pub fade_fraction: f32,
    pub diag_window: usize,
    pub explode_threshold: f32,
    pub stasis_threshold: f32,
    pub checkpoint_every: u64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Feature channels per stage; needs at least `max_stage + 1` entries.
    pub channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            seed: 0,
            batch_size: 8,
            steps: 1000,
            lr_g: 1e-3,
            lr_d: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            arrangement: LossArrangement::default(),
            max_stage: net.max_stage,
            steps_per_stage: 1000,
            fade_fraction: 0.5,
            diag_window: 50,
            explode_threshold: 1e3,
            stasis_threshold: 1e-5,
            checkpoint_every: 100,
            latent_dim: net.latent_dim,
            embed_dim: net.embed_dim,
            channels: net.channels,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            latent_dim: self.latent_dim,
            embed_dim: self.embed_dim,
            channels: self.channels[..(self.max_stage + 1).min(self.channels.len())].to_vec(),
            max_stage: self.max_stage,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction <= 1.0) {
            return fail(format!("fade_fraction must be in (0, 1], got {}", self.fade_fraction));
        }
        if self.steps_per_stage == 0 {
            return fail("steps_per_stage must be >= 1".into());
        }
        if self.diag_window < 2 {
            return fail(format!("diag_window must be >= 2, got {}", self.diag_window));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1".into());
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("eps", self.eps)] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("explode_threshold", self.explode_threshold),
            ("stasis_threshold", self.stasis_threshold),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return fail(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        self.arrangement.validate().map_err(TrainError::Config)?;
        self.net_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adam_d(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_d,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn adam_g(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_g,
            ..self.adam_d()
        }
    }

    /// Hash of every field that shapes the trajectory. Run length,
    /// checkpoint cadence and diagnostic thresholds are left out so a
    /// checkpoint can be resumed with a longer `steps` or reinterpreted.
    pub fn trajectory_hash(&self) -> u64 {
        let a = &self.arrangement;
        let canonical = format!(
            "seed={};batch_size={};lr_g={:08x};lr_d={:08x};beta1={:08x};beta2={:08x};eps={:08x};\
             d_mode={};g_objective={};distance_g1={};distance_g2={};div_weight={:08x};\
             div_margin={:08x};div_measure={};max_stage={};steps_per_stage={};fade={:08x};\
             latent_dim={};embed_dim={};channels={:?}",
            self.seed,
            self.batch_size,
            self.lr_g.to_bits(),
            self.lr_d.to_bits(),
            self.beta1.to_bits(),
            self.beta2.to_bits(),
            self.eps.to_bits(),
            a.discriminator_mode,
            a.generator_objective,
            a.distance_g1,
            a.distance_g2,
            a.diversity_weight.to_bits(),
            a.diversity_margin.to_bits(),
            a.diversity_measure,
            self.max_stage,
            self.steps_per_stage,
            self.fade_fraction.to_bits(),
            self.latent_dim,
            self.embed_dim,
            self.net_config().channels,
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
