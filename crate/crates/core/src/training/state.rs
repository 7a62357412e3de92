use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::networks::{sample_latents, DiscriminatorParams, GeneratorParams, GrowthState};
use crate::tensor::Tensor;

use super::{growth_schedule, AdamState, TrainConfig, TrainError};

/// A latent batch tagged with a per-run unique id, so the step can prove
/// which losses saw which batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub id: u64,
    pub z: Tensor<f32>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub g1: GeneratorParams,
    pub g2: GeneratorParams,
    pub d: DiscriminatorParams,
    pub adam_g1: AdamState,
    pub adam_g2: AdamState,
    pub adam_d: AdamState,
    /// Number of completed steps.
    pub step: u64,
    /// Latent sampler stream.
    pub rng: ChaCha8Rng,
    /// Growth position for the next step.
    pub growth: GrowthState,
    pub next_batch_id: u64,
    probe_g1: Tensor<f32>,
    probe_g2: Tensor<f32>,
}

struct Seeds {
    g1: u64,
    g2: u64,
    d: u64,
    sampler: u64,
    probe: u64,
}

/// Every stream in a run is derived from the one configured seed.
fn derive_seeds(seed: u64) -> Seeds {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Seeds {
        g1: master.next_u64(),
        g2: master.next_u64(),
        d: master.next_u64(),
        sampler: master.next_u64(),
        probe: master.next_u64(),
    }
}

fn probes(config: &TrainConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = sample_latents(&mut rng, config.batch_size, config.latent_dim);
    let b = sample_latents(&mut rng, config.batch_size, config.latent_dim);
    (a, b)
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let net = config.net_config();
        let seeds = derive_seeds(config.seed);
        let g1 = GeneratorParams::init(seeds.g1, &net)?;
        let g2 = GeneratorParams::init(seeds.g2, &net)?;
        let d = DiscriminatorParams::init(seeds.d, &net)?;
        let (probe_g1, probe_g2) = probes(config, seeds.probe);
        Ok(Self {
            adam_g1: AdamState::zeros_like(g1.params()),
            adam_g2: AdamState::zeros_like(g2.params()),
            adam_d: AdamState::zeros_like(d.params()),
            g1,
            g2,
            d,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seeds.sampler),
            growth: growth_schedule(0, config),
            next_batch_id: 0,
            probe_g1,
            probe_g2,
        })
    }

    /// Reassembles a state from checkpointed parts. The probe batches are
    /// rederived from the config's seed.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: &TrainConfig,
        nets: (GeneratorParams, GeneratorParams, DiscriminatorParams),
        adam: (AdamState, AdamState, AdamState),
        step: u64,
        rng: ChaCha8Rng,
        growth: GrowthState,
        next_batch_id: u64,
    ) -> Self {
        let (probe_g1, probe_g2) = probes(config, derive_seeds(config.seed).probe);
        Self {
            g1: nets.0,
            g2: nets.1,
            d: nets.2,
            adam_g1: adam.0,
            adam_g2: adam.1,
            adam_d: adam.2,
            step,
            rng,
            growth,
            next_batch_id,
            probe_g1,
            probe_g2,
        }
    }

    pub fn sample_batch(&mut self, batch: usize, dim: usize) -> LatentBatch {
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        LatentBatch {
            id,
            z: sample_latents(&mut self.rng, batch, dim),
        }
    }

    /// Fixed latent batches used to track each generator's own drift.
    pub fn probes(&self) -> (&Tensor<f32>, &Tensor<f32>) {
        (&self.probe_g1, &self.probe_g2)
    }
}
