use crate::losses::{
    self, diversity_measure, DiscriminatorMode, GeneratorId, GeneratorObjective, LossError,
};
use crate::networks::{
    discriminator_forward, generate, DiscriminatorParams, GeneratorParams, GrowthState,
    NetworkError,
};
use crate::tensor::{Graph, TensorError, Var};

use super::{growth_schedule, AdamState, DiagnosticsRecord, LatentBatch, Status, TrainConfig, TrainError};

/// Outcome of one network's update.
struct Update {
    loss: f32,
    grad_norm: f32,
    update_norm: f32,
    diversity: f32,
    applied: bool,
}

impl Update {
    fn skipped(loss: f32, grad_norm: f32) -> Self {
        Self {
            loss,
            grad_norm,
            update_norm: 0.0,
            diversity: f32::NAN,
            applied: false,
        }
    }
}

/// Distinguishes numeric breakdown, which is recorded and survived, from
/// structural errors, which abort the step.
enum Failure {
    Numeric,
    Fatal(TrainError),
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        match e {
            LossError::ZeroVector => Failure::Numeric,
            other => Failure::Fatal(other.into()),
        }
    }
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        Failure::Fatal(e.into())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure::Fatal(e.into())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Failure::Fatal(e)
    }
}

fn grad_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt()
}

/// Backpropagates `loss`, then applies Adam unless the loss or any
/// gradient is non-finite.
fn finish_update(
    g: &mut Graph<f32>,
    loss: Var,
    vars: &[Var],
    params: &mut crate::networks::ParamSet,
    adam: &mut AdamState,
    hyper: &super::AdamHyper,
) -> Result<Update, Failure> {
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(Update::skipped(value, f32::NAN));
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect();
    let norm = grad_norm(&grads);
    if !norm.is_finite() {
        return Ok(Update::skipped(value, f32::NAN));
    }
    let change = adam.step(params, &grads, hyper);
    Ok(Update {
        loss: value,
        grad_norm: norm as f32,
        update_norm: change as f32,
        diversity: f32::NAN,
        applied: true,
    })
}

fn update_discriminator(
    d: &mut DiscriminatorParams,
    adam: &mut AdamState,
    gens: (&GeneratorParams, &GeneratorParams),
    batches: (&LatentBatch, &LatentBatch),
    growth: GrowthState,
    config: &TrainConfig,
) -> Result<Update, Failure> {
    let mut g = Graph::new();
    let g1 = gens.0.bind(&mut g, false);
    let g2 = gens.1.bind(&mut g, false);
    let z1 = g.constant(batches.0.z.clone());
    let z2 = g.constant(batches.1.z.clone());
    let x1 = generate(&mut g, &g1, z1, growth)?;
    let x2 = generate(&mut g, &g2, z2, growth)?;

    let snapshot = d.clone();
    let bound = snapshot.bind(&mut g, true);
    let (l1, _) = discriminator_forward(&mut g, &bound, x1, growth)?;
    let (l2, _) = discriminator_forward(&mut g, &bound, x2, growth)?;
    let loss = match config.arrangement.discriminator_mode {
        DiscriminatorMode::Classifier => losses::discriminator_classifier_loss(&mut g, l1, l2)?,
        DiscriminatorMode::Diametric => {
            // The opposed pair cancels exactly on a shared batch.
            if batches.0.id == batches.1.id {
                return Err(TrainError::SharedBatch(batches.0.id).into());
            }
            let (pos, _) = losses::diametric_pair(&mut g, l1);
            let (_, neg) = losses::diametric_pair(&mut g, l2);
            g.add(pos, neg)?
        }
    };
    let vars = bound.bound().vars().to_vec();
    finish_update(&mut g, loss, &vars, d.params_mut(), adam, &config.adam_d())
}

/// Updates generator `id`; the other generator and the discriminator are
/// recorded as constants so no gradient can reach them.
#[allow(clippy::too_many_arguments)]
fn update_generator(
    id: GeneratorId,
    me: &mut GeneratorParams,
    adam: &mut AdamState,
    other: &GeneratorParams,
    d: &DiscriminatorParams,
    batches: (&LatentBatch, &LatentBatch),
    growth: GrowthState,
    config: &TrainConfig,
) -> Result<Update, Failure> {
    let arrangement = &config.arrangement;
    let measure = diversity_measure::<f32>(&arrangement.diversity_measure).ok_or_else(|| {
        TrainError::Config(format!("unknown diversity measure `{}`", arrangement.diversity_measure))
    })?;
    let mut g = Graph::new();
    let snapshot = me.clone();
    let mine = snapshot.bind(&mut g, true);
    let theirs = other.bind(&mut g, false);
    let disc = d.bind(&mut g, false);
    let z_mine = g.constant(batches.0.z.clone());
    let z_theirs = g.constant(batches.1.z.clone());
    let x_mine = generate(&mut g, &mine, z_mine, growth)?;
    let x_theirs = generate(&mut g, &theirs, z_theirs, growth)?;

    let objective = match arrangement.generator_objective {
        GeneratorObjective::SwapClassification => {
            let (logits, _) = discriminator_forward(&mut g, &disc, x_mine, growth)?;
            losses::swap_classification_loss(&mut g, logits, id)?
        }
        GeneratorObjective::EmbeddingProximity => {
            let (_, e_mine) = discriminator_forward(&mut g, &disc, x_mine, growth)?;
            let (_, e_theirs) = discriminator_forward(&mut g, &disc, x_theirs, growth)?;
            losses::embedding_proximity_loss(&mut g, e_mine, e_theirs, arrangement.distance_for(id))?
        }
    };
    let competition = losses::diversity_competition_loss_with(
        &mut g,
        measure,
        x_mine,
        x_theirs,
        arrangement.diversity_margin,
    )?;
    let weighted = g.scale(competition, arrangement.diversity_weight);
    let loss = g.add(objective, weighted)?;
    let diversity = measure(&mut g, x_mine)?;
    let diversity = g.value(diversity).item();

    let vars = mine.bound().vars().to_vec();
    let mut update = finish_update(&mut g, loss, &vars, me.params_mut(), adam, &config.adam_g())?;
    update.diversity = diversity;
    Ok(update)
}

fn probe_diversity(gen: &GeneratorParams, z: &crate::tensor::Tensor<f32>, growth: GrowthState, measure: &str) -> f32 {
    let Some(measure) = diversity_measure::<f32>(measure) else {
        return f32::NAN;
    };
    let mut g = Graph::new();
    let bound = gen.bind(&mut g, false);
    let z = g.constant(z.clone());
    generate(&mut g, &bound, z, growth)
        .ok()
        .and_then(|x| measure(&mut g, x).ok())
        .map_or(f32::NAN, |d| g.value(d).item())
}

fn resolve(result: Result<Update, Failure>) -> Result<Update, TrainError> {
    match result {
        Ok(u) => Ok(u),
        Err(Failure::Numeric) => Ok(Update::skipped(f32::NAN, f32::NAN)),
        Err(Failure::Fatal(e)) => Err(e),
    }
}

/// One training step: D, then G1, then G2 (which sees the updated G1).
///
/// Four fresh latent batches are drawn: `zA1`, `zA2` for the discriminator
/// and `zB1`, `zB2` for the generators. Non-finite losses or gradients skip
/// the affected update and mark the record EXPLODING; only structural
/// errors are returned.
pub fn train_step(
    state: &mut super::TrainState,
    config: &TrainConfig,
) -> Result<DiagnosticsRecord, TrainError> {
    let growth = growth_schedule(state.step, config);
    state.growth = growth;
    let (b, dim) = (config.batch_size, config.latent_dim);
    let za1 = state.sample_batch(b, dim);
    let za2 = state.sample_batch(b, dim);
    let zb1 = state.sample_batch(b, dim);
    let zb2 = state.sample_batch(b, dim);

    let ud = resolve(update_discriminator(
        &mut state.d,
        &mut state.adam_d,
        (&state.g1, &state.g2),
        (&za1, &za2),
        growth,
        config,
    ))?;
    let u1 = resolve(update_generator(
        GeneratorId::G1,
        &mut state.g1,
        &mut state.adam_g1,
        &state.g2,
        &state.d,
        (&zb1, &zb2),
        growth,
        config,
    ))?;
    let u2 = resolve(update_generator(
        GeneratorId::G2,
        &mut state.g2,
        &mut state.adam_g2,
        &state.g1,
        &state.d,
        (&zb2, &zb1),
        growth,
        config,
    ))?;

    let measure = &config.arrangement.diversity_measure;
    let (p1, p2) = state.probes();
    let probe_g1 = probe_diversity(&state.g1, p1, growth, measure);
    let probe_g2 = probe_diversity(&state.g2, p2, growth, measure);

    let mut record = DiagnosticsRecord {
        step: state.step,
        stage: growth.stage,
        alpha: growth.alpha,
        loss_d: ud.loss,
        loss_g1: u1.loss,
        loss_g2: u2.loss,
        grad_norm_d: ud.grad_norm,
        grad_norm_g1: u1.grad_norm,
        grad_norm_g2: u2.grad_norm,
        update_norm_d: ud.update_norm,
        update_norm_g1: u1.update_norm,
        update_norm_g2: u2.update_norm,
        diversity_g1: u1.diversity,
        diversity_g2: u2.diversity,
        probe_diversity_g1: probe_g1,
        probe_diversity_g2: probe_g2,
        status: Status::Healthy,
    };
    record.status = if ud.applied && u1.applied && u2.applied {
        record.classify(config.explode_threshold)
    } else {
        Status::Exploding
    };
    state.step += 1;
    state.growth = growth_schedule(state.step, config);
    Ok(record)
}
