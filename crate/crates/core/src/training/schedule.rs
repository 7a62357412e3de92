use crate::networks::GrowthState;

use super::TrainConfig;

/// Growth position at `step`. Stage `s > 0` fades in linearly over the
/// first `fade_fraction` of its steps; stage 0 is always fully blended.
pub fn growth_schedule(step: u64, config: &TrainConfig) -> GrowthState {
    let stage = (step / config.steps_per_stage).min(config.max_stage as u64) as usize;
    if stage == 0 {
        return GrowthState::settled(0);
    }
    let into_stage = step - stage as u64 * config.steps_per_stage;
    let fade_steps = f64::from(config.fade_fraction) * config.steps_per_stage as f64;
    let alpha = if fade_steps <= 0.0 {
        1.0
    } else {
        (into_stage as f64 / fade_steps).min(1.0)
    };
    GrowthState::new(stage, alpha as f32)
}
