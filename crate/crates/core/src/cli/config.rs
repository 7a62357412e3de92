//! Run configuration: flat `key = value` lines with dotted sections,
//! `#` comments, and `--set key=value` overrides applied on top.
//!
//! ```text
//! seed = 7
//! steps = 500
//! arrangement.discriminator_mode = diametric
//! render.interpolation = slerp
//! ```

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::render::Interpolation;
use crate::training::TrainConfig;

use super::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub keyframes: usize,
    pub frames_per_segment: usize,
    pub interpolation: Interpolation,
    pub looped: bool,
    pub keyframe_seed: u64,
    /// Drive both generators from the same latent at every keyframe.
    pub shared_latents: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            keyframes: 4,
            frames_per_segment: 30,
            interpolation: Interpolation::Slerp,
            looped: false,
            keyframe_seed: 0,
            shared_latents: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub render: RenderSettings,
    pub out_dir: PathBuf,
    /// Defaults to `metrics.jsonl` inside `out_dir`.
    pub metrics: Option<PathBuf>,
    /// Write a preview frame at every checkpoint.
    pub preview: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            render: RenderSettings::default(),
            out_dir: PathBuf::from("run"),
            metrics: None,
            preview: true,
        }
    }
}

fn parse<T>(key: &str, value: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value
        .split(',')
        .map(|part| parse(key, part.trim()))
        .collect()
}

impl RunConfig {
    /// Reads `path` on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut config = Self::default();
        config.apply_text(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| match e {
                    CliError::Config(msg) => CliError::Config(format!("line {}: {msg}", n + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    /// Applies one `key=value` string, as given to `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        let a = &mut t.arrangement;
        let r = &mut self.render;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "lr_g" => t.lr_g = parse(key, value)?,
            "lr_d" => t.lr_d = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "max_stage" => t.max_stage = parse(key, value)?,
            "steps_per_stage" => t.steps_per_stage = parse(key, value)?,
            "fade_fraction" => t.fade_fraction = parse(key, value)?,
            "diag_window" => t.diag_window = parse(key, value)?,
            "explode_threshold" => t.explode_threshold = parse(key, value)?,
            "stasis_threshold" => t.stasis_threshold = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "latent_dim" => t.latent_dim = parse(key, value)?,
            "embed_dim" => t.embed_dim = parse(key, value)?,
            "channels" => t.channels = parse_list(key, value)?,
            "arrangement.discriminator_mode" => a.discriminator_mode = parse(key, value)?,
            "arrangement.generator_objective" => a.generator_objective = parse(key, value)?,
            "arrangement.distance_g1" => a.distance_g1 = parse(key, value)?,
            "arrangement.distance_g2" => a.distance_g2 = parse(key, value)?,
            "arrangement.diversity_weight" => a.diversity_weight = parse(key, value)?,
            "arrangement.diversity_margin" => a.diversity_margin = parse(key, value)?,
            "arrangement.diversity_measure" => a.diversity_measure = value.to_string(),
            "render.keyframes" => r.keyframes = parse(key, value)?,
            "render.frames_per_segment" => r.frames_per_segment = parse(key, value)?,
            "render.interpolation" => r.interpolation = parse(key, value)?,
            "render.loop" => r.looped = parse(key, value)?,
            "render.keyframe_seed" => r.keyframe_seed = parse(key, value)?,
            "render.shared_latents" => r.shared_latents = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "preview" => self.preview = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.render.keyframes < 2 {
            return Err(CliError::Config(format!(
                "render.keyframes must be >= 2, got {}",
                self.render.keyframes
            )));
        }
        if self.render.frames_per_segment == 0 {
            return Err(CliError::Config("render.frames_per_segment must be >= 1".into()));
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics
            .clone()
            .unwrap_or_else(|| self.out_dir.join("metrics.jsonl"))
    }
}
