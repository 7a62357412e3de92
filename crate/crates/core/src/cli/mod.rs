//! The four commands behind the `uneq` binary. Each returns a typed result
//! so the binary only has to print and pick an exit code.

mod config;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::networks::GrowthState;
use crate::oracle::{self, CaseResult};
use crate::render::{self, Manifest, RenderError, RenderPlan};
use crate::training::checkpoint::{checkpoint_load, checkpoint_read, checkpoint_save, CheckpointError};
use crate::training::{
    diagnose_series, read_metrics, train_step, write_metrics_line, DiagnoseReport, DiagnosticsRecord, MetricsError,
    Status, TrainConfig, TrainError, TrainState,
};

pub use config::{RenderSettings, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read config file {path}: {source}")]
    ConfigFile { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Checkpoint { path: String, source: CheckpointError },
    #[error("{path}: {source}")]
    Metrics { path: String, source: MetricsError },
    #[error("{path}: no metrics records (need at least 2)")]
    NoRecords { path: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("training stopped at step {step}: {reason}")]
    Numeric { step: u64, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigFile { .. } => EXIT_CONFIG,
            CliError::Render(RenderError::Invalid(_)) => EXIT_CONFIG,
            CliError::Numeric { .. } => EXIT_NUMERIC,
            CliError::Io { .. }
            | CliError::Checkpoint { .. }
            | CliError::Metrics { .. }
            | CliError::NoRecords { .. }
            | CliError::Render(_) => EXIT_IO,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn checkpoint_error(path: &Path) -> impl FnOnce(CheckpointError) -> CliError + '_ {
    move |source| CliError::Checkpoint {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Keeps the metrics lines written before `step` so a resumed run
/// continues the same file.
fn reopen_metrics(path: &Path, step: u64) -> Result<BufWriter<File>, CliError> {
    let mut kept = Vec::new();
    if step > 0 && path.exists() {
        let reader = BufReader::new(File::open(path).map_err(io_error(path))?);
        for line in reader.lines() {
            let line = line.map_err(io_error(path))?;
            let record: DiagnosticsRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(_) => continue,
            };
            if record.step < step {
                kept.push(line);
            }
        }
    }
    let mut out = BufWriter::new(File::create(path).map_err(io_error(path))?);
    for line in kept {
        writeln!(out, "{line}").map_err(io_error(path))?;
    }
    Ok(out)
}

fn write_preview(state: &TrainState, growth: GrowthState, path: &Path) -> Result<(), CliError> {
    let (p1, p2) = state.probes();
    let dim = p1.shape()[1];
    let frame = render::render_frame((&state.g1, &state.g2), &p1.data()[..dim], &p2.data()[..dim], growth)?;
    render::write_frame(&frame, path)?;
    Ok(())
}

fn train_failure(step: u64, e: TrainError) -> CliError {
    match e {
        TrainError::Config(msg) => CliError::Config(msg),
        other => CliError::Numeric {
            step,
            reason: other.to_string(),
        },
    }
}

/// Trains until `config.train.steps` or until EXPLODING has persisted for
/// `diag_window` consecutive records. Writes metrics, periodic checkpoints
/// under `checkpoints/`, optional previews under `previews/`, and the
/// latest state as `checkpoint.ckpt` in the output directory.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    config.validate()?;
    let cfg = &config.train;
    let out = &config.out_dir;
    let ckpt_dir = out.join("checkpoints");
    let preview_dir = out.join("previews");
    fs::create_dir_all(&ckpt_dir).map_err(io_error(&ckpt_dir))?;
    if config.preview {
        fs::create_dir_all(&preview_dir).map_err(io_error(&preview_dir))?;
    }

    let mut state = match resume {
        Some(path) => checkpoint_load(path, cfg).map_err(checkpoint_error(path))?,
        None => TrainState::new(cfg).map_err(|e| train_failure(0, e))?,
    };
    let metrics_path = config.metrics_path();
    if let Some(parent) = metrics_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    let mut metrics = reopen_metrics(&metrics_path, state.step)?;
    let first_step = state.step;
    let latest = out.join("checkpoint.ckpt");
    log::info!("training from step {} to {} into {}", state.step, cfg.steps, out.display());

    let mut exploding_run = 0usize;
    while state.step < cfg.steps {
        let record = train_step(&mut state, cfg).map_err(|e| train_failure(state.step, e))?;
        write_metrics_line(&mut metrics, &record).map_err(io_error(&metrics_path))?;
        exploding_run = if record.status == Status::Exploding {
            exploding_run + 1
        } else {
            0
        };

        if state.step % cfg.checkpoint_every == 0 {
            metrics.flush().map_err(io_error(&metrics_path))?;
            let path = ckpt_dir.join(checkpoint_name(state.step));
            checkpoint_save(&state, cfg, &path).map_err(checkpoint_error(&path))?;
            if config.preview {
                let growth = GrowthState::new(record.stage, record.alpha);
                write_preview(&state, growth, &preview_dir.join(format!("step_{:08}.ppm", state.step)))?;
            }
            log::info!(
                "step {} stage {} alpha {:.2} loss_d {:.4} loss_g1 {:.4} loss_g2 {:.4} {}",
                state.step,
                record.stage,
                record.alpha,
                record.loss_d,
                record.loss_g1,
                record.loss_g2,
                record.status.as_str()
            );
        }

        if exploding_run >= cfg.diag_window {
            metrics.flush().map_err(io_error(&metrics_path))?;
            checkpoint_save(&state, cfg, &latest).map_err(checkpoint_error(&latest))?;
            log::warn!("EXPLODING for {exploding_run} consecutive steps, stopping");
            return Err(CliError::Numeric {
                step: state.step,
                reason: format!("EXPLODING persisted for {exploding_run} steps"),
            });
        }
    }
    metrics.flush().map_err(io_error(&metrics_path))?;
    checkpoint_save(&state, cfg, &latest).map_err(checkpoint_error(&latest))?;
    Ok(TrainSummary {
        first_step,
        last_step: state.step,
        checkpoint: latest,
        metrics: metrics_path,
    })
}

/// Renders the configured plan from `checkpoint` into `out_dir`. Nothing
/// is written unless the checkpoint loads.
pub fn cmd_render(checkpoint: &Path, settings: &RenderSettings, out_dir: &Path) -> Result<Manifest, CliError> {
    let (g1, g2) = checkpoint_read(checkpoint)
        .and_then(|raw| raw.generators())
        .map_err(checkpoint_error(checkpoint))?;
    let mut keyframes =
        render::sample_keyframes(settings.keyframe_seed, settings.keyframes, g1.config().latent_dim)?;
    if settings.shared_latents {
        for k in &mut keyframes {
            k.z2 = k.z1.clone();
        }
    }
    let plan = RenderPlan {
        keyframes,
        frames_per_segment: settings.frames_per_segment,
        interpolation: settings.interpolation,
        looped: settings.looped,
    };
    Ok(render::render_with((&g1, &g2), &plan, settings.keyframe_seed, out_dir)?)
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub seeds: Vec<u64>,
    pub results: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CaseResult::passed)
    }
}

/// Runs every oracle case over `count` seeds starting at `seed`. `fault`
/// corrupts the backward pass of one op, for checking that the oracle
/// notices.
pub fn cmd_gradcheck(seed: u64, count: usize, fault: Option<&str>) -> Result<GradcheckReport, CliError> {
    if let Some(op) = fault {
        if !crate::tensor::OP_NAMES.contains(&op) {
            return Err(CliError::Config(format!("unknown op `{op}`")));
        }
    }
    let seeds = oracle::seeds_from(seed, count);
    let results = oracle::run_all(&seeds, fault).map_err(|e| CliError::Numeric {
        step: 0,
        reason: e.to_string(),
    })?;
    Ok(GradcheckReport { seeds, results })
}

pub fn print_gradcheck<W: Write>(out: &mut W, report: &GradcheckReport) -> io::Result<()> {
    writeln!(out, "{:<28} {:<8} {:>12}  result", "case", "kind", "max_rel_err")?;
    for r in &report.results {
        writeln!(
            out,
            "{:<28} {:<8} {:>12.3e}  {}",
            r.name,
            format!("{:?}", r.kind).to_lowercase(),
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        )?;
    }
    let failed = report.results.iter().filter(|r| !r.passed()).count();
    writeln!(
        out,
        "{} cases over {} seeds, {} failed (tolerance {:e})",
        report.results.len(),
        report.seeds.len(),
        failed,
        oracle::TOLERANCE
    )
}

/// Replays the stability rule over sliding windows of a metrics file.
pub fn cmd_diagnose(metrics: &Path, config: &TrainConfig) -> Result<DiagnoseReport, CliError> {
    let file = File::open(metrics).map_err(io_error(metrics))?;
    let records = read_metrics(BufReader::new(file)).map_err(|source| CliError::Metrics {
        path: metrics.display().to_string(),
        source,
    })?;
    diagnose_series(&records, config).ok_or_else(|| CliError::NoRecords {
        path: metrics.display().to_string(),
    })
}

pub fn print_diagnose<W: Write>(out: &mut W, report: &DiagnoseReport) -> io::Result<()> {
    writeln!(
        out,
        "{} records, {} windows of {}",
        report.records, report.windows, report.window
    )?;
    writeln!(out, "HEALTHY   {:.4}", report.healthy)?;
    writeln!(out, "EXPLODING {:.4}", report.exploding)?;
    writeln!(out, "STATIC    {:.4}", report.static_)?;
    writeln!(out, "dominant  {}", report.dominant().as_str())?;
    match report.first_transition {
        Some((step, from, to)) => writeln!(
            out,
            "first transition at step {step}: {} -> {}",
            from.as_str(),
            to.as_str()
        ),
        None => writeln!(out, "no transition"),
    }
}
