use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uneq_core::cli::{self, CliError, RunConfig};

/// Data-free adversarial training of twin generators.
#[derive(Parser)]
#[command(name = "uneq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set arrangement.distance_g1=l2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.overrides {
            config.apply_assignment(assignment)?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train both generators and the discriminator.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for metrics, checkpoints and previews.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a side-by-side interpolation from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Frame directory (default: `<out>/frames`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Summarize stability over sliding windows of a metrics file.
    Diagnose {
        metrics: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(command: Command) -> Result<i32, CliError> {
    let mut stdout = io::stdout().lock();
    match command {
        Command::Train {
            config,
            out,
            steps,
            resume,
        } => {
            let mut run = config.load()?;
            if let Some(seed) = config.seed {
                run.train.seed = seed;
            }
            if let Some(out) = out {
                run.out_dir = out;
            }
            if let Some(steps) = steps {
                run.train.steps = steps;
            }
            let summary = cli::cmd_train(&run, resume.as_deref())?;
            let _ = writeln!(
                stdout,
                "trained steps {}..{}; checkpoint {}; metrics {}",
                summary.first_step,
                summary.last_step,
                summary.checkpoint.display(),
                summary.metrics.display()
            );
        }
        Command::Render {
            checkpoint,
            config,
            out,
        } => {
            let mut run = config.load()?;
            if let Some(seed) = config.seed {
                run.render.keyframe_seed = seed;
            }
            run.validate()?;
            let out = out.unwrap_or_else(|| run.out_dir.join("frames"));
            let manifest = cli::cmd_render(&checkpoint, &run.render, &out)?;
            let _ = writeln!(
                stdout,
                "wrote {} frames of {}x{} to {}",
                manifest.frames,
                manifest.width,
                manifest.height,
                out.display()
            );
        }
        Command::Gradcheck {
            seed,
            seeds,
            corrupt,
        } => {
            let report = cli::cmd_gradcheck(seed, seeds, corrupt.as_deref())?;
            let _ = cli::print_gradcheck(&mut stdout, &report);
            if !report.passed() {
                return Ok(cli::EXIT_CHECK_FAILED);
            }
        }
        Command::Diagnose { metrics, config } => {
            let mut run = config.load()?;
            if let Some(seed) = config.seed {
                run.train.seed = seed;
            }
            run.validate()?;
            let report = cli::cmd_diagnose(&metrics, &run.train)?;
            let _ = cli::print_diagnose(&mut stdout, &report);
        }
    }
    Ok(cli::EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNEQ_LOG", "warn")).init();
    let args = Cli::parse();
    let code = match run(args.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
