//! Command-line parsing and dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands;
use crate::config::{parse_overrides, RunConfig, OUT_ENV};
use crate::dataset::Split;
use crate::{exit_code, CheckFailed, UsageError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "pointssm",
    version,
    about = "Point cloud classification with bidirectional state space models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes config.txt, metrics.csv and model.hemb.
    Train {
        /// Flat `key = value` config file; defaults to the desk recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `--key value` settings that override the config file.
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "OVERRIDES"
        )]
        overrides: Vec<String>,
    },
    /// Accuracy, per-class table and confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with manifest.csv; defaults to the checkpoint's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where confusion.csv goes; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and compute report, with the full-size enhancer deltas.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "OVERRIDES"
        )]
        overrides: Vec<String>,
    },
    /// Finite-difference gradient checks of every module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write synthetic clouds as XYZ files plus manifest.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        no_augment: bool,
    },
    /// Sample points uniformly from the surface of an OFF mesh.
    SampleOff {
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Config file (or defaults), then `env_out`, then command-line overrides.
pub fn resolve_config(
    config: Option<&Path>,
    env_out: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_text(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = env_out.filter(|d| !d.is_empty()) {
        cfg.out_dir = PathBuf::from(dir);
    }
    for (key, value) in parse_overrides(overrides).map_err(UsageError)? {
        cfg.set(&key, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let env_out = std::env::var(OUT_ENV).ok();
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = resolve_config(config.as_deref(), env_out.as_deref(), &overrides)?;
            commands::train(&cfg, out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out: dir,
        } => {
            let dir =
                dir.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            commands::eval(&checkpoint, data.as_deref(), &dir, out)?;
        }
        Command::Audit { config, overrides } => {
            let cfg = resolve_config(config.as_deref(), None, &overrides)?;
            if !commands::audit(&cfg.model, out)?.passed {
                return Err(CheckFailed("audit targets not met".into()).into());
            }
        }
        Command::Gradcheck {
            seed,
            seeds,
            inject_fault,
        } => {
            let report = commands::gradcheck(seed, seeds, inject_fault, out)?;
            let failed: Vec<_> = report
                .iter()
                .filter(|m| !m.passed())
                .map(|m| m.module)
                .collect();
            if !failed.is_empty() {
                return Err(CheckFailed(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                ))
                .into());
            }
        }
        Command::Synth {
            out: dir,
            per_class,
            seed,
            points,
            split,
            no_augment,
        } => {
            commands::synth(
                &dir,
                per_class,
                points,
                seed,
                split.into(),
                !no_augment,
                out,
            )?;
        }
        Command::SampleOff {
            input,
            n,
            seed,
            out: path,
        } => {
            commands::sample_off(&input, n, seed, &path, out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 {
                EXIT_OK
            } else {
                EXIT_USAGE
            };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            exit_code(&e)
        }
    }
}
