use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use avsl_core::dataio::SyntheticSpec;
use avsl_core::evalkit::EvalMode;
use avsl_core::losses::Alignment;
use avsl_core::pipeline::{cmd_caption, cmd_eval, cmd_synth, cmd_train, cmd_visualize, RunConfig};
use avsl_core::{selftest, Error};
use clap::{Parser, Subcommand, ValueEnum};

/// Object-aware audio-visual sound source localisation.
#[derive(Parser)]
#[command(name = "avsl", version)]
struct Cli {
    /// Log filter, e.g. "info" or "avsl_core=debug".
    #[arg(long, default_value = "info", global = true)]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes-and-tones corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file holding a `[dataset.synthetic]` table; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duet: bool,
    },
    /// Fill the caption cache for every clip of the dataset.
    Caption {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the encoders.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace the object-aware alignment loss by plain contrastive alignment.
        #[arg(long)]
        no_oca: bool,
        /// Drop the region isolation loss.
        #[arg(long)]
        no_ori: bool,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint; without one the untrained model is scored.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "single")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Export heatmaps, overlays and sidecars for selected clips.
    Visualize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "clip", required = true)]
        clips: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn init_logging(filter: &str) {
    env_logger::Builder::new()
        .parse_filters(filter)
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_config(path: &PathBuf) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn emit(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            config,
            n_clips,
            seed,
            duet,
        } => {
            let mut spec = match &config {
                Some(p) => load_config(p)?.dataset.synthetic,
                None => SyntheticSpec::default(),
            };
            spec.n_clips = n_clips.unwrap_or(spec.n_clips);
            spec.seed = seed.unwrap_or(spec.seed);
            spec.duet |= duet;
            let manifest = cmd_synth(&spec, &out)?;
            log::info!("wrote {} clips, manifest {}", spec.n_clips, manifest.display());
        }
        Command::Caption { config } => emit(&cmd_caption(&load_config(&config)?, None)?)?,
        Command::Train {
            config,
            no_oca,
            no_ori,
            max_steps,
        } => {
            let mut cfg = load_config(&config)?;
            if no_oca {
                cfg.loss.alignment = Alignment::Contrastive;
            }
            if no_ori {
                cfg.loss.lambda2 = 0.0;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            emit(&cmd_train(&cfg)?)?;
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            format,
        } => {
            let mode = match mode {
                Mode::Single => EvalMode::Single,
                Mode::Multi => EvalMode::Multi,
            };
            let report = cmd_eval(&load_config(&config)?, checkpoint.as_deref(), mode)?;
            match format {
                Format::Table => print!("{}", report.to_table()),
                Format::Json => println!("{}", report.to_json()?),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::Visualize {
            config,
            checkpoint,
            clips,
            out,
        } => {
            let report = cmd_visualize(&load_config(&config)?, checkpoint.as_deref(), &clips, &out)?;
            emit(&report)?;
            if !report.missing.is_empty() {
                log::error!("unknown clips: {}", report.missing.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            log::error!("{e:#}");
            ExitCode::from(if validation { 2 } else { 3 })
        }
    }
}
