use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use merc_core::config::{Ablation, Config};
use merc_core::data::{load_dataset, synth_generate, write_dataset, Dataset, SynthSpec};
use merc_core::math::GradCheckOptions;
use merc_core::model::{gradient_check, Model, ModelShape};
use merc_core::train::{ablation_study, evaluate, train_with, write_jsonl, Checkpoint};
use merc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "merc", version, about = "Disentangled dual-branch graph model for emotion recognition in conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct Source {
    /// Generate the synthetic toy dataset from the config's `synth_*` keys.
    #[arg(long)]
    synth: bool,
    /// Read a dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint; step metrics go to stdout as JSON lines.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a two-conversation synthetic set.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the full model and each listed single ablation on a held-out split.
    Ablate {
        /// Component to disable: decoupler, shared_branch, private_branch, transformer_fusion.
        #[arg(long = "flag", required = true)]
        flags: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        source: Source,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_source(source: &Source, cfg: &Config) -> Result<Dataset> {
    match &source.data {
        Some(path) => load_dataset(path),
        None => synth_generate(&SynthSpec::from_config(cfg), cfg.seed),
    }
}

fn emit<T: Serialize>(record: &T) -> Result<()> {
    write_jsonl(&mut std::io::stdout().lock(), std::slice::from_ref(record))
}

#[derive(Serialize)]
struct EvalLine<'a> {
    split: &'a str,
    #[serde(flatten)]
    report: &'a merc_core::train::EvalReport,
}

#[derive(Serialize)]
struct GradcheckLine {
    max_relative_error: f64,
    /// Worst relative error among entries whose discrepancy exceeds the rounding noise.
    max_resolved_error: f64,
    checked: usize,
    measurable: usize,
    tolerance: f64,
    passed: bool,
    worst_param: Option<String>,
    worst_analytic: Option<f64>,
    worst_numeric: Option<f64>,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, source, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_source(&source, &cfg)?;
            let mut stdout = std::io::stdout().lock();
            let mut io_err = None;
            let outcome = train_with(&cfg, &data, |rec| {
                if io_err.is_none() {
                    io_err = write_jsonl(&mut stdout, std::slice::from_ref(rec)).err();
                }
            });
            drop(stdout);
            if let Some(e) = io_err {
                return Err(e);
            }
            let outcome = match outcome {
                Err(Error::Diverged { step, last_finite }) => {
                    last_finite.save(&out)?;
                    log::error!("diverged at step {step}; wrote last finite checkpoint to {}", out.display());
                    return Err(Error::Diverged { step, last_finite });
                }
                r => r?,
            };
            outcome.checkpoint.save(&out)?;
            let report = evaluate(&outcome.model()?, &data)?;
            emit(&EvalLine { split: "train", report: &report })?;
            Ok(true)
        }
        Command::Eval { ckpt, data } => {
            let model = Checkpoint::load(&ckpt)?.into_model()?;
            let data = load_dataset(&data)?;
            let report = evaluate(&model, &data)?;
            emit(&EvalLine { split: "eval", report: &report })?;
            Ok(true)
        }
        Command::Gradcheck { config, tolerance } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.synth_conversations = 2;
            let data = synth_generate(&SynthSpec::from_config(&cfg), cfg.seed)?;
            let mut model = Model::new(cfg.clone(), ModelShape::of(&data))?;
            let opts = GradCheckOptions {
                h: cfg.gradcheck_h,
                samples: cfg.gradcheck_samples,
                seed: cfg.seed,
            };
            let r = gradient_check(&mut model, &data, opts)?;
            let passed = r.max_relative_error < tolerance;
            let worst = r.worst.clone();
            emit(&GradcheckLine {
                max_relative_error: r.max_relative_error,
                max_resolved_error: r.max_resolved_error(),
                checked: r.checked,
                measurable: r.measurable(),
                tolerance,
                passed,
                worst_param: worst.as_ref().map(|w| w.0.clone()),
                worst_analytic: worst.as_ref().map(|w| w.2),
                worst_numeric: worst.as_ref().map(|w| w.3),
            })?;
            Ok(passed)
        }
        Command::Synth { out, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = synth_generate(&SynthSpec::from_config(&cfg), seed)?;
            write_dataset(&data, &out)?;
            log::info!("wrote {} conversations to {}", data.conversations.len(), out.display());
            Ok(true)
        }
        Command::Ablate { flags, config, source } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_source(&source, &cfg)?;
            let flags = flags.iter().map(|f| Ablation::parse(f)).collect::<Result<Vec<_>>>()?;
            for r in ablation_study(&cfg, &data, &flags)? {
                emit(&r)?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
