//! `kcl-engine`: generate corpora, train, evaluate and inspect runs.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including bad
//! arguments), 3 for data errors (unreadable or invalid corpora, checkpoints
//! and logs).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use kcl_core::corpus::{generate_synthetic, load_jsonl, save_jsonl, split_holdout};
use kcl_core::runlog::{diagnose, write_diagnostics};
use kcl_core::trainer::{evaluate, plan_for_inspection, train};
use kcl_core::{CorpusConfig, EncoderParams, SampleId, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "kcl-engine", version, about = "Knowledge-guided contrastive training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSONL.
    Gen {
        /// TOML file mirroring CorpusConfig; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing the run log and a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// TOML file mirroring TrainConfig; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Evaluate a checkpoint on every sample of a corpus; prints JSON.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
    },
    /// Print the batch plan a checkpoint would use for one epoch, as JSONL.
    InspectBatches {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epoch: usize,
        /// Training configuration used to plan; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-epoch loss and metric series from a run log, as CSV.
    Diagnose {
        #[arg(long)]
        log: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl From<kcl_core::Error> for Failure {
    fn from(e: kcl_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Serialize)]
struct BatchLine<'a> {
    epoch: usize,
    index: usize,
    kind: kcl_core::BatchKind,
    anchor_id: Option<SampleId>,
    sample_ids: &'a [SampleId],
    mean_pairwise_distance: Option<f64>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Config)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::Config)
}

fn load_checkpoint(path: &Path) -> CliResult<(EncoderParams, kcl_core::KnowledgeVocab)> {
    let ckpt = EncoderParams::load(path, None)?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| Failure::Data(anyhow!("{}: checkpoint has no concept vocabulary", path.display())))?;
    Ok((ckpt.params, vocab))
}

fn output_error(e: std::io::Error) -> Failure {
    Failure::Data(anyhow::Error::new(e).context("writing to stdout"))
}

fn run(cli: Cli) -> CliResult {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Gen { config, out: path } => {
            let config: CorpusConfig = read_config(config.as_deref())?;
            let corpus = generate_synthetic(&config)?;
            save_jsonl(&corpus, &path)?;
            eprintln!("wrote {} samples to {}", corpus.len(), path.display());
        }
        Command::Train {
            corpus,
            config,
            log,
            ckpt,
        } => {
            let config: TrainConfig = read_config(config.as_deref())?;
            config.validate()?;
            let samples = load_jsonl(&corpus)?;
            let mut model = train(&samples, &config)?;
            model.params.save(&ckpt, Some(&model.vocab))?;
            model.log.checkpoint = Some(ckpt.display().to_string());
            model.log.write_csv(&log)?;
            if let Some(e) = model.log.last_eval() {
                eprintln!(
                    "epoch {}: t2v R@1 {:.3} R@5 {:.3} R@10 {:.3} MedR {}",
                    e.epoch, e.t2v.r1, e.t2v.r5, e.t2v.r10, e.t2v.med_r
                );
            }
        }
        Command::Eval {
            corpus,
            ckpt,
            alpha,
            beta,
        } => {
            if !(alpha > 0.0 && beta > 0.0) {
                return Err(Failure::Config(anyhow!("alpha and beta must be positive")));
            }
            let samples = load_jsonl(&corpus)?;
            let (params, _) = load_checkpoint(&ckpt)?;
            let report = evaluate(&samples, &params, alpha, beta)?;
            let json = serde_json::to_string(&report).map_err(|e| Failure::Data(e.into()))?;
            writeln!(out, "{json}").map_err(output_error)?;
        }
        Command::InspectBatches {
            corpus,
            ckpt,
            epoch,
            config,
        } => {
            let config: TrainConfig = read_config(config.as_deref())?;
            config.validate()?;
            let samples = load_jsonl(&corpus)?;
            let (train_set, _) = split_holdout(&samples, config.holdout_fraction)?;
            let (params, vocab) = load_checkpoint(&ckpt)?;
            let (plan, memory) = plan_for_inspection(&train_set, &params, &vocab, &config, epoch)?;
            for (index, batch) in plan.batches.iter().enumerate() {
                let line = BatchLine {
                    epoch,
                    index,
                    kind: batch.kind,
                    anchor_id: batch.anchor_id,
                    sample_ids: &batch.sample_ids,
                    mean_pairwise_distance: batch.mean_pairwise_distance(&memory),
                };
                let json = serde_json::to_string(&line).map_err(|e| Failure::Data(e.into()))?;
                writeln!(out, "{json}").map_err(output_error)?;
            }
        }
        Command::Diagnose { log } => {
            let rows = diagnose(&log)?;
            write_diagnostics(&rows, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
