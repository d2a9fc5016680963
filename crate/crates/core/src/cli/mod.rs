//! Command-line front end. Each subcommand is also callable as a library
//! function taking a resolved [`PipelineConfig`] and a [`Workdir`].
//!
//! Settings are layered: built-in defaults, then the `--config` TOML file,
//! then `LIDKIT_DATASET_ROOT`, then flags.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration or range, 4 I/O, lock or
//! serialization, 5 audio decode, 6 corpus naming or insufficient data,
//! 7 artifact version or registry mismatch, 8 shape, 9 non-finite loss,
//! 10 degenerate or unstratified back-end batch, 11 enrollment precondition,
//! 12 empty input.

mod commands;
mod config;
mod workdir;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    enroll, evaluate, fit_backend, identify, prepare, train, EnrollSummary, EpochRecord,
    EvaluationReport, FitSummary, IdentifyRecord, Identifier, PrepareSummary, TrainSummary,
};
pub use config::{PipelineConfig, RegistrySpec};
pub use workdir::{write_if_changed, FeatureSource, Workdir, WorkdirLock};

use crate::backend::Pooling;
use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
use crate::error::{LidError, Result};

#[derive(Debug, Parser)]
#[command(name = "lidkit", version, about = "Open-set spoken language identification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding all artifacts.
    #[arg(long, global = true, default_value = "lidkit-work")]
    pub workdir: PathBuf,
    #[arg(long, global = true, env = "LIDKIT_DATASET_ROOT")]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub segment_s: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_segments: Option<usize>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub novelty_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub min_enroll: Option<usize>,
    #[arg(long, global = true, value_parser = parse_pooling)]
    pub pooling: Option<Pooling>,
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    match s {
        "concat" => Ok(Pooling::Concat),
        "mean" => Ok(Pooling::Mean),
        _ => Err(format!("unknown pooling {s:?} (concat or mean)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan the dataset, extract features and write the split manifest.
    Prepare,
    /// Train the TDNN on the in-set training split.
    Train,
    /// Fit the LDA/pLDA ensemble on the back-end split.
    FitBackend,
    /// Identify the language of audio files (JSON lines on stdout).
    Identify {
        #[arg(required = true)]
        audio: Vec<PathBuf>,
        /// Ensemble file; the latest version in the workdir by default.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Add a language to the back-end from a directory of recordings.
    Enroll {
        #[arg(long)]
        code: String,
        #[arg(long)]
        audio_dir: PathBuf,
    },
    /// Score the test split and write reports.
    Evaluate {
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Write a synthetic corpus in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        languages: usize,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 2.0)]
        minutes: f64,
    },
}

impl GlobalArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.dataset_root {
            cfg.dataset_root = Some(v.clone());
        }
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$($target).+ = v; })*
            };
        }
        set!(
            seed => seed,
            tau => tau,
            segment_s => segment.segment_s,
            epochs => train.epochs,
            batch_size => train.batch_size,
            lr => train.optimizer.lr,
            batch_segments => backend.batch_segments,
            k => backend.k,
            novelty_threshold => backend.novelty_threshold,
            min_enroll => backend.min_enroll,
            pooling => backend.pooling,
            top_n => top_n,
        );
        cfg.resolve()
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| LidError::io("<stdout>", e))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Synth {
        out,
        languages,
        speakers,
        minutes,
    } = &cli.command
    {
        let spec = SyntheticSpec::new(*languages, *speakers, *minutes, cli.global.seed.unwrap_or(0));
        let corpus = generate_synthetic_corpus(&spec, out)?;
        return print_json(&serde_json::json!({
            "root": corpus.root,
            "languages": corpus.languages,
            "utterances": corpus.utterances.len(),
        }));
    }
    let cfg = cli.global.resolve()?;
    let wd = Workdir::new(&cli.global.workdir);
    match cli.command {
        Command::Prepare => print_json(&prepare(&cfg, &wd)?),
        Command::Train => print_json(&train(&cfg, &wd)?),
        Command::FitBackend => print_json(&fit_backend(&cfg, &wd)?),
        Command::Identify { audio, ensemble } => {
            let records = identify(&cfg, &wd, &audio, ensemble.as_deref())?;
            let mut out = std::io::stdout().lock();
            for r in records {
                writeln!(out, "{}", serde_json::to_string(&r)?)
                    .map_err(|e| LidError::io("<stdout>", e))?;
            }
            Ok(())
        }
        Command::Enroll { code, audio_dir } => print_json(&enroll(&cfg, &wd, &code, &audio_dir)?),
        Command::Evaluate { ensemble } => {
            let r = evaluate(&cfg, &wd, ensemble.as_deref())?;
            print_json(&serde_json::json!({
                "in_set_accuracy": r.in_set.accuracy,
                "top_n": r.in_set.top_n_accuracies,
                "out_of_set_accuracy": r.out_of_set.accuracy,
                "eer": r.det.eer,
                "eer_threshold": r.det.eer_threshold,
                "max_total_accuracy": r.sweep.max_accuracy,
                "argmax_threshold": r.sweep.argmax_threshold,
                "utterance_accuracy": r.utterance_accuracy,
            }))
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
}
