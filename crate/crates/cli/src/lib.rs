//! The `maccif` command line: argument parsing, run configuration and one
//! function per subcommand.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use maccif_core::{Error, Result};

pub use config::{Paths, Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "maccif", version, about = "Speaker embeddings with multi-head attentive pooling")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set network.channels=64` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for initialization, batching and the synthetic corpus
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Require bitwise-reproducible execution (always single-threaded f64 here)
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its loss trace and checkpoints
    Train {
        /// Train on the generated speaker corpus instead of `paths.corpus_dir`
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Write the held-out synthetic set: features, utterance list and trials
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract one embedding file per utterance
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance list, one path per line (defaults to the trial list's utterances)
        #[arg(long)]
        utts: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Feature cache directory (defaults to `paths.feature_cache`)
        #[arg(long)]
        features: Option<PathBuf>,
        /// Root that list paths are relative to (defaults to `paths.corpus_dir`)
        #[arg(long)]
        audio_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score a trial list
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print EER and MinDCF for a score file
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Also write the report line here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every analytic gradient against central finite differences
    Gradcheck {
        #[arg(long)]
        max_dim: Option<usize>,
    },
}

/// 1 usage or configuration, 2 bad data or files, 3 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Dimension { .. } => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    match cli.command {
        Command::Train { synthetic, out } => commands::train(&cfg, synthetic, c.deterministic, &out),
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Extract {
            checkpoint,
            utts,
            trials,
            features,
            audio_root,
            out,
        } => commands::extract(&commands::ExtractArgs {
            checkpoint,
            utts,
            trials: trials.or(cfg.paths.trial_list.clone()),
            features: features.or(cfg.paths.feature_cache.clone()),
            audio_root: audio_root.or(cfg.paths.corpus_dir.clone()),
            out,
        }),
        Command::Score { embeddings, trials, out } => {
            commands::score(&embeddings, &need_trials(trials, &cfg)?, &out)
        }
        Command::Eval { scores, trials, out } => {
            commands::eval(&scores, &need_trials(trials, &cfg)?, out.as_deref())
        }
        Command::Gradcheck { max_dim } => commands::gradcheck(c.seed.unwrap_or(0), max_dim.unwrap_or(8)),
    }
}

fn need_trials(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or(cfg.paths.trial_list.clone())
        .ok_or_else(|| Error::Config("no trial list: pass --trials or set paths.trial_list".into()))
}
