//! `reid`: synthetic data, training, embedding, evaluation and diagnostics.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use reid_core::config::{RunConfig, KEYS};
use reid_core::Error;

#[derive(Parser, Debug)]
#[command(name = "reid", version, about = "Multi-receptive-field attention re-identification: train, embed, evaluate")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Global seed; overrides `seed` from the file and `--set`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset of P6 images plus manifest.csv.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        ids: usize,
        #[arg(long, default_value_t = 4)]
        cameras: usize,
        #[arg(long, default_value_t = 25)]
        per_id: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
    },
    /// Train on the identities of a manifest kept by `data.train_fraction`.
    Train {
        /// Training manifest; overrides `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; overrides `train.out`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps (a checkpoint is written on stopping).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write eval-mode descriptors of a manifest as `<out>.vtns` plus `<out>.csv`.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_name = "STEM")]
        out: PathBuf,
        /// Which records to embed: all, or the query/gallery side of a split
        /// taking `--per-camera` images of every (identity, camera) as queries.
        #[arg(long, value_enum, default_value = "all")]
        part: commands::Part,
        #[arg(long, default_value_t = 1)]
        per_camera: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Score query embeddings against gallery embeddings (single-query protocol).
    Eval {
        #[arg(long, value_name = "STEM")]
        query: PathBuf,
        #[arg(long, value_name = "STEM")]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_rank: usize,
        /// Also write the full CMC curve as CSV.
        #[arg(long, value_name = "PATH")]
        cmc: Option<PathBuf>,
    },
    /// Write before/after images of the training augmentation and the attention masks.
    AugmentPreview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Network for the masks; a freshly initialized one when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and of the toy network objective.
    Gradcheck {
        #[arg(long, default_value_t = reid_core::gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Skip the end-to-end network check.
        #[arg(long)]
        ops_only: bool,
    },
}

fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (default in brackets):\n");
    for (k, v, d) in KEYS {
        let shown = if v.is_empty() { "none" } else { v };
        s.push_str(&format!("  {k:<width$}  {d} [{shown}]\n"));
    }
    s.push_str("\nExit status: 0 success, 1 usage error, 2 runtime error.");
    s
}

/// Defaults, then the config file, then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> reid_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Usage(format!("cannot read config: {e}")),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.set_assignment(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(keys_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Usage(_)) => {
            eprintln!("reid: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("reid: {e}");
            ExitCode::from(2)
        }
    }
}
