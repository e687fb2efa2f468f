//! Command-line front end. Every command reads a JSON experiment config,
//! writes its outputs into a run directory through a staging area, and
//! leaves a resolved copy of the config next to them.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod staging;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Parser, Subcommand};

pub use commands::{
    analyze_cmd, dreca_cmd, eval_cmd, finetune_cmd, gen_data, train_cmd, CellResult, Experiment, Splits, Summary,
    CHECKPOINT_FILE, CONFIG_FILE, FINETUNED_FILE, FINETUNE_METRICS_FILE, LABELS_FILE, MANIFEST_FILE, METRICS_FILE,
    SPEC_FILE, SUMMARY_FILE,
};
pub use config::{
    AnalysisPlan, Cell, DataConfig, DataSource, DrecaPlan, EvalPlan, ExperimentConfig, MethodChoice, PrototypeSource,
    QueueConfig,
};
pub use staging::Stage;

use crate::corpus::SyntheticSpec;
use crate::error::{Error, ErrorKind};

pub const OUTPUT_DIR_ENV: &str = "XMETA_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "xmeta", version, about = "Cross-lingual meta-learning experiments at desk scale")]
pub struct Cli {
    /// Run directory; overrides the config's `output_dir`.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one JSONL file per synthetic language plus the label list.
    GenData {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Meta-train from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// DReCa tasks from a previous `dreca` run instead of fresh clustering.
        #[arg(long)]
        dreca_manifest: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the target training split.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate the zero-shot / fine-tuned grid on the target test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PCA, layer CCA and Hausdorff distances between two checkpoints.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        before: PathBuf,
        /// Defaults to `before`.
        #[arg(long)]
        after: Option<PathBuf>,
    },
    /// Cluster the auxiliary data into DReCa tasks and write the manifest.
    Dreca {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn output_dir(flag: Option<&Path>, config: Option<&ExperimentConfig>) -> Result<PathBuf, Error> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| Error::InvalidConfig(format!("no output directory: pass --output-dir or set {OUTPUT_DIR_ENV}")))
}

fn load_spec(path: &Path) -> Result<SyntheticSpec, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Runs one command and returns the run directory.
pub fn run(cli: &Cli) -> anyhow::Result<PathBuf> {
    let flag = cli.output_dir.as_deref();
    let load = ExperimentConfig::load;
    match &cli.command {
        Command::GenData { spec } => {
            let spec = load_spec(spec)?;
            let out = output_dir(flag, None)?;
            gen_data(&spec, &out).context("gen-data")?;
            Ok(out)
        }
        Command::Train { config, dreca_manifest } => {
            let c = load(config)?;
            let out = output_dir(flag, Some(&c))?;
            train_cmd(&c, &out, dreca_manifest.as_deref()).context("train")?;
            Ok(out)
        }
        Command::Finetune { config, checkpoint } => {
            let c = load(config)?;
            let out = output_dir(flag, Some(&c))?;
            finetune_cmd(&c, checkpoint, &out).context("finetune")?;
            Ok(out)
        }
        Command::Eval { config, checkpoint } => {
            let c = load(config)?;
            let out = output_dir(flag, Some(&c))?;
            eval_cmd(&c, checkpoint, &out).context("eval")?;
            Ok(out)
        }
        Command::Analyze { config, before, after } => {
            let c = load(config)?;
            let out = output_dir(flag, Some(&c))?;
            analyze_cmd(&c, before, after.as_deref(), &out).context("analyze")?;
            Ok(out)
        }
        Command::Dreca { config, checkpoint } => {
            let c = load(config)?;
            let out = output_dir(flag, Some(&c))?;
            dreca_cmd(&c, checkpoint.as_deref(), &out).context("dreca")?;
            Ok(out)
        }
    }
}

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) | None => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
    }
}
