//! Batch pipeline behind the `cinetransfer` binary.
//!
//! Every stage is its own subcommand and reads only files: `synth` writes a
//! ground-truth scene and a ready `pipeline.json`, `retarget` animates the
//! character, `reshoot` refines the cameras, `compose-refine` renders and
//! refines the frames and `eval` scores the result.

pub mod config;
pub mod stages;

use clap::{Args, Parser, Subcommand};
use config::PipelineConfig;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, missing or unparsable input; nothing was written.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("stage failed: {0}")]
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cinetransfer", version, about = "Cinematic transfer pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the character to the canonical skeleton and animate it.
    Retarget(Common),
    /// Refine the camera trajectory against the shot's masks, keypoints and flow.
    Reshoot(Common),
    /// Render, composite over the environment and refine.
    ComposeRefine(Common),
    /// Score the retargeted character against a ground-truth bundle.
    Eval(Common),
    /// Generate a synthetic scene and a pipeline config for it.
    Synth(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Pipeline config (JSON); relative paths inside it are relative to the file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Debug logging.
    #[arg(long, short)]
    pub verbose: bool,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Retarget(c) | Command::Reshoot(c) | Command::ComposeRefine(c) | Command::Eval(c) | Command::Synth(c) => c,
        }
    }
}

/// Loads the config, applies the flags and runs one stage.
pub fn run(command: &Command) -> Result<(), CliError> {
    let common = command.common();
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    cfg.validate()?;

    let level = if common.verbose { log::LevelFilter::Debug } else { cfg.log_level.parse().unwrap_or(log::LevelFilter::Info) };
    // a second init (several runs in one process) keeps the first logger
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Stage(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Retarget(_) => stages::retarget(&cfg).map(drop),
        Command::Reshoot(_) => stages::reshoot(&cfg).map(drop),
        Command::ComposeRefine(_) => stages::compose_refine(&cfg).map(drop),
        Command::Eval(_) => stages::eval(&cfg).map(drop),
        Command::Synth(_) => stages::synth(&cfg).map(drop),
    })
}
