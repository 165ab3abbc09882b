//! Command-line pipeline runner: one subcommand per stage, artifacts under a
//! shared directory with a hashed manifest.

pub mod config;
pub mod error;
pub mod fixture;
pub mod stages;
pub mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use stages::{Outcome, Pipeline, StageFlags};
pub use store::{ArtifactStore, Stage};

#[derive(Debug, Parser)]
#[command(name = "fairflow", version, about = "Counterfactual data augmentation pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "fairflow.toml")]
    pub config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rebuild the stage even if it is up to date or was built with a different configuration.
    #[arg(long, global = true)]
    pub force: bool,
    /// Artifact directory; defaults to `artifacts` in the config.
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the attribute classifier and select attribute words.
    Discover,
    /// Train the disentangling flow on attribute-word embeddings.
    TrainFlow,
    /// Decode counterfactual word pairs and assemble the dictionary.
    BuildDict {
        /// Use this word-pair TSV instead of the discovered pairs.
        #[arg(long)]
        manual_dict: Option<PathBuf>,
    },
    /// Substitute and correct the corpus into source/target pairs.
    BuildParallel {
        /// Keep raw substitutions without mask-and-infill correction.
        #[arg(long)]
        no_correction: bool,
    },
    /// Train the counterfactual generator on the parallel corpus.
    TrainGenerator,
    /// Rewrite the evaluation corpus with the trained generator.
    Generate,
    /// Score fluency, attribute transfer and optional fairness metrics.
    Evaluate,
    /// Write a synthetic corpus and config to a directory.
    InitFixture {
        dir: PathBuf,
        #[arg(long, default_value_t = fixture::DEFAULT_TRAIN_SIZE)]
        train_size: usize,
        #[arg(long, default_value_t = fixture::DEFAULT_EVAL_SIZE)]
        eval_size: usize,
    },
}

impl Command {
    fn stage(&self) -> Option<(Stage, StageFlags)> {
        let plain = StageFlags::default();
        Some(match self {
            Command::Discover => (Stage::Discover, plain),
            Command::TrainFlow => (Stage::TrainFlow, plain),
            Command::BuildDict { manual_dict } => {
                (Stage::BuildDict, StageFlags { manual_dict: manual_dict.clone(), ..plain })
            }
            Command::BuildParallel { no_correction } => {
                (Stage::BuildParallel, StageFlags { no_correction: *no_correction, ..plain })
            }
            Command::TrainGenerator => (Stage::TrainGenerator, plain),
            Command::Generate => (Stage::Generate, plain),
            Command::Evaluate => (Stage::Evaluate, plain),
            Command::InitFixture { .. } => return None,
        })
    }
}

/// Runs one parsed command and returns the message to print.
pub fn execute(cli: &Cli) -> Result<String> {
    if let Command::InitFixture { dir, train_size, eval_size } = &cli.command {
        fixture::init_fixture(dir, *train_size, *eval_size, cli.seed.unwrap_or(0))?;
        return Ok(format!("fixture written to {}", dir.display()));
    }
    let (stage, flags) = cli.command.stage().expect("stage command");
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    let pipeline = Pipeline::new(cfg, cli.artifacts.clone(), cli.force)?;
    Ok(match pipeline.run(stage, &flags)? {
        Outcome::UpToDate => format!("{stage}: up to date"),
        Outcome::Completed { outputs } => format!("{stage}: done ({outputs} artifacts)"),
    })
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
