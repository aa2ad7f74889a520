//! `condsynth` command-line pipelines: corpus generation, training,
//! synthesis, analysis, named experiments and the play server.

pub mod commands;
pub mod config;
pub mod logging;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use condsynth_core::experiments::Experiment;

pub use config::{parse_config, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {what}: {}", path.display())]
    MissingInput { what: &'static str, path: PathBuf },
    #[error("{0} is required for this command")]
    Required(&'static str),
    #[error(transparent)]
    Core(#[from] condsynth_core::Error),
    #[error(transparent)]
    Server(#[from] condsynth_server::ServerError),
    #[error(transparent)]
    Client(#[from] condsynth_client::ClientError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("experiment {name} failed: {}", failed.join("; "))]
    ExperimentFailed { name: String, failed: Vec<String> },
}

#[derive(Debug, Parser)]
#[command(name = "condsynth", version, about = "Conditioned autoregressive GRU sound synthesizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving the timestamped run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub duration: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the training corpus and write it to the run directory.
    GenCorpus,
    /// Train (or resume) a model; writes checkpoints and a loss CSV.
    Train,
    /// Generate audio from a checkpoint; writes WAV and the code stream.
    Synth {
        /// Render on a running play server, e.g. http://127.0.0.1:8080.
        #[arg(long)]
        server: Option<String>,
    },
    /// Pitch track and spectrogram of a WAV file.
    Analyze {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train, generate and check one of the named experiments.
    Experiment {
        /// single-pitch, fig4-synthetic, fig5-synthetic, no-drift or fig7c.
        name: Option<Experiment>,
    },
    /// Run the play server.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        let mut o = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            steps: self.steps,
            checkpoint: self.checkpoint.clone(),
            duration: self.duration,
            ..Default::default()
        };
        match &self.command {
            Command::Synth { server } => o.server = server.clone(),
            Command::Analyze { input } => o.input = input.clone(),
            Command::Experiment { name } => o.experiment = *name,
            Command::Serve { addr } => o.addr = addr.clone(),
            Command::GenCorpus | Command::Train => {}
        }
        o
    }
}

/// Loads the config and runs the command. Returns the run directory for
/// commands that produce one.
pub fn run(cli: &Cli) -> Result<Option<PathBuf>, CliError> {
    let bytes = match &cli.config {
        Some(path) => std::fs::read(path).map_err(|_| CliError::MissingInput {
            what: "config file",
            path: path.clone(),
        })?,
        None => Vec::new(),
    };
    let config = parse_config(&bytes, &cli.overrides())?;
    let base_dir = cli.config.as_ref().and_then(|p| p.parent()).map(PathBuf::from);
    let ctx = commands::Context {
        config,
        base_dir,
        steps_override: cli.steps,
    };
    match &cli.command {
        Command::GenCorpus => commands::gen_corpus(&ctx).map(Some),
        Command::Train => commands::train(&ctx).map(Some),
        Command::Synth { .. } => commands::synth(&ctx).map(Some),
        Command::Analyze { .. } => commands::analyze(&ctx).map(Some),
        Command::Experiment { .. } => commands::experiment(&ctx).map(Some),
        Command::Serve { .. } => commands::serve(&ctx).map(|_| None),
    }
}
