//! Command-line front end: corpus synthesis, both training stages,
//! enhancement, evaluation and the self-check suite.

mod commands;
mod config;

pub use commands::{
    cmd_enhance, cmd_eval, cmd_selfcheck, cmd_synth_corpus, cmd_train_emg, cmd_train_se, AuxSource,
    EnhanceArgs, EvalArgs, EvalSystem, TrainEmgArgs, TrainSeArgs,
};
pub use config::{extract_overrides, RunConfig, FULL_SCALE_STEPS};

use crate::checkpoint::CheckpointError;
use crate::corpus::CorpusError;
use crate::dsp::DspError;
use crate::emg::EmgError;
use crate::kv::KvError;
use crate::metrics::MetricError;
use crate::se::SeError;
use crate::tensor::TensorError;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0} self-check(s) failed")]
    CheckFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
            CliError::CheckFailed(_) => 6,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Domain { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        match e {
            DspError::Config(m) => CliError::Config(m),
            DspError::Io(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => e.into(),
            CheckpointError::Format(m) => CliError::Input(format!("malformed checkpoint: {m}")),
            CheckpointError::Mismatch(m) => {
                CliError::Config(format!("checkpoint does not fit: {m}"))
            }
            CheckpointError::Config(e) => e.into(),
        }
    }
}

impl From<EmgError> for CliError {
    fn from(e: EmgError) -> Self {
        match e {
            EmgError::Config(m) => CliError::Config(m),
            EmgError::Numeric(m) => CliError::Numeric(m),
            EmgError::Tensor(e) => e.into(),
            EmgError::Dsp(e) => e.into(),
            EmgError::Checkpoint(e) => e.into(),
            EmgError::Io(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SeError> for CliError {
    fn from(e: SeError) -> Self {
        match e {
            SeError::Config(m) => CliError::Config(m),
            SeError::Input(m) => CliError::Input(m),
            SeError::Numeric(m) => CliError::Numeric(m),
            SeError::Tensor(e) => e.into(),
            SeError::Dsp(e) => e.into(),
            SeError::Checkpoint(e) => e.into(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(m) => CliError::Config(m),
            CorpusError::Dsp(e) => e.into(),
            CorpusError::Emg(e) => e.into(),
            CorpusError::Io(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Dsp(e) => e.into(),
            MetricError::Io(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "emgse",
    version,
    about = "EMG-assisted speech enhancement: corpus synthesis, training, enhancement and evaluation",
    after_help = "Any configuration key can be overridden with `--section.key value`, e.g. `--se.num_tf_blocks 1`."
)]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its split manifests.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Also write every noisy mixture as a WAV file.
        #[arg(long)]
        write_noisy: bool,
    },
    /// Train the EMG-to-speech stage.
    TrainEmg {
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint (best validation loss).
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Train and validate on the first N training utterances only.
        #[arg(long)]
        overfit: Option<usize>,
    },
    /// Train the enhancement network.
    TrainSe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint that turns EMG into the auxiliary speech input.
        #[arg(long, conflicts_with = "oracle")]
        stage1: Option<PathBuf>,
        /// Feed clean speech into the auxiliary branch instead of Stage 1.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Train and validate on the first N training mixtures only.
        #[arg(long)]
        overfit: Option<usize>,
    },
    /// Enhance one noisy recording.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// EMG recording (`.emg8`), converted through `--stage1`.
        #[arg(long, requires = "stage1", conflicts_with = "aux")]
        emg: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Auxiliary speech WAV used directly (e.g. an oracle reference).
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Clean reference; prints STOI and SI-SDR when given.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Debug identity path: unit mask and noisy phase.
        #[arg(long)]
        pass_through: bool,
    },
    /// Score the noisy baseline and trained systems on both test conditions.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// `NAME=CHECKPOINT`, repeatable.
        #[arg(long = "system")]
        systems: Vec<String>,
        #[arg(long, conflicts_with = "oracle")]
        stage1: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suite.
    Selfcheck {
        /// Perturb one backward rule; the gradient checks must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<String>) -> Result<(), CliError> {
    let (rest, overrides) = extract_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::SynthCorpus { out, write_noisy } => {
            cmd_synth_corpus(&cfg, &out, write_noisy).map(|_| ())
        }
        Command::TrainEmg {
            corpus,
            out,
            log,
            overfit,
        } => cmd_train_emg(
            &cfg,
            &TrainEmgArgs {
                corpus,
                out,
                log,
                overfit,
            },
        )
        .map(|_| ()),
        Command::TrainSe {
            corpus,
            out,
            stage1,
            oracle,
            log,
            overfit,
        } => {
            let aux = match (stage1, oracle) {
                (Some(p), _) => Some(AuxSource::Stage1(p)),
                (None, true) => Some(AuxSource::Oracle),
                (None, false) => None,
            };
            cmd_train_se(
                &cfg,
                &TrainSeArgs {
                    corpus,
                    out,
                    aux,
                    log,
                    overfit,
                },
            )
            .map(|_| ())
        }
        Command::Enhance {
            checkpoint,
            noisy,
            emg,
            stage1,
            aux,
            clean,
            out,
            pass_through,
        } => cmd_enhance(&EnhanceArgs {
            checkpoint,
            noisy,
            emg,
            stage1,
            aux,
            clean,
            out,
            pass_through,
        })
        .map(|_| ()),
        Command::Eval {
            corpus,
            systems,
            stage1,
            oracle,
            out,
        } => {
            let systems = systems
                .iter()
                .map(|s| EvalSystem::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            let aux = match (stage1, oracle) {
                (Some(p), _) => Some(AuxSource::Stage1(p)),
                (None, true) => Some(AuxSource::Oracle),
                (None, false) => None,
            };
            cmd_eval(
                &cfg,
                &EvalArgs {
                    corpus,
                    systems,
                    aux,
                    out,
                },
            )
            .map(|_| ())
        }
        Command::Selfcheck { inject_fault } => cmd_selfcheck(inject_fault).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Config(String::new()).exit_code(),
            CliError::Input(String::new()).exit_code(),
            CliError::Numeric(String::new()).exit_code(),
            CliError::Io(String::new()).exit_code(),
            CliError::CheckFailed(1).exit_code(),
        ];
        let mut sorted = codes.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert!(codes.iter().all(|&c| c != 0));
    }

    #[test]
    fn usage_errors_are_config_errors() {
        let args = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(matches!(
            run(args(&["emgse", "no-such-command"])),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            run(args(&["emgse", "selfcheck", "--se.bogus", "1"])),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn domain_errors_map_to_numeric() {
        let e: CliError = SeError::Tensor(TensorError::Domain {
            op: "log",
            detail: "x".into(),
        })
        .into();
        assert_eq!(e.exit_code(), 4);
    }
}
