//! `elmo`: train, inspect and evaluate contextual word representations.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure (divergence or a failed `--assert` check).

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use elmo_core::error::Error;
use elmo_core::task::ElmoLocation;

#[derive(Parser, Debug)]
#[command(name = "elmo", version, about = "Contextual word representations from a character-aware biLM", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every command.
#[derive(Args, Debug, Clone, Default)]
pub(crate) struct Common {
    /// `key=value` configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a biLM from scratch and write a checkpoint.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        /// Held-out corpus; defaults to the last 10% of --corpus.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Continue training a checkpoint on in-domain text (one epoch by default).
    FinetuneLm {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fail unless dev perplexity strictly decreases.
        #[arg(long = "assert")]
        check: bool,
    },
    /// Forward, backward and average perplexity of a corpus.
    Perplexity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Write every layer's representations for a corpus to a file.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-centroid sense disambiguation with one layer.
    ProbeWsd {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sense-annotated training examples.
        #[arg(long)]
        corpus: PathBuf,
        /// Sense-annotated test examples.
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Write one predicted sense per test example.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear part-of-speech probe on one layer.
    ProbePos {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Both probes at every layer, as a table.
    ProbeReport {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding the bundled corpora.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail unless every contextual layer beats the token layer on both probes.
        #[arg(long = "assert")]
        check: bool,
    },
    /// Train a sequence tagger, with or without ELMo.
    TrainTask {
        #[command(flatten)]
        task: TaskFlags,
        /// Where to write the trained tagger.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a trained tagger on tagged data.
    EvalTask {
        /// Tagger file written by train-task.
        #[arg(long)]
        tagger: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Write predicted tags in the tagged-corpus format.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer-use grid (last only, lambda 1, lambda 0.001) and placement grid.
    Ablation {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail unless lambda=1 ends nearer uniform than lambda=0.001.
        #[arg(long = "assert")]
        check: bool,
    },
    /// Dev accuracy against training-set fraction, with and without ELMo.
    SampleEfficiency {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1.0")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail unless the mean ELMo accuracy is at least the baseline at every fraction.
        #[arg(long = "assert")]
        check: bool,
    },
    /// Learned layer weights and scale of a trained tagger.
    WeightsReport {
        #[arg(long)]
        tagger: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct TaskFlags {
    /// Tagged training corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Tagged dev corpus.
    #[arg(long)]
    dev: PathBuf,
    /// biLM checkpoint; required unless --elmo-location none.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long = "elmo-location", value_parser = parse_location)]
    elmo_location: Option<ElmoLocation>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_location(s: &str) -> Result<ElmoLocation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Argument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
