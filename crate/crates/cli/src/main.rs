use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "latent-dialog", version, about = "Learn dialog structure with discrete-latent VRNNs and use it to shape dialog policy rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a flat config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Layers {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` assignment; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus.
    GenCorpus(commands::GenCorpusArgs),
    /// Train one model on a corpus and write a checkpoint directory.
    Train(commands::TrainArgs),
    /// Extract a transition table from a checkpoint and export it.
    Structure(commands::StructureArgs),
    /// Held-out likelihood of one or more checkpoints.
    Eval(commands::EvalArgs),
    /// Policy-learning experiment under one or more reward schemes.
    Rl(commands::RlArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Train(a) => commands::train(a),
        Command::Structure(a) => commands::structure(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rl(a) => commands::rl(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
