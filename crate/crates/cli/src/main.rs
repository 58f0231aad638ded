#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod chat;
mod config;
mod data;
mod eval;
mod fail;
mod gradcheck;
mod manifest;
mod train;

#[derive(Debug, Parser)]
#[command(name = "labes", version, about = "Latent belief state dialog models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize a dataset into schema.json, db.json and split files.
    Prepare {
        #[command(subcommand)]
        source: data::Source,
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        args: data::SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (sup, semi or self).
    Train(train::TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(eval::EvalArgs),
    /// Chat with a checkpoint over stdin.
    Chat(chat::ChatArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare { source, out } => {
            let out = out.ok_or_else(|| fail::config("prepare requires --out"))?;
            data::cmd_prepare(&source, &out)
        }
        Command::Synth { args, out } => data::cmd_synth(&args, &out),
        Command::Train(a) => train::cmd_train(&a),
        Command::Eval(a) => eval::cmd_eval(&a),
        Command::Chat(a) => chat::cmd_chat(&a),
        Command::Gradcheck(a) => gradcheck::cmd_gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { fail::Kind::Config.exit_code() as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(fail::kind(&e).exit_code() as u8)
        }
    }
}
