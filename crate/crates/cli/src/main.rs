mod args;
mod common;
mod eval;
mod inspect;
mod synth;
mod train;

use std::process::ExitCode;

use clap::Parser;
use expliciter::{Error, ErrorClass};

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    if let Error::Usage(_) = e {
        return 2;
    }
    match e.class() {
        ErrorClass::Config => 3,
        ErrorClass::Corpus => 4,
        ErrorClass::Checkpoint => 5,
        ErrorClass::Training => 6,
        ErrorClass::Io => 7,
        ErrorClass::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Predict(a) => inspect::predict(a),
        Command::DumpAttention(a) => inspect::dump_attention(a),
        Command::DumpMemoryNeighbors(a) => inspect::dump_memory_neighbors(a),
        Command::Synth(a) => synth::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
