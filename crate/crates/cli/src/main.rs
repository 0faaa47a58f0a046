mod args;
mod commands;
mod failure;
mod output;
mod setup;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use failure::Kind;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Kind::Usage.exit_code() } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Score(a) => commands::score(a),
        Command::Replace(a) => commands::replace(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plotdata(a) => commands::plotdata(a),
        Command::Modal(a) => commands::modal(a),
        Command::Probe(a) => commands::probe(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tokattr: {:#}", f.error);
            f.kind.exit_code()
        }
    }
}
