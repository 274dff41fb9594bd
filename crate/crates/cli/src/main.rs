//! `plot`: generate, train, evaluate, ablate, and validate from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/validation failure.

mod args;
mod commands;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                eprint!("{e}");
                std::process::exit(1);
            }
        },
    };
    let result = match &cli.command {
        Command::Gen(a) => commands::cmd_gen(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Ablate(a) => commands::cmd_ablate(a),
        Command::OracleCheck(a) => commands::cmd_oracle_check(a),
        Command::GradCheck(a) => commands::cmd_grad_check(a),
        Command::InspectPlan(a) => commands::cmd_inspect_plan(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
