mod args;
mod commands;
mod error;

use std::fs::File;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return CliError::usage(first_line(&e.to_string())).report(),
    };
    if let Err(e) = init_logging(&cli) {
        return e.report();
    }
    let result = match &cli.command {
        Command::Attribute(a) => commands::attribute(&cli, a),
        Command::Evaluate(a) => commands::evaluate(&cli, a),
        Command::Sanity(a) => commands::sanity(&cli, a),
        Command::TrainToy(a) => commands::train_toy(&cli, a),
        Command::GenData(a) => commands::gen_data(&cli, a),
        Command::Render(a) => commands::render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            e.report()
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ")
        .to_string()
}

fn init_logging(cli: &Cli) -> Result<(), CliError> {
    let Some(path) = &cli.log else {
        return Ok(());
    };
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Pipe(Box::new(file)))
        .init();
    Ok(())
}
