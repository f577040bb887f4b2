use std::process::ExitCode;

use clap::Parser;
use cropdet_cli::args::Cli;
use cropdet_cli::commands;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cropdet {command}: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
