use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use lift3d_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            _ => {
                let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                eprintln!("{}", CliError { kind: "usage", message: first });
                return ExitCode::from(2);
            }
        },
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
