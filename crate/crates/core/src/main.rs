use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = sugar::cli::Cli::parse();
    match sugar::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
