use std::process::ExitCode;

use clap::Parser;
use selection_dml::cli::{execute, resolve, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match resolve(&cli.command).and_then(|cfg| execute(&cfg)) {
        Ok(summary) => {
            print!("{summary}");
            if !summary.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
