use std::process::ExitCode;

use clap::Parser;
use qaconv_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("qaconv: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
