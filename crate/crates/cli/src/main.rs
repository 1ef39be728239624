//! `muster` command-line front end.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "muster", version, about = "Skip-attention segmentation decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded backbone features F_0..F_n as tensor files.
    GenFeatures(commands::GenFeatures),
    /// Run the decoder on a feature directory.
    Forward(commands::Forward),
    /// Write the four shifted-window masks of a family.
    Masks(commands::Masks),
    /// Report analytic FLOPs and the linearity fit.
    Flops(commands::Flops),
    /// Finite-difference check of every decoder parameter.
    Gradcheck(commands::Gradcheck),
    /// Run the built-in oracle suites.
    Selftest,
}

fn error_line(code: &str, message: &str) -> String {
    serde_json::json!({ "error": code, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    if let Err(e) = commands::configure_threads() {
        eprintln!("{}", error_line(e.code(), &e.to_string()));
        return ExitCode::from(e.exit_code() as u8);
    }
    let result = match cli.command {
        Command::GenFeatures(a) => a.run(),
        Command::Forward(a) => a.run(),
        Command::Masks(a) => a.run(),
        Command::Flops(a) => a.run(),
        Command::Gradcheck(a) => a.run(),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", error_line(e.code(), &e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
