use std::process::ExitCode;

use clap::Parser;

mod commands;

use commands::Cli;
use laneatt::Error;

/// 0 success, 1 config error, 2 data error, 3 internal error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        Error::Parse { .. }
        | Error::ImageMismatch(_)
        | Error::Io(_)
        | Error::EmptyTrainingSet
        | Error::Checkpoint(_) => 2,
        Error::Dimension { .. } | Error::Tape(_) | Error::EmptyAssignment => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
