//! `asymgan`: train, translate, evaluate, sweep and inspect.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! Dotted `--section.key=value` arguments anywhere on the command line are
//! configuration overrides for `train` and `sweep`.

mod commands;
mod manifest;

use std::process::ExitCode;

use asymgan_core::Error;
use clap::Parser;

use commands::Cli;

/// Splits dotted `--a.b=value` overrides from the arguments clap sees.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let (overrides, rest) = args.into_iter().partition(|a: &String| {
        a.strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(key, _)| key.contains('.'))
    });
    (rest, overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidSpec(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
