mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::config::UsageError;

const THREADS_VAR: &str = "STREAMPOINT_THREADS";

fn threads() -> Result<usize, UsageError> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(UsageError(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// 2 for bad flags or configuration, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<streampoint::Error>(), Some(streampoint::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn run(cli: Cli, threads: usize) -> anyhow::Result<()> {
    match cli.command {
        Command::Scenegen(a) => commands::scenegen(a, threads),
        Command::Train(a) => commands::train_cmd(a, threads),
        Command::Stream(a) => commands::stream(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Bench(a) => commands::bench(a, threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = match threads() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    match run(cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
