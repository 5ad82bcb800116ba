//! `rawvid`: command-line front end.
//!
//! Exit status is 0 on success, 2 for usage errors, 3 for configuration
//! errors and 1 for everything else; failures print one
//! `error: kind=<kind> msg=<json string>` line on stderr.

mod args;
mod commands;
mod config;
mod dataset;
mod failure;
mod manifest;

use std::process::ExitCode;
use std::sync::OnceLock;

use clap::Parser;

use args::{Cli, Command};
use failure::{CliResult, Failure};

/// Set when `-v` or `-q` chose the log level.
static LEVEL_FROM_FLAGS: OnceLock<bool> = OnceLock::new();

fn init_logging(cli: &Cli) {
    LEVEL_FROM_FLAGS.get_or_init(|| cli.quiet || cli.verbose > 0);
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Trace)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    log::set_max_level(level);
}

/// Applies a config file's `verbosity` (error, warn, info, debug, trace).
pub fn config_verbosity(name: &str) -> CliResult<()> {
    let level: log::LevelFilter = name
        .parse()
        .map_err(|_| Failure::Config(format!("unknown verbosity `{name}`")))?;
    if !LEVEL_FROM_FLAGS.get().copied().unwrap_or(false) {
        log::set_max_level(level);
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Unprocess(a) => commands::unprocess(a),
        Command::Scene(a) => commands::scene(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Isp(a) => commands::isp(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let f = Failure::Usage(first.to_string());
            eprintln!("{}", f.line());
            return ExitCode::from(f.exit_code());
        }
    };
    init_logging(&cli);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code())
        }
    }
}
