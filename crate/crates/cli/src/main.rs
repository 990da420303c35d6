mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};
use commands::{CmdResult, Failure};

fn run(cli: Cli) -> CmdResult {
    let mut cfg = config::load(cli.config.as_deref()).map_err(Failure::Config)?;
    cfg.apply_globals(cli.seed, cli.workers);
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Init(args) => commands::init(&mut cfg, args, out),
        Command::Generate(args) => commands::generate(&mut cfg, args, out),
        Command::Bench(args) => commands::bench(&mut cfg, args, out),
        Command::Simulate(args) => commands::simulate(&mut cfg, args, out),
        Command::Probe(args) => commands::probe(&mut cfg, args, out),
        Command::CheckLossless(args) => commands::check_lossless(&cfg, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
