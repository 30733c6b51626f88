mod args;
mod commands;
mod config;
mod rundir;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<iba_core::Error> for Failure {
    fn from(e: iba_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<(), Failure> {
    let argv = config::expand(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            eprint!("{e}");
            return Err(Failure::Usage(String::new()));
        }
    };
    let seed = match std::env::var("IBA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("IBA_SEED must be an unsigned integer, got `{v}`")))?,
        Err(_) => cli.seed,
    };
    if cli.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))?;

    let echo_args: Vec<String> = argv[1..].iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let echo = format!(
        "command={}\nseed={seed}\njobs={}\nargs={}\n",
        cli.command.name(),
        cli.jobs,
        echo_args.join(" ")
    );
    commands::dispatch(&cli.command, seed, &echo)
}
