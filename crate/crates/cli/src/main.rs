use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riskfb_cli::commands;
use riskfb_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "riskfb", version, about = "Risk-averse feedback control experiments")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// SQP solve producing a feedback law and its optimal control.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-loop gradient-descent baseline.
    Openloop {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Iteration count; the configured value when omitted.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Monte Carlo tracking-error validation of a run directory.
    Validate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Perturbed-initial-condition study of a closed-loop and an open-loop run.
    Robustness {
        #[arg(long = "run-cl")]
        run_cl: PathBuf,
        #[arg(long = "run-ol")]
        run_ol: PathBuf,
        /// Comma-separated noise levels; the configured levels when omitted.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; `<run-cl>/robustness` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Risk-averse versus risk-neutral comparison on shared draws.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Solve { config, out } => {
            let config = commands::load_config(&config)?;
            print_json(&commands::solve(&config, &out)?);
        }
        Command::Openloop { config, out, iters } => {
            let config = commands::load_config(&config)?;
            print_json(&commands::openloop(&config, &out, iters)?);
        }
        Command::Validate { run, n, seed } => {
            print_json(&commands::validate(&run, n, seed)?);
        }
        Command::Robustness {
            run_cl,
            run_ol,
            levels,
            n,
            seed,
            out,
        } => {
            let levels = levels.as_deref().map(commands::parse_levels).transpose()?;
            print_json(&commands::robustness(
                &run_cl,
                &run_ol,
                levels.as_deref(),
                n,
                seed,
                out.as_deref(),
            )?);
        }
        Command::Compare { config, out, n, seed } => {
            let config = commands::load_config(&config)?;
            print_json(&commands::compare(&config, &out, n, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
