use std::io;
use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use seedtune::cli::{self, ReportFormat, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK};

#[derive(Parser)]
#[command(name = "seedtune", version, about = "Hyperparameter optimization benchmarks under seed noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method block of an experiment configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Omit wall-clock timestamps so logs are byte-reproducible.
        #[arg(long)]
        deterministic: bool,
    },
    /// Recompute the summary from a results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Check that an external worker speaks the line protocol.
    ValidateWorker {
        #[arg(long)]
        cmd: String,
        #[arg(long, default_value_t = 10.0)]
        timeout_secs: f64,
    },
}

fn dispatch(cli: Cli) -> u8 {
    let (mut out, mut err) = (io::stdout().lock(), io::stderr().lock());
    match cli.command {
        Command::Run {
            config,
            out: dir,
            seed,
            deterministic,
        } => cli::run_cmd(&config, &dir, seed, deterministic, &mut err),
        Command::Report { input, format } => {
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Markdown => ReportFormat::Markdown,
            };
            cli::report_cmd(&input, format, &mut out, &mut err)
        }
        Command::ValidateWorker { cmd, timeout_secs } => {
            if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
                eprintln!("error: --timeout-secs must be positive");
                return EXIT_CONFIG;
            }
            cli::validate_worker_cmd(&cmd, Duration::from_secs_f64(timeout_secs), &mut out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEEDTUNE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let code = panic::catch_unwind(|| dispatch(cli)).unwrap_or(EXIT_FAILURE);
    ExitCode::from(code)
}
