use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use blo_cli::commands::{bench, gradcheck, run, variance};
use blo_cli::{
    parse_thread_cap, CliError, CliResult, ExperimentConfig, EXIT_CONFIG, EXIT_OK, THREADS_ENV,
};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "blo",
    version,
    about = "Bi-level optimization hypergradient toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config and write run artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-check exact and estimated hypergradients.
    Gradcheck {
        #[arg(long, value_enum)]
        problem: gradcheck::GradcheckProblem,
        #[arg(long = "T", default_value_t = 5)]
        t_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo study of forward-gradient variance against its prediction.
    Variance {
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        b: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the configured estimator across thread counts.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return exit(code);
        }
    };
    match execute(cli) {
        Ok(()) => exit(EXIT_OK),
        Err(e) => {
            eprintln!("blo: {e}");
            exit(e.exit_code())
        }
    }
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn execute(cli: Cli) -> CliResult<()> {
    let cap = parse_thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?;
    if let Some(n) = cap {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))?;
    }
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run::cmd_run(&cfg, out.as_deref())?;
            let last = summary.outcome.record.last();
            println!(
                "wrote {} ({} steps, final meta_loss {})",
                summary.out_dir.display(),
                summary.outcome.record.len(),
                last.map_or(f64::NAN, |r| r.meta_loss)
            );
            Ok(())
        }
        Command::Gradcheck {
            problem,
            t_steps,
            seed,
        } => {
            let report = gradcheck::gradcheck(problem, t_steps, seed)?;
            print!("{report}");
            report.into_result().map(|_| ())
        }
        Command::Variance {
            n,
            b,
            samples,
            out,
            seed,
        } => {
            let rows = variance::variance_study(n, &b, samples, seed)?;
            variance::write_rows(&rows, io::stdout().lock())?;
            if let Some(path) = out {
                let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
                variance::write_rows(&rows, file)?;
            }
            variance::check_rows(&rows)
        }
        Command::Bench {
            config,
            threads,
            repeats,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let threads: Vec<usize> = threads
                .iter()
                .map(|&t| cap.map_or(t, |c| t.min(c)))
                .collect();
            let report = bench::bench(&cfg, &threads, repeats)?;
            bench::write_rows(&report.rows, io::stdout().lock())?;
            if let Some(path) = out {
                let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
                bench::write_rows(&report.rows, file)?;
            }
            if !report.identical_bits {
                return Err(CliError::Tolerance(
                    "gradient bits differ across thread counts".into(),
                ));
            }
            io::stdout().flush().map_err(|e| CliError::io("stdout", e))
        }
    }
}
