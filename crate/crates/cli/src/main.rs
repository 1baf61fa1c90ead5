use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convexopt_cli::{
    cmd_analyze, cmd_export, cmd_solve, cmd_verify, format_table, run_suite, RunFlags, SuiteConfig,
    EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, SUITES,
};

/// Shape optimization over convex domains with a convexity-constrained
/// radial parameterization.
#[derive(Parser, Debug)]
#[command(name = "convexopt", version)]
struct Cli {
    /// Debug logging (structured JSON lines on stderr).
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct SolveFlags {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Number of independently perturbed replicas.
    #[arg(long)]
    multistart: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid size N (overrides the problem file).
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a problem file and write u, SVG, certificate and report.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Certify an externally supplied u against a problem file.
    Verify {
        #[arg(long)]
        problem: PathBuf,
        /// CSV with columns theta,u.
        #[arg(long)]
        u: PathBuf,
        /// Project u onto the feasible set first.
        #[arg(long)]
        project: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the corner/edge/arc structure of u as JSON.
    Analyze {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        u: PathBuf,
    },
    /// Draw u as SVG.
    Export {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        u: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a reproduction suite and print its pass/fail table.
    Reproduce {
        /// One of s51, s52, polygons, volume.
        suite: String,
        #[command(flatten)]
        flags: SolveFlags,
    },
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Solve { problem, flags } => cmd_solve(
            &problem,
            &RunFlags {
                out: flags.out,
                multistart: flags.multistart,
                seed: flags.seed,
                grid: flags.grid,
            },
        ),
        Command::Verify {
            problem,
            u,
            project,
            out,
        } => cmd_verify(&u, &problem, project, out.as_deref()),
        Command::Analyze { problem, u } => cmd_analyze(&u, &problem),
        Command::Export { problem, u, out } => cmd_export(&u, &problem, &out),
        Command::Reproduce { suite, flags } => {
            let defaults = SuiteConfig::default();
            let cfg = SuiteConfig {
                grid_n: flags.grid.unwrap_or(defaults.grid_n),
                multistart: flags.multistart.unwrap_or(defaults.multistart),
                seed: flags.seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let Some(result) = run_suite(&suite, &cfg) else {
                anyhow::bail!("unknown suite `{suite}` (available: {})", SUITES.join(", "));
            };
            let checks = result?;
            let table = format_table(&checks);
            print!("{table}");
            std::fs::create_dir_all(&flags.out)?;
            std::fs::write(flags.out.join(format!("{suite}.txt")), &table)?;
            Ok(if checks.iter().all(|c| c.pass) {
                EXIT_OK
            } else {
                EXIT_NUMERICAL
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_USAGE as u8
            } else {
                EXIT_OK as u8
            });
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
