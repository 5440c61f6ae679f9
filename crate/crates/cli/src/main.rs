mod check;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taylor_hjb::Error;

/// Taylor-expansion feedback for bilinear optimal control: expansions,
/// closed-loop simulations, convergence studies and invariant checks.
#[derive(Debug, Parser)]
#[command(name = "taylor-hjb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory for cached expansions.
    #[arg(long, default_value = ".taylor-hjb-cache")]
    cache_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build (or load from cache) the expansion up to degree p.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p: usize,
        /// Also write the expansion JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the closed loop of u_p from y0 and report its cost.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p: usize,
        /// Initial state, e.g. `bump*0.05`, `random:3*0.1`, `axis:0*0.2`.
        #[arg(long)]
        y0: String,
        /// Trajectory CSV.
        #[arg(long)]
        out: PathBuf,
        /// Include every state coordinate in the CSV.
        #[arg(long)]
        full_state: bool,
        /// Cost report JSON; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Convergence study over degrees, directions and scales.
    Study {
        #[command(flatten)]
        common: Common,
        /// Comma-separated degrees (config default when omitted).
        #[arg(long)]
        p: Option<String>,
        /// Comma-separated geometric scales (config default when omitted).
        #[arg(long)]
        scales: Option<String>,
        /// Number of directions (config default when omitted).
        #[arg(long)]
        directions: Option<usize>,
        /// Seed of the random directions (config default when omitted).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
        /// Record CSV.
        #[arg(long)]
        out: PathBuf,
        /// Slope CSV; defaults to the record path with a `.slopes.csv` suffix.
        #[arg(long)]
        slopes: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        p: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Precondition(_) | Error::Json(_) => 2,
        Error::Integrity(_) => 4,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Expand { common, p, out } => commands::expand(&common.config, &common.cache_dir, p, out.as_deref()),
        Command::Simulate {
            common,
            p,
            y0,
            out,
            full_state,
            report,
        } => commands::simulate(&common.config, &common.cache_dir, p, &y0, &out, full_state, report.as_deref()),
        Command::Study {
            common,
            p,
            scales,
            directions,
            seed,
            jobs,
            out,
            slopes,
        } => commands::study(
            &common.config,
            &common.cache_dir,
            commands::StudyArgs {
                p,
                scales,
                directions,
                seed,
                jobs,
                out,
                slopes,
            },
        ),
        Command::Check { common, p, seed } => check::run(&common.config, &common.cache_dir, p, seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
