//! `unicp`: baseline runs, calibration, dispatched runs, the drift harness,
//! and output comparison.

mod commands;
mod spec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spec::CommonArgs;

#[derive(Parser, Debug)]
#[command(name = "unicp", version, about = "Attention caching and query/key slicing for a toy video DiT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-compute run; writes the final state and trace.
    Baseline(CommonArgs),
    /// Calibrates retained dimensions and writes the cache map and sliced weights.
    Calibrate(CommonArgs),
    /// Dispatched run, online or replaying a calibrated cache map.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding `cache_map.txt` and `sliced.bin` (default: --out).
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Baseline trace for the MAC ratio (default: <out>/baseline_trace.csv if present).
        #[arg(long)]
        baseline_trace: Option<PathBuf>,
    },
    /// Runs the scheduler and fixed-window comparators on a drift profile.
    Harness {
        #[command(flatten)]
        common: CommonArgs,
        /// Profile file; defaults to a U-shape with a mid-schedule spike.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Fixed windows to compare against.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        fixed: Vec<usize>,
    },
    /// Fidelity report of a candidate state against a reference state.
    Compare {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Also write `compare.txt` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or input; exit 2.
    Config(String),
    /// A required input artifact is missing; exit 3.
    Missing(PathBuf),
    /// Numeric failure during a run; exit 4.
    Numeric(String),
    /// Any other I/O failure; exit 1.
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn missing(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io(path.to_path_buf(), e)
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Io(..) => 1,
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Missing(p) => write!(f, "missing artifact: {}", p.display()),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<unicp::Error> for CliError {
    fn from(e: unicp::Error) -> Self {
        use unicp::Error as E;
        match e {
            E::NonFinite { .. } | E::NoConvergence { .. } => CliError::Numeric(e.to_string()),
            E::Io(io) => CliError::Io(PathBuf::new(), io),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Baseline(args) => commands::baseline(&args),
        Command::Calibrate(args) => commands::calibrate(&args),
        Command::Run {
            common,
            calibration,
            baseline_trace,
        } => commands::run(&common, calibration.as_deref(), baseline_trace.as_deref()),
        Command::Harness {
            common,
            profile,
            fixed,
        } => commands::harness(&common, profile.as_deref(), &fixed),
        Command::Compare {
            reference,
            candidate,
            out,
        } => commands::compare(&reference, &candidate, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("unicp: {e}");
            ExitCode::from(e.code())
        }
    }
}
