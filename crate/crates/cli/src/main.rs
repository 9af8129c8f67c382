//! `atlas`: measure database workloads and turn their energy into carbon and
//! water figures.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial run, 64 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use atlas_core::energy::SourceConfig;
use atlas_core::harness::ConnectorSpec;
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "atlas",
    version,
    about = "Per-query energy, carbon and water accounting for database workloads"
)]
pub struct Cli {
    /// Run configuration (JSON); flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a workload plan and write a report.
    Measure(MeasureArgs),
    /// `measure` against a recorded energy trace.
    Replay(ReplayArgs),
    /// Add SCI, break-even or lifetime sections to a report.
    Analyze(AnalyzeArgs),
    /// Compare a report's energy across grid regions.
    Regions(RegionsArgs),
    /// Check a grid dataset and list every violation.
    GridValidate(GridValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct MeasureArgs {
    #[arg(long, value_name = "PATH")]
    pub plan: Option<PathBuf>,
    /// `exec:<command with {sql_file}>` or `stub[:options]`.
    #[arg(long, value_name = "SPEC")]
    pub connector: Option<ConnectorSpec>,
    #[arg(long, value_name = "PATH")]
    pub profile: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub region: Option<String>,
    /// `rapl`, `rapl:<root>` or `replay:<trace.csv>`.
    #[arg(long, value_name = "SPEC")]
    pub source: Option<SourceConfig>,
    #[arg(long, value_name = "PATH")]
    pub server_pid_file: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub water_factors: Option<PathBuf>,
    /// Measure idle power for SECS before the run and subtract it per query.
    #[arg(long, value_name = "SECS")]
    pub idle_baseline: Option<f64>,
    /// Count only package (CPU) energy towards carbon and water.
    #[arg(long)]
    pub cpu_only: bool,
    /// Instant (RFC 3339) to take the grid snapshot at.
    #[arg(long, value_name = "TIMESTAMP")]
    pub grid_at: Option<DateTime<Utc>>,
    #[arg(long, value_name = "SECS")]
    pub probe_timeout: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Recorded trace (CSV).
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    #[command(flatten)]
    pub measure: MeasureArgs,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("analysis").required(true).multiple(true).args(["sci", "breakeven", "lifetime"]))]
pub struct AnalyzeArgs {
    pub report: PathBuf,
    /// SCI over R functional units.
    #[arg(long, value_name = "R")]
    pub sci: Option<f64>,
    #[arg(long, default_value = "query")]
    pub functional_unit: String,
    /// Hardware lifespan for SCI amortization.
    #[arg(long, default_value_t = 5.0, value_name = "YEARS")]
    pub lifespan: f64,
    #[arg(long)]
    pub breakeven: bool,
    /// Break-even on package energy only.
    #[arg(long)]
    pub cpu_only: bool,
    /// Embodied components counted: any of cpu, dram, storage.
    #[arg(long, default_value = "cpu,dram,storage", value_name = "LIST")]
    pub embodied: String,
    #[arg(long, value_name = "YEARS", requires = "duty")]
    pub lifetime: Option<f64>,
    /// Queries per day for the lifetime projection.
    #[arg(long, value_name = "Q_PER_DAY", requires = "lifetime")]
    pub duty: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RegionsArgs {
    pub report: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub grid: PathBuf,
    /// Comma-separated region names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub regions: Vec<String>,
    /// Defaults to the report's timestamp.
    #[arg(long, value_name = "TIMESTAMP")]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Args)]
pub struct GridValidateArgs {
    pub dataset: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
