//! Command-line front end: argument parsing, config files, worker pool,
//! manifests and CSV output for every study.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
pub mod config;
pub mod output;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Bad flags, invalid parameters or unwritable outputs.
pub const EXIT_VALIDATION: i32 = 1;
/// A verification command found an identity violated.
pub const EXIT_VERIFICATION: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Verification(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<dgff_core::DgffError> for CliError {
    fn from(e: dgff_core::DgffError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dgff",
    version,
    about = "Glauber dynamics of the 2D discrete Gaussian free field"
)]
pub struct Cli {
    /// Flat `key = value` file (or a previous manifest.json); flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads; falls back to DGFF_THREADS, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving the manifest and all outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Eigenvalues of the Dirichlet Laplacian and the principal mode.
    Spectral(SpectralArgs),
    /// Forward Glauber dynamics with snapshots.
    Simulate(SimulateArgs),
    /// Checks the random-walk representation and the covariance identity.
    BtrwVerify(BtrwVerifyArgs),
    /// Coupled pairs of chains and their discrepancy observables.
    Couple(CoupleArgs),
    /// Decay rate of the mean height.
    Decay(DecayArgs),
    /// Cutoff-profile lower bound.
    Profile(ProfileArgs),
    /// Scaling of the two-stage coalescence time.
    Coalescence(CoalescenceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SpectralArgs {
    #[arg(long)]
    pub n: usize,
    /// Also write φ₁ and φ̂₁ per site.
    #[arg(long)]
    pub phi: bool,
    /// Also compare the Fourier and linear-solve Green's matrices (n ≤ 48).
    #[arg(long)]
    pub greens: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    /// Horizon.
    #[arg(long)]
    pub t: f64,
    /// all-n, flat, stationary, shifted-stationary:<shift> or constant:<c>.
    #[arg(long, default_value = "all-n")]
    pub init: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Snapshot times; defaults to the horizon.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BtrwVerifyArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub t: f64,
    /// Number of random schedules.
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CoupleMode {
    Identity,
    Sticky,
    TwoStage,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CoupleArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "two-stage")]
    pub mode: CoupleMode,
    #[arg(long, default_value_t = 20)]
    pub replicas: u64,
    /// Horizon in units of t⋆(n).
    #[arg(long, default_value_t = 4.0)]
    pub horizon_multiplier: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Times (units of n²) at which V, N and Σ dh² ∧ 1 are recorded; default
    /// is 100 equal steps over the horizon.
    #[arg(long, value_delimiter = ',')]
    pub v_grid: Vec<f64>,
    /// Stage switch of the two-stage mode: loglog, volume, immediate, never or star-plus:<c>.
    #[arg(long, default_value = "loglog")]
    pub switch: String,
    /// Drift-estimate window in units of n².
    #[arg(long, default_value_t = 0.125)]
    pub drift_window: f64,
    /// Evaluate the angle-bracket rate at sticky-phase grid times.
    #[arg(long)]
    pub bracket: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecayArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flat initial height; defaults to n.
    #[arg(long)]
    pub init_height: Option<f64>,
    /// Explicit time grid; defaults to `points` equal steps over [2n², 8n² log n].
    #[arg(long, value_delimiter = ',')]
    pub times: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    /// Largest n compared against the exact semigroup.
    #[arg(long, default_value_t = 12)]
    pub oracle_max_n: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub n: usize,
    /// Initial height scale; defaults to n.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    pub c0: f64,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "-1,-0.5,0,0.5,1,2,3",
        allow_hyphen_values = true
    )]
    pub s_grid: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cross-check with a histogram of sampled statistics.
    #[arg(long)]
    pub histogram_bins: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CoalescenceArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "loglog")]
    pub switch: String,
    #[arg(long, default_value_t = 4.0)]
    pub horizon_multiplier: f64,
    #[arg(long, default_value_t = 0.125)]
    pub drift_window: f64,
}

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    let from_env = || -> Result<Option<usize>, CliError> {
        match std::env::var("DGFF_THREADS") {
            Ok(v) if !v.trim().is_empty() => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CliError::Validation(format!("DGFF_THREADS must be a positive integer (got '{v}')"))),
            _ => Ok(None),
        }
    };
    let k = match flag {
        Some(k) => k,
        None => from_env()?.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get())),
    };
    if k == 0 {
        return Err(CliError::Validation("thread count must be positive".into()));
    }
    Ok(k)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = argv
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let argv = match config::config_path(&argv) {
        Some(path) => match config::load(path.as_ref()) {
            Ok(file) => config::merge(argv, &file),
            Err(e) => {
                eprintln!("{e}");
                return EXIT_VALIDATION;
            }
        },
        None => argv,
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(k) => k,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_VALIDATION;
        }
    };
    match pool.install(|| commands::dispatch(&cli, threads, &argv)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Validation(_) => EXIT_VALIDATION,
                CliError::Verification(_) => EXIT_VERIFICATION,
            }
        }
    }
}
