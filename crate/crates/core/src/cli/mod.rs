//! Command-line front end: `simulate`, `oracle`, `compare`, `wigner`, `config`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 when `compare` finds a z-score above its threshold.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::QbmError;
use crate::propagator::Scheme;
pub use config::{ExperimentConfig, Overrides};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_COMPARE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "qbm", version, about = "Quantum Brownian motion by non-Markovian quantum state diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a trajectory ensemble and write time series and grids.
    Simulate(Common),
    /// Integrate the master-equation references.
    Oracle(Common),
    /// Compare ensemble moments with the moment-equation oracles.
    Compare(Common),
    /// Wigner function of a state or density grid (default: the initial state).
    Wigner {
        #[command(flatten)]
        common: Common,
        /// Grid header (.json) of a state or density.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    Config(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Nonlinear,
    Asymptotic,
    Linear,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Nonlinear => Scheme::NonlinearFull,
            SchemeArg::Asymptotic => Scheme::NonlinearAsymptotic,
            SchemeArg::Linear => Scheme::Linear,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Named preset (duffing-paper, harmonic-validation).
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub hbar: Option<f64>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            n: self.n,
            out: self.out.clone(),
            scheme: self.scheme.map(Into::into),
            hbar: self.hbar,
            grid_n: self.grid_n,
            dt: self.dt,
        }
    }

    /// Preset or file, then flags, then validation.
    pub fn resolve(&self) -> crate::Result<ExperimentConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(_), Some(_)) => return Err(QbmError::Config("give either --preset or --config, not both".into())),
            (Some(name), None) => ExperimentConfig::preset(name)?,
            (None, Some(path)) => ExperimentConfig::load(path)?,
            (None, None) => return Err(QbmError::Config("one of --preset or --config is required".into())),
        };
        cfg.apply(&self.overrides());
        if let Some(t) = self.threads {
            cfg.ensemble.threads = Some(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (common, input) = match &cli.command {
        Command::Simulate(c) | Command::Oracle(c) | Command::Compare(c) | Command::Config(c) => (c, None),
        Command::Wigner { common, input } => (common, input.as_deref()),
    };
    let cfg = match common.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let result = match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg).map(|f| report(&f)).map(|_| EXIT_OK),
        Command::Oracle(_) => commands::oracle(&cfg).map(|f| report(&f)).map(|_| EXIT_OK),
        Command::Compare(_) => commands::compare(&cfg).map(|(r, f)| {
            print!("{}", r.summary());
            report(&f);
            if r.pass {
                EXIT_OK
            } else {
                EXIT_COMPARE
            }
        }),
        Command::Wigner { .. } => commands::wigner(&cfg, input).map(|f| report(&f)).map(|_| EXIT_OK),
        Command::Config(_) => cfg.to_toml().map(|t| print!("{t}")).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e @ QbmError::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
