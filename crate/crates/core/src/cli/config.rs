//! Run configuration: one TOML document holding everything a run needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{Accumulate, EnsembleConfig, Experiment, InitialState};
use crate::error::{QbmError, Result};
use crate::model::{GridSpec, PhysicalParams, PotentialSpec};
use crate::noise::PsdRepair;
use crate::oracle::Generator;
use crate::propagator::{Scheme, StepperConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub basis_dim: usize,
    /// Frequency of the number basis.
    pub basis_omega: f64,
    pub dt: f64,
    /// Spacing of the recorded series.
    pub record_interval: f64,
    pub generators: Vec<Generator>,
    /// Also integrate the density matrix (moment ODEs need a harmonic potential,
    /// the density integration does not).
    pub density: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            basis_dim: 60,
            basis_omega: 1.0,
            dt: 0.002,
            record_interval: 0.1,
            generators: vec![Generator::Qbm, Generator::TimeDependent],
            density: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// |z| above this in the post-slip window fails the comparison.
    pub z_threshold: f64,
    /// Start of the post-slip window in units of 1/Λ.
    pub slip_lambda_times: f64,
    /// Step of the moment ODEs.
    pub ode_dt: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            z_threshold: 3.0,
            slip_lambda_times: 5.0,
            ode_dt: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out: PathBuf,
    pub experiment: Experiment,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

/// Command-line overrides, applied on top of a preset or config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub out: Option<PathBuf>,
    pub scheme: Option<Scheme>,
    pub hbar: Option<f64>,
    pub grid_n: Option<usize>,
    pub dt: Option<f64>,
}

pub const PRESETS: &[&str] = &["duffing-paper", "harmonic-validation"];

impl ExperimentConfig {
    /// The driven Duffing oscillator in the thermal bath at ħ = 0.01.
    pub fn duffing_paper() -> Self {
        let mut ensemble = EnsembleConfig::new(1000, 42);
        ensemble.accumulate = Accumulate {
            observables: true,
            density_grid: false,
            wigner: true,
            snapshots: true,
        };
        ensemble.grid_times = vec![1.0, 2.0, 3.0, 4.0];
        Self {
            name: "duffing-paper".into(),
            out: PathBuf::from("out/duffing-paper"),
            experiment: Experiment {
                params: PhysicalParams::duffing_bath(0.01),
                potential: PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 },
                grid: GridSpec {
                    q_min: -2.5,
                    q_max: 2.5,
                    n: 1024,
                },
                stepper: StepperConfig::new(0.02, Scheme::NonlinearFull),
                initial: InitialState::Coherent {
                    q0: 0.1,
                    p0: 0.1,
                    sigma_q: None,
                },
                horizon: 4.0,
                sample_interval: 0.1,
                sample_times: Vec::new(),
            },
            ensemble,
            oracle: OracleConfig::default(),
            compare: CompareConfig::default(),
        }
    }

    /// Harmonic oscillator at ħ = 0.1, small enough for the number-basis
    /// oracle. The sampled kernel is not positive there, hence the clamp.
    pub fn harmonic_validation() -> Self {
        let mut ensemble = EnsembleConfig::new(2000, 7);
        ensemble.psd_repair = PsdRepair::Clamp;
        Self {
            name: "harmonic-validation".into(),
            out: PathBuf::from("out/harmonic-validation"),
            experiment: Experiment {
                params: PhysicalParams::duffing_bath(0.1),
                potential: PotentialSpec::Harmonic { omega: 1.0 },
                grid: GridSpec {
                    q_min: -5.0,
                    q_max: 5.0,
                    n: 256,
                },
                stepper: StepperConfig::new(0.01, Scheme::NonlinearFull),
                initial: InitialState::Coherent {
                    q0: 1.0,
                    p0: 0.0,
                    sigma_q: None,
                },
                horizon: 4.0,
                sample_interval: 0.1,
                sample_times: Vec::new(),
            },
            ensemble,
            oracle: OracleConfig::default(),
            compare: CompareConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "duffing-paper" => Ok(Self::duffing_paper()),
            "harmonic-validation" => Ok(Self::harmonic_validation()),
            other => Err(QbmError::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| QbmError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QbmError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QbmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| QbmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.ensemble.master_seed = seed;
        }
        if let Some(n) = o.n {
            self.ensemble.n_trajectories = n;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(scheme) = o.scheme {
            self.experiment.stepper.scheme = scheme;
        }
        if let Some(hbar) = o.hbar {
            self.experiment.params.hbar = hbar;
        }
        if let Some(n) = o.grid_n {
            self.experiment.grid.n = n;
        }
        if let Some(dt) = o.dt {
            self.experiment.stepper.dt = dt;
        }
    }

    /// Checks every section; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                QbmError::InvalidParameter { field, reason } => QbmError::Config(format!("{name}.{field}: {reason}")),
                other => QbmError::Config(format!("{name}: {other}")),
            })
        };
        section("experiment", self.experiment.validate())?;
        section("ensemble", self.ensemble.validate().map_err(strip_prefix("ensemble.")))?;
        // building the initial state checks that the grid resolves it
        section(
            "experiment.initial",
            self.experiment
                .initial
                .build(&self.experiment.params, &self.experiment.grid)
                .map(|_| ()),
        )?;
        let o = &self.oracle;
        if o.basis_dim < 4 {
            return Err(QbmError::Config("oracle.basis_dim: must be ≥ 4".into()));
        }
        if !(o.basis_omega > 0.0) {
            return Err(QbmError::Config("oracle.basis_omega: must be > 0".into()));
        }
        if !(o.dt > 0.0) || !(o.record_interval >= o.dt) {
            return Err(QbmError::Config("oracle.dt: need 0 < dt ≤ record_interval".into()));
        }
        let c = &self.compare;
        if !(c.z_threshold > 0.0) || !(c.ode_dt > 0.0) || !(c.slip_lambda_times >= 0.0) {
            return Err(QbmError::Config(
                "compare: z_threshold and ode_dt must be > 0, slip_lambda_times ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

fn strip_prefix(prefix: &'static str) -> impl Fn(QbmError) -> QbmError {
    move |e| match e {
        QbmError::InvalidParameter { field, reason } => QbmError::InvalidParameter {
            field: field.strip_prefix(prefix).unwrap_or(&field).to_string(),
            reason,
        },
        other => other,
    }
}
