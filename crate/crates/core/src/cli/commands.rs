//! The four subcommands. Each returns the files it wrote; on error the
//! partial outputs are removed by [`OutputSet`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::output::{self, GridKind, OutputSet, Provenance};
use crate::ensemble::{run_ensemble, EnsembleStats, Estimate, InitialState, SampleStats};
use crate::error::{QbmError, Result};
use crate::model::{default_sigma_q, observables, PhysicalParams, PotentialSpec};
use crate::oracle::{
    evolve_density, gaussian_amplitudes, interpolate, moment_ode, Basis, DensityMatrix, Generator, Moments,
    Oracle,
};
use crate::wigner::{wigner_of_density, wigner_of_state, GridDensity};

/// Largest grid also written as (q, p, W) text.
const CSV_GRID_LIMIT: usize = 256;

fn stamp(t: f64) -> String {
    format!("t{t:.3}")
}

fn generator_name(g: Generator) -> &'static str {
    match g {
        Generator::Qbm => "markov",
        Generator::TimeDependent => "memory",
    }
}

fn harmonic_omega(potential: &PotentialSpec) -> Option<f64> {
    match potential {
        PotentialSpec::Harmonic { omega } => Some(*omega),
        _ => None,
    }
}

/// First and second moments of the configured initial state on the grid.
pub fn initial_moments(cfg: &ExperimentConfig) -> Result<Moments> {
    let e = &cfg.experiment;
    let psi = e.initial.build(&e.params, &e.grid)?;
    let o = observables(&psi, e.params.hbar);
    Ok(Moments {
        q: o.mean_q,
        p: o.mean_p,
        q2: o.mean_q2(),
        p2: o.mean_p2(),
        s: o.mean_qp_sym,
    })
}

/// The configured initial state in the oracle's number basis.
pub fn initial_density(basis: Basis, initial: &InitialState, params: &PhysicalParams) -> Result<DensityMatrix> {
    let sigma = |s: Option<f64>| s.unwrap_or_else(|| default_sigma_q(params));
    match *initial {
        InitialState::Coherent { q0, p0, sigma_q } => DensityMatrix::gaussian(basis, q0, p0, sigma(sigma_q)),
        InitialState::Cat { q0, p0, sigma_q, sign } => {
            let a = gaussian_amplitudes(basis, q0, p0, sigma(sigma_q))?;
            let b = gaussian_amplitudes(basis, -q0, -p0, sigma(sigma_q))?;
            Ok(DensityMatrix::pure(basis, a + b * num_complex::Complex64::new(sign, 0.0)))
        }
    }
}

fn write_config(out: &mut OutputSet, cfg: &ExperimentConfig) -> Result<()> {
    let text = format!("# qbm-core {}\n{}", output::VERSION, cfg.to_toml()?);
    std::fs::write(out.path("config.toml"), text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    version: &'a str,
    config: &'a serde_json::Value,
    n_traj: usize,
    diagnostics: &'a crate::ensemble::EnsembleDiagnostics,
    final_trace: Option<Estimate>,
}

/// Ensemble CSV, run summary and whatever grids the config asks for.
pub fn write_ensemble_outputs(out: &mut OutputSet, cfg: &ExperimentConfig, stats: &EnsembleStats) -> Result<()> {
    let prov = Provenance::new(cfg)?;
    let hbar = cfg.experiment.params.hbar;
    write_config(out, cfg)?;
    output::write_csv(
        &out.path("ensemble.csv"),
        &prov,
        &output::ENSEMBLE_COLUMNS,
        &output::ensemble_rows(stats),
    )?;
    let summary = RunSummary {
        version: output::VERSION,
        config: &prov.config,
        n_traj: stats.n_traj,
        diagnostics: &stats.diagnostics,
        final_trace: stats.series.last().map(|s| s.trace),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| QbmError::Config(e.to_string()))?;
    std::fs::write(out.path("summary.json"), text + "\n")?;

    for snap in &stats.wigner {
        let stem = format!("wigner_{}", stamp(snap.t));
        output::write_wigner(out, &stem, snap.t, &snap.value, &prov)?;
        if snap.value.n_q() <= CSV_GRID_LIMIT {
            snap.value.write_csv(&out.path(&format!("{stem}.csv")), &csv_comment(&prov))?;
        }
    }
    for snap in &stats.density {
        output::write_density(out, &format!("density_{}", stamp(snap.t)), snap.t, &snap.value, hbar, &prov)?;
    }
    for snap in &stats.snapshots {
        for (k, psi) in snap.value.iter().enumerate() {
            let stem = format!("state_traj{k}_{}", stamp(snap.t));
            output::write_state(out, &stem, snap.t, psi, hbar, Some(k as u64), &prov)?;
            let w = wigner_of_state(psi, hbar);
            output::write_wigner(out, &format!("wigner_traj{k}_{}", stamp(snap.t)), snap.t, &w, &prov)?;
        }
    }
    Ok(())
}

fn csv_comment(prov: &Provenance) -> String {
    format!("qbm-core {}\nconfig {}", prov.version, prov.config)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let stats = run_ensemble(&cfg.ensemble, &cfg.experiment)?;
    let mut out = OutputSet::new(&cfg.out)?;
    write_ensemble_outputs(&mut out, cfg, &stats)?;
    Ok(out.commit())
}

pub fn oracle(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let e = &cfg.experiment;
    let o = &cfg.oracle;
    let prov = Provenance::new(cfg)?;
    let mut out = OutputSet::new(&cfg.out)?;
    write_config(&mut out, cfg)?;
    if let Some(omega) = harmonic_omega(&e.potential) {
        let m0 = initial_moments(cfg)?;
        for &g in &o.generators {
            let series = moment_ode(&e.params, omega, g, m0, 0.0, e.horizon, o.dt)?;
            let every = (o.record_interval / o.dt).round().max(1.0) as usize;
            let rows: Vec<_> = series.iter().step_by(every).copied().collect();
            output::write_csv(
                &out.path(&format!("oracle_moments_{}.csv", generator_name(g))),
                &prov,
                &output::MOMENT_COLUMNS,
                &output::moment_rows(&rows),
            )?;
        }
    }
    if o.density {
        let basis = Basis::new(o.basis_dim, o.basis_omega, &e.params)?;
        let rho0 = initial_density(basis, &e.initial, &e.params)?;
        for &g in &o.generators {
            let oracle = Oracle::new(basis, &e.params, &e.potential, g)?;
            let every = (o.record_interval / o.dt).round().max(1.0) as usize;
            let samples = evolve_density(&oracle, &rho0, 0.0, e.horizon, o.dt, every, false)?;
            let name = generator_name(g);
            let moments: Vec<_> = samples.iter().map(|s| (s.t, s.moments)).collect();
            output::write_csv(
                &out.path(&format!("oracle_density_moments_{name}.csv")),
                &prov,
                &output::MOMENT_COLUMNS,
                &output::moment_rows(&moments),
            )?;
            output::write_csv(
                &out.path(&format!("oracle_eigen_{name}.csv")),
                &prov,
                &output::EIGEN_COLUMNS,
                &output::eigen_rows(&samples),
            )?;
        }
    }
    Ok(out.commit())
}

/// z-scores of the four moments at one sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentZ {
    pub q: f64,
    pub p: f64,
    pub q2: f64,
    pub p2: f64,
}

impl MomentZ {
    pub fn max_abs(&self) -> f64 {
        [self.q, self.p, self.q2, self.p2].iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// z of an estimate against an exact value. Differences at rounding level
/// count as agreement, so identical trajectories (t = 0) give 0, not noise
/// over a vanishing standard error.
pub fn z_exact(e: &Estimate, value: f64) -> f64 {
    let diff = e.mean - value;
    if diff.abs() <= 1e-12 * value.abs().max(1.0) {
        return 0.0;
    }
    if e.se > 0.0 {
        diff / e.se
    } else {
        f64::INFINITY
    }
}

pub fn moment_z(s: &SampleStats, m: &Moments) -> MomentZ {
    MomentZ {
        q: z_exact(&s.mean_q, m.q),
        p: z_exact(&s.mean_p, m.p),
        q2: z_exact(&s.mean_q2, m.q2),
        p2: z_exact(&s.mean_p2, m.p2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub t: f64,
    pub post_slip: bool,
    pub ensemble: Moments,
    pub memory: Moments,
    pub z_memory: MomentZ,
    /// Markov oracle restarted from the memory oracle at the slip time.
    pub markov: Option<Moments>,
    pub z_markov: Option<MomentZ>,
    /// Markov oracle integrated from t = 0.
    pub z_markov_from_zero: MomentZ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub version: String,
    pub config: serde_json::Value,
    pub n_traj: usize,
    pub z_threshold: f64,
    pub t_slip: f64,
    pub max_abs_z_post_slip: f64,
    pub max_abs_z_memory: f64,
    pub pass: bool,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "ensemble vs moment oracles, N = {}, post-slip window t ≥ {:.3}\n",
            self.n_traj, self.t_slip
        );
        s += "     t   |z| memory   |z| markov\n";
        for r in &self.rows {
            let mk = r.z_markov.map(|z| format!("{:10.2}", z.max_abs())).unwrap_or_else(|| "         -".into());
            s += &format!("{:6.3}   {:10.2}   {mk}\n", r.t, r.z_memory.max_abs());
        }
        s += &format!(
            "max |z| post-slip (markov) = {:.2}, max |z| (memory, full window) = {:.2}, threshold {}: {}\n",
            self.max_abs_z_post_slip,
            self.max_abs_z_memory,
            self.z_threshold,
            if self.pass { "PASS" } else { "FAIL" }
        );
        s
    }
}

fn ensemble_moments(s: &SampleStats) -> Moments {
    Moments {
        q: s.mean_q.mean,
        p: s.mean_p.mean,
        q2: s.mean_q2.mean,
        p2: s.mean_p2.mean,
        s: s.mean_qp_sym.mean,
    }
}

/// Builds the comparison from an already-run ensemble.
pub fn compare_stats(cfg: &ExperimentConfig, stats: &EnsembleStats) -> Result<CompareReport> {
    let e = &cfg.experiment;
    let omega = harmonic_omega(&e.potential)
        .ok_or_else(|| QbmError::Config("experiment.potential: compare needs a harmonic potential".into()))?;
    let c = &cfg.compare;
    let m0 = initial_moments(cfg)?;
    let memory = moment_ode(&e.params, omega, Generator::TimeDependent, m0, 0.0, e.horizon, c.ode_dt)?;
    let from_zero = moment_ode(&e.params, omega, Generator::Qbm, m0, 0.0, e.horizon, c.ode_dt)?;
    let t_slip = c.slip_lambda_times / e.params.lambda;
    let restart = if t_slip <= e.horizon {
        let start = interpolate(&memory, t_slip).expect("slip time inside the horizon");
        let steps = ((e.horizon - t_slip) / c.ode_dt).ceil() * c.ode_dt;
        Some(moment_ode(&e.params, omega, Generator::Qbm, start, t_slip, steps, c.ode_dt)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for s in &stats.series {
        let mem = interpolate(&memory, s.t).expect("sample inside the horizon");
        let post_slip = s.t >= t_slip - 1e-9;
        let markov = restart
            .as_ref()
            .filter(|_| post_slip)
            .and_then(|r| interpolate(r, s.t.max(t_slip)));
        rows.push(CompareRow {
            t: s.t,
            post_slip,
            ensemble: ensemble_moments(s),
            memory: mem,
            z_memory: moment_z(s, &mem),
            markov,
            z_markov: markov.map(|m| moment_z(s, &m)),
            z_markov_from_zero: moment_z(s, &interpolate(&from_zero, s.t).expect("sample inside the horizon")),
        });
    }
    let max_post = rows
        .iter()
        .filter_map(|r| r.z_markov.map(|z| z.max_abs()))
        .fold(0.0, f64::max);
    let max_mem = rows.iter().map(|r| r.z_memory.max_abs()).fold(0.0, f64::max);
    Ok(CompareReport {
        version: output::VERSION.to_string(),
        config: Provenance::new(cfg)?.config,
        n_traj: stats.n_traj,
        z_threshold: c.z_threshold,
        t_slip,
        max_abs_z_post_slip: max_post,
        max_abs_z_memory: max_mem,
        pass: max_post <= c.z_threshold,
        rows,
    })
}

/// Runs the ensemble and writes `compare.json` and `compare.txt`.
pub fn compare(cfg: &ExperimentConfig) -> Result<(CompareReport, Vec<PathBuf>)> {
    // fail on a non-harmonic config before the expensive part
    harmonic_omega(&cfg.experiment.potential)
        .ok_or_else(|| QbmError::Config("experiment.potential: compare needs a harmonic potential".into()))?;
    let stats = run_ensemble(&cfg.ensemble, &cfg.experiment)?;
    let report = compare_stats(cfg, &stats)?;
    let mut out = OutputSet::new(&cfg.out)?;
    write_config(&mut out, cfg)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| QbmError::Config(e.to_string()))?;
    std::fs::write(out.path("compare.json"), json + "\n")?;
    std::fs::write(out.path("compare.txt"), report.summary())?;
    Ok((report, out.commit()))
}

/// Wigner function of a state or density grid file, or of the configured
/// initial state when no input is given.
pub fn wigner(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut out = OutputSet::new(&cfg.out)?;
    let (w, t, stem, prov) = match input {
        Some(path) => {
            let (h, data) = output::read_grid(path).map_err(|e| match e {
                QbmError::Io(io) => QbmError::Config(format!("{}: {io}", path.display())),
                other => other,
            })?;
            let prov = Provenance {
                version: output::VERSION.to_string(),
                config: h.config.clone(),
            };
            let grid = h.position_grid()?;
            let values = output::deinterleave(&data);
            let w = match h.kind {
                GridKind::State => wigner_of_state(&crate::model::WaveFunction { grid, amps: values }, h.hbar),
                GridKind::Density => wigner_of_density(&GridDensity { grid, values }, h.hbar)?,
                GridKind::Wigner => {
                    return Err(QbmError::Config(format!("{}: already a Wigner grid", path.display())))
                }
            };
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input".into());
            (w, h.t, format!("{stem}_wigner"), prov)
        }
        None => {
            let e = &cfg.experiment;
            let psi = e.initial.build(&e.params, &e.grid)?;
            (wigner_of_state(&psi, e.params.hbar), 0.0, "wigner_initial".to_string(), Provenance::new(cfg)?)
        }
    };
    output::write_wigner(&mut out, &stem, t, &w, &prov)?;
    if w.n_q() <= CSV_GRID_LIMIT {
        w.write_csv(&out.path(&format!("{stem}.csv")), &csv_comment(&prov))?;
    }
    Ok(out.commit())
}
