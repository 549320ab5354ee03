//! Trajectory ensembles and their averages.
//!
//! Trajectories are independent given their noise stream (master seed,
//! trajectory index), so they run in parallel. All reductions happen in
//! trajectory-index order: scalar averages use a pairwise sum over the index,
//! grid averages are summed within fixed-size blocks and the block sums are
//! combined by a binary-counter pairwise tree. The block size does not depend
//! on the thread count, so results are bit-identical for any parallelism.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QbmError, Result};
use crate::model::{make_coherent_state, superpose, GridSpec, PhysicalParams, PotentialSpec, WaveFunction};
use crate::noise::{NoiseSampler, NoiseStream, PsdRepair};
use crate::propagator::{run_with_stepper, SamplePlan, Stepper, StepperConfig, TrajectoryDiagnostics};
use crate::wigner::{accumulate_states, GridDensity, WignerGrid};

/// Trajectories per reduction block.
const BLOCK: usize = 32;

/// Largest tolerated fraction of aborted trajectories.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Gaussian at (q0, p0); `sigma_q` defaults to √(ħ/2m).
    Coherent {
        q0: f64,
        p0: f64,
        #[serde(default)]
        sigma_q: Option<f64>,
    },
    /// ψ_+ + sign·ψ_−, Gaussians at ±(q0, p0), normalised.
    Cat {
        q0: f64,
        p0: f64,
        #[serde(default)]
        sigma_q: Option<f64>,
        #[serde(default = "one")]
        sign: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl InitialState {
    pub fn build(&self, params: &PhysicalParams, grid: &GridSpec) -> Result<WaveFunction> {
        match *self {
            InitialState::Coherent { q0, p0, sigma_q } => make_coherent_state(q0, p0, params, sigma_q, grid),
            InitialState::Cat { q0, p0, sigma_q, sign } => {
                let a = make_coherent_state(q0, p0, params, sigma_q, grid)?;
                let b = make_coherent_state(-q0, -p0, params, sigma_q, grid)?;
                let c = num_complex::Complex64::new(1.0, 0.0);
                superpose(&[(c, &a), (c * sign, &b)])
            }
        }
    }
}

/// Physics and numerics of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub params: PhysicalParams,
    pub potential: PotentialSpec,
    pub grid: GridSpec,
    pub stepper: StepperConfig,
    pub initial: InitialState,
    pub horizon: f64,
    /// Spacing of the observable time series (a multiple of dt).
    pub sample_interval: f64,
    /// Explicit sample times; overrides `sample_interval` when non-empty.
    #[serde(default)]
    pub sample_times: Vec<f64>,
}

impl Experiment {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.stepper.dt).round() as usize
    }

    pub fn resolved_sample_times(&self) -> Vec<f64> {
        if !self.sample_times.is_empty() {
            return self.sample_times.clone();
        }
        let dt = self.stepper.dt;
        let every = (self.sample_interval / dt).round().max(1.0) as usize;
        SamplePlan::uniform(dt, self.n_steps(), every).sample_times()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.validate()?;
        self.stepper.validate(&self.params)?;
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", "must be ≥ 0"));
        }
        let k = self.horizon / self.stepper.dt;
        if (k - k.round()).abs() > 1e-6 {
            return Err(invalid("horizon", "must be a multiple of dt"));
        }
        if self.sample_times.is_empty() {
            let r = self.sample_interval / self.stepper.dt;
            if !(self.sample_interval > 0.0) || (r - r.round()).abs() > 1e-6 {
                return Err(invalid("sample_interval", "must be a positive multiple of dt"));
            }
        }
        if self.resolved_sample_times().iter().any(|t| *t > self.horizon + 1e-9) {
            return Err(invalid("sample_times", "must not exceed the horizon"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Accumulate {
    pub observables: bool,
    pub density_grid: bool,
    pub wigner: bool,
    /// Keep the coarse states of the first `snapshot_trajectories` trajectories.
    pub snapshots: bool,
}

impl Default for Accumulate {
    fn default() -> Self {
        Self {
            observables: true,
            density_grid: false,
            wigner: false,
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_trajectories: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub accumulate: Accumulate,
    /// Times at which density, Wigner and snapshot grids are taken; empty
    /// means the horizon only.
    #[serde(default)]
    pub grid_times: Vec<f64>,
    /// Grid decimation for density/Wigner/snapshot output.
    #[serde(default = "default_coarsen")]
    pub coarsen: usize,
    #[serde(default = "default_snapshot_trajectories")]
    pub snapshot_trajectories: usize,
    /// Worker threads; `None` uses the global pool. Not serialised: results
    /// do not depend on it, and outputs should not either.
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub psd_repair: PsdRepair,
}

fn default_coarsen() -> usize {
    4
}

fn default_snapshot_trajectories() -> usize {
    4
}

impl EnsembleConfig {
    pub fn new(n_trajectories: usize, master_seed: u64) -> Self {
        Self {
            n_trajectories,
            master_seed,
            accumulate: Accumulate::default(),
            grid_times: Vec::new(),
            coarsen: default_coarsen(),
            snapshot_trajectories: default_snapshot_trajectories(),
            threads: None,
            psd_repair: PsdRepair::Strict,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(invalid("ensemble.n_trajectories", "must be ≥ 1"));
        }
        if self.threads == Some(0) {
            return Err(invalid("ensemble.threads", "must be ≥ 1"));
        }
        if self.coarsen == 0 || !self.coarsen.is_power_of_two() {
            return Err(invalid("ensemble.coarsen", "must be a power of two"));
        }
        Ok(())
    }

    fn wants_grids(&self) -> bool {
        self.accumulate.density_grid || self.accumulate.wigner || self.accumulate.snapshots
    }
}

/// Mean with its standard error (NaN for a single trajectory).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Pairwise-summed mean and standard error of the mean.
    pub fn of(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = pairwise_sum(xs) / n as f64;
        if n == 1 {
            return Estimate { mean, se: f64::NAN };
        }
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&dev) / (n - 1) as f64;
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// (self − other) / combined standard error.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        (self.mean - other.mean) / self.se.hypot(other.se)
    }

    /// (self − value) / se
    pub fn z_against(&self, value: f64) -> f64 {
        (self.mean - value) / self.se
    }
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Quantities recorded per trajectory and sample time. Column order of
/// [`TrajectoryTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Weight = 0,
    MeanQ,
    MeanP,
    MeanQ2,
    MeanP2,
    MeanQpSym,
    Dq,
    Dp,
    Uncertainty,
}

const N_COLUMNS: usize = 9;

/// Per-trajectory observables of the surviving trajectories, in index order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryTable {
    pub times: Vec<f64>,
    pub indices: Vec<u64>,
    /// [trajectory][time][column], flattened
    values: Vec<f64>,
}

impl TrajectoryTable {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, traj: usize, time: usize, col: Column) -> f64 {
        self.values[(traj * self.times.len() + time) * N_COLUMNS + col as usize]
    }

    fn push(&mut self, index: u64, rows: &[[f64; N_COLUMNS]]) {
        self.indices.push(index);
        for r in rows {
            self.values.extend_from_slice(r);
        }
    }

    /// Values of one column at one time for the given trajectory range,
    /// multiplied by the weight when `weighted`.
    pub fn column(&self, range: Range<usize>, time: usize, col: Column, weighted: bool) -> Vec<f64> {
        range
            .map(|k| {
                let v = self.get(k, time, col);
                if weighted && col != Column::Weight {
                    v * self.get(k, time, Column::Weight)
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Ensemble averages at one sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub t: f64,
    pub mean_q: Estimate,
    pub mean_p: Estimate,
    pub mean_q2: Estimate,
    pub mean_p2: Estimate,
    /// M[⟨(qp+pq)/2⟩]
    pub mean_qp_sym: Estimate,
    /// M[Δq]
    pub m_dq: Estimate,
    pub m_dp: Estimate,
    /// M[ΔqΔp]/ħ
    pub m_uncert: Estimate,
    /// M[norm²]: 1 for normalised schemes, Tr ρ for the linear one.
    pub trace: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSnapshot<T> {
    pub t: f64,
    pub value: T,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDiagnostics {
    pub failures: Vec<String>,
    pub leakage_trajectories: usize,
    pub max_boundary_ratio: f64,
    pub max_norm_drift: f64,
    pub weight_warnings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub linear: bool,
    pub hbar: f64,
    pub series: Vec<SampleStats>,
    pub n_traj: usize,
    pub table: TrajectoryTable,
    /// Coarse-grid density matrices M[|ψ⟩⟨ψ|] at the grid times.
    pub density: Vec<GridSnapshot<GridDensity>>,
    /// Averages of per-trajectory Wigner functions at the grid times.
    pub wigner: Vec<GridSnapshot<WignerGrid>>,
    /// Coarse states of the first few trajectories, per grid time.
    pub snapshots: Vec<GridSnapshot<Vec<WaveFunction>>>,
    pub diagnostics: EnsembleDiagnostics,
}

impl EnsembleStats {
    pub fn times(&self) -> Vec<f64> {
        self.series.iter().map(|s| s.t).collect()
    }

    /// Statistics over a sub-range of the surviving trajectories.
    pub fn subset(&self, range: Range<usize>) -> Result<Vec<SampleStats>> {
        if range.start >= range.end || range.end > self.table.len() {
            return Err(invalid("range", "empty or out of bounds"));
        }
        Ok(series_from_table(&self.table, range, self.linear))
    }
}

fn series_from_table(table: &TrajectoryTable, range: Range<usize>, linear: bool) -> Vec<SampleStats> {
    (0..table.times.len())
        .map(|i| {
            let e = |c| Estimate::of(&table.column(range.clone(), i, c, linear));
            SampleStats {
                t: table.times[i],
                mean_q: e(Column::MeanQ),
                mean_p: e(Column::MeanP),
                mean_q2: e(Column::MeanQ2),
                mean_p2: e(Column::MeanP2),
                mean_qp_sym: e(Column::MeanQpSym),
                m_dq: e(Column::Dq),
                m_dp: e(Column::Dp),
                m_uncert: e(Column::Uncertainty),
                trace: e(Column::Weight),
            }
        })
        .collect()
}

/// Things that combine by addition; used by [`PairwiseTree`].
pub trait Merge {
    fn merge(&mut self, other: Self);
}

impl Merge for GridDensity {
    fn merge(&mut self, other: Self) {
        self.add_scaled(&other, 1.0);
    }
}

impl Merge for WignerGrid {
    fn merge(&mut self, other: Self) {
        self.add_scaled(&other, 1.0);
    }
}

impl<T: Merge> Merge for Vec<T> {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

/// Binary-counter pairwise summation of a stream of partial sums.
#[derive(Debug)]
pub struct PairwiseTree<T> {
    stack: Vec<(u32, T)>,
}

impl<T: Merge> Default for PairwiseTree<T> {
    fn default() -> Self {
        Self { stack: Vec::new() }
    }
}

impl<T: Merge> PairwiseTree<T> {
    pub fn push(&mut self, mut value: T) {
        let mut level = 0;
        while let Some((top, _)) = self.stack.last() {
            if *top != level {
                break;
            }
            let (_, mut left) = self.stack.pop().expect("non-empty");
            left.merge(value);
            value = left;
            level += 1;
        }
        self.stack.push((level, value));
    }

    pub fn finish(mut self) -> Option<T> {
        let (_, mut acc) = self.stack.pop()?;
        while let Some((_, mut left)) = self.stack.pop() {
            left.merge(acc);
            acc = left;
        }
        Some(acc)
    }
}

struct Outcome {
    index: u64,
    rows: Vec<[f64; N_COLUMNS]>,
    coarse: Vec<WaveFunction>,
    diagnostics: TrajectoryDiagnostics,
}

fn run_one(
    index: u64,
    cfg: &EnsembleConfig,
    exp: &Experiment,
    sampler: &NoiseSampler,
    initial: &WaveFunction,
    plan: &SamplePlan,
) -> Result<Outcome> {
    let noise = sampler.sample(NoiseStream::new(cfg.master_seed, index));
    let mut stepper = Stepper::new(exp.grid, &exp.params, &exp.potential, exp.stepper)?;
    let rec = run_with_stepper(&mut stepper, initial, &noise, plan)?;
    let hbar = exp.params.hbar;
    let rows = rec
        .samples
        .iter()
        .map(|s| {
            let o = &s.obs;
            let w = s.weight(rec.scheme.is_linear());
            let row = [
                w,
                o.mean_q,
                o.mean_p,
                o.mean_q2(),
                o.mean_p2(),
                o.mean_qp_sym,
                o.dq(),
                o.dp(),
                o.uncertainty(hbar),
            ];
            if row.iter().all(|x| x.is_finite()) {
                Ok(row)
            } else {
                Err(QbmError::TrajectoryDiverged {
                    trajectory: index,
                    step: (s.t / exp.stepper.dt).round() as usize,
                    norm_history: vec![o.norm],
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let coarse = rec
        .snapshots
        .iter()
        .map(|(_, psi)| {
            if cfg.coarsen == 1 {
                Ok(psi.clone())
            } else {
                psi.decimate(cfg.coarsen)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Outcome {
        index,
        rows,
        coarse,
        diagnostics: rec.diagnostics,
    })
}

/// Runs the ensemble described by `cfg` and `exp`.
pub fn run_ensemble(cfg: &EnsembleConfig, exp: &Experiment) -> Result<EnsembleStats> {
    cfg.validate()?;
    exp.validate()?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| invalid("ensemble.threads", e.to_string()))?
            .install(|| run_ensemble_inner(cfg, exp)),
        None => run_ensemble_inner(cfg, exp),
    }
}

fn run_ensemble_inner(cfg: &EnsembleConfig, exp: &Experiment) -> Result<EnsembleStats> {
    let dt = exp.stepper.dt;
    let hbar = exp.params.hbar;
    let linear = exp.stepper.scheme.is_linear();
    let sample_times = exp.resolved_sample_times();
    let grid_times = if cfg.wants_grids() {
        if cfg.grid_times.is_empty() {
            vec![exp.n_steps() as f64 * dt]
        } else {
            cfg.grid_times.clone()
        }
    } else {
        Vec::new()
    };
    if grid_times.iter().any(|t| *t > exp.horizon + 1e-9) {
        return Err(invalid("ensemble.grid_times", "must not exceed the horizon"));
    }
    let plan = SamplePlan::new(dt, &sample_times, &grid_times)?;
    let grid_times: Vec<f64> = plan.snapshot_steps.iter().map(|k| *k as f64 * dt).collect();
    let coarse_grid = if cfg.coarsen == 1 {
        exp.grid
    } else {
        exp.grid.coarsened(cfg.coarsen)?
    };
    let sampler = NoiseSampler::new(plan.n_steps(), dt, &exp.params, cfg.psd_repair)?;
    let initial = exp.initial.build(&exp.params, &exp.grid)?;
    let n_total = cfg.n_trajectories;

    let mut table = TrajectoryTable {
        times: plan.sample_times(),
        ..Default::default()
    };
    let mut diag = EnsembleDiagnostics::default();
    let mut density_tree: PairwiseTree<Vec<GridDensity>> = PairwiseTree::default();
    let mut wigner_tree: PairwiseTree<Vec<WignerGrid>> = PairwiseTree::default();
    let mut snapshots: Vec<Vec<WaveFunction>> = vec![Vec::new(); grid_times.len()];
    let max_failures = (MAX_FAILURE_FRACTION * n_total as f64).floor() as usize;

    for block_start in (0..n_total).step_by(BLOCK) {
        let block_end = (block_start + BLOCK).min(n_total);
        let outcomes: Vec<Result<Outcome>> = (block_start..block_end)
            .into_par_iter()
            .map(|k| run_one(k as u64, cfg, exp, &sampler, &initial, &plan))
            .collect();
        let mut ok = Vec::with_capacity(outcomes.len());
        for out in outcomes {
            match out {
                Ok(o) => ok.push(o),
                Err(e) => {
                    log::warn!("{e}");
                    diag.failures.push(e.to_string());
                    if diag.failures.len() > max_failures {
                        return Err(QbmError::EnsembleFailure {
                            failed: diag.failures.len(),
                            total: n_total,
                            first: diag.failures[0].clone(),
                        });
                    }
                }
            }
        }
        for o in &ok {
            table.push(o.index, &o.rows);
            let d = &o.diagnostics;
            if d.leakage_warnings > 0 {
                diag.leakage_trajectories += 1;
            }
            diag.max_boundary_ratio = diag.max_boundary_ratio.max(d.max_boundary_ratio);
            diag.max_norm_drift = diag.max_norm_drift.max(d.max_norm_drift);
            diag.weight_warnings += d.weight_warnings;
            if cfg.accumulate.snapshots && (o.index as usize) < cfg.snapshot_trajectories {
                for (g, psi) in o.coarse.iter().enumerate() {
                    snapshots[g].push(psi.clone());
                }
            }
        }
        if ok.is_empty() {
            continue;
        }
        if cfg.accumulate.density_grid {
            let block: Vec<GridDensity> = (0..grid_times.len())
                .map(|g| {
                    let states: Vec<&WaveFunction> = ok.iter().map(|o| &o.coarse[g]).collect();
                    sum_projectors(coarse_grid, &states)
                })
                .collect();
            density_tree.push(block);
        }
        if cfg.accumulate.wigner {
            let block: Vec<WignerGrid> = (0..grid_times.len())
                .map(|g| {
                    let states: Vec<&WaveFunction> = ok.iter().map(|o| &o.coarse[g]).collect();
                    let mut w = WignerGrid::zeros(&coarse_grid, hbar);
                    accumulate_states(&mut w, &states, 1.0);
                    w
                })
                .collect();
            wigner_tree.push(block);
        }
    }

    let n_ok = table.len();
    if n_ok == 0 {
        return Err(QbmError::EnsembleFailure {
            failed: diag.failures.len(),
            total: n_total,
            first: diag.failures.first().cloned().unwrap_or_default(),
        });
    }
    if diag.leakage_trajectories > 0 {
        log::warn!(
            "{} trajectories approached the grid boundary (max amplitude ratio {:.2e})",
            diag.leakage_trajectories,
            diag.max_boundary_ratio
        );
    }
    let inv_n = 1.0 / n_ok as f64;
    let density = density_tree
        .finish()
        .unwrap_or_default()
        .into_iter()
        .zip(&grid_times)
        .map(|(mut rho, t)| {
            rho.scale(inv_n);
            GridSnapshot { t: *t, value: rho }
        })
        .collect();
    let wigner = wigner_tree
        .finish()
        .unwrap_or_default()
        .into_iter()
        .zip(&grid_times)
        .map(|(mut w, t)| {
            w.scale(inv_n);
            GridSnapshot { t: *t, value: w }
        })
        .collect();
    let snapshots = if cfg.accumulate.snapshots {
        snapshots
            .into_iter()
            .zip(&grid_times)
            .map(|(v, t)| GridSnapshot { t: *t, value: v })
            .collect()
    } else {
        Vec::new()
    };
    let series = series_from_table(&table, 0..n_ok, linear);
    Ok(EnsembleStats {
        linear,
        hbar,
        series,
        n_traj: n_ok,
        table,
        density,
        wigner,
        snapshots,
        diagnostics: diag,
    })
}

/// Σ_k |ψ_k⟩⟨ψ_k| with rows computed in parallel and each row summed in the
/// order of `states`.
pub fn sum_projectors(grid: GridSpec, states: &[&WaveFunction]) -> GridDensity {
    let n = grid.n;
    let mut rho = GridDensity::zeros(grid);
    rho.values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for psi in states {
            let a = psi.amps[i];
            for (r, b) in row.iter_mut().zip(&psi.amps) {
                *r += a * b.conj();
            }
        }
    });
    rho
}

/// Trajectory-level localisation measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSeries {
    pub t: Vec<f64>,
    /// M[√⟨(q−⟨q⟩)²⟩]
    pub m_dq: Vec<Estimate>,
    /// M[ΔqΔp]/ħ
    pub m_uncert: Vec<Estimate>,
}

/// Means of per-trajectory widths, not widths of the mean state.
pub fn localization_metrics(stats: &EnsembleStats) -> LocalizationSeries {
    LocalizationSeries {
        t: stats.times(),
        m_dq: stats.series.iter().map(|s| s.m_dq).collect(),
        m_uncert: stats.series.iter().map(|s| s.m_uncert).collect(),
    }
}
