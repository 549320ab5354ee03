//! Single-trajectory time stepping.
//!
//! Each step is a Strang-type splitting of the deterministic Hamiltonian with
//! the bath terms inserted between the kinetic half-steps:
//!
//! 1. half kinetic step (momentum space);
//! 2. one exponential in position space carrying the potential, the transient
//!    q² term, the noise coupling, the Re g0 localisation term and the linear
//!    force coming from the Im g1 term;
//! 3. the remaining Im g1 term, which is a unitary squeeze about (⟨q⟩, ⟨p⟩),
//!    applied exactly as a product of four shears (alternating position- and
//!    momentum-space chirps);
//! 4. half kinetic step.
//!
//! The nonlinear schemes renormalise after every step; the linear scheme keeps
//! the norm, whose square is the trajectory's importance weight.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QbmError, Result};
use crate::model::{GridSpec, Observables, PhaseSpace, PhysicalParams, PotentialSpec, WaveFunction};
use crate::noise::{BathKernel, MemoryCoefficients, NoisePath, NoiseStream};
use crate::model::NoiseShiftMode;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Boundary-to-peak amplitude ratio above which a run is flagged as leaking.
pub const LEAKAGE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Normalised equation with time-dependent g0(t), g1(t).
    NonlinearFull,
    /// Normalised equation with the coefficients frozen at their asymptotes.
    NonlinearAsymptotic,
    /// Linear equation; norm² is the importance weight.
    Linear,
}

impl Scheme {
    pub fn is_linear(self) -> bool {
        self == Scheme::Linear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanQDotMode {
    /// m·d⟨q⟩/dt ≈ ⟨p⟩
    #[default]
    POverM,
    /// backward difference of ⟨q⟩ across the previous step
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperConfig {
    pub dt: f64,
    pub scheme: Scheme,
    #[serde(default)]
    pub mean_q_dot_mode: MeanQDotMode,
}

/// Step-size limits reported at configuration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// 0.1/Λ
    pub memory_bound: f64,
    /// dt·mγkT/(2ħ) ≤ ½: the localisation term may shrink a packet by at most
    /// a fraction of its width per step.
    pub localisation_bound: f64,
    pub warnings: Vec<String>,
}

impl StabilityReport {
    pub fn dt_max(&self) -> f64 {
        self.memory_bound.min(self.localisation_bound)
    }
}

impl StepperConfig {
    pub fn new(dt: f64, scheme: Scheme) -> Self {
        Self {
            dt,
            scheme,
            mean_q_dot_mode: MeanQDotMode::POverM,
        }
    }

    pub fn renormalize(&self) -> bool {
        !self.scheme.is_linear()
    }

    pub fn stability(&self, params: &PhysicalParams) -> StabilityReport {
        let memory_bound = 0.1 / params.lambda;
        let rate = params.mass * params.gamma * params.kt / (2.0 * params.hbar);
        let localisation_bound = if rate > 0.0 { 0.5 / rate } else { f64::INFINITY };
        let mut warnings = Vec::new();
        if params.include_re_g1 {
            warnings.push("include_re_g1 uses an explicit substep; keep dt small".to_string());
        }
        StabilityReport {
            memory_bound,
            localisation_bound,
            warnings,
        }
    }

    pub fn validate(&self, params: &PhysicalParams) -> Result<StabilityReport> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("stepper.dt", "must be > 0"));
        }
        let report = self.stability(params);
        // small slack so dt = 0.1/Λ written as a decimal literal passes
        if self.dt > report.dt_max() * (1.0 + 1e-9) {
            return Err(invalid(
                "stepper.dt",
                format!(
                    "dt = {} exceeds min(0.1/Λ = {}, localisation bound = {})",
                    self.dt, report.memory_bound, report.localisation_bound
                ),
            ));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    q: f64,
    p: f64,
    var_q: f64,
    var_p: f64,
}

impl Moments {
    fn midpoint(&self, other: &Moments) -> Moments {
        Moments {
            q: 0.5 * (self.q + other.q),
            p: 0.5 * (self.p + other.p),
            var_q: 0.5 * (self.var_q + other.var_q),
            var_p: 0.5 * (self.var_p + other.var_p),
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// norm² before renormalisation (nonlinear) or after the step (linear)
    pub norm_sq: f64,
    pub mean_q: f64,
}

/// Propagates one trajectory. Owns all scratch buffers; not shared between
/// trajectories.
pub struct Stepper {
    ps: PhaseSpace,
    params: PhysicalParams,
    potential: PotentialSpec,
    coeffs: MemoryCoefficients,
    kernel: BathKernel,
    config: StepperConfig,
    kin_half: Vec<Complex64>,
    /// position-space chirp scale c₁ of the shear factorisation
    chirp: f64,
    work: Vec<Complex64>,
    work2: Vec<Complex64>,
    trial: WaveFunction,
    prev_mean_q: Option<f64>,
    /// ⟨q⟩ at the step midpoints, for the shifted-noise mode
    q_history: Vec<f64>,
}

impl Stepper {
    pub fn new(
        grid: GridSpec,
        params: &PhysicalParams,
        potential: &PotentialSpec,
        config: StepperConfig,
    ) -> Result<Self> {
        params.validate()?;
        grid.validate()?;
        config.validate(params)?;
        let ps = PhaseSpace::new(grid, params.hbar);
        let kin_half = ps
            .p
            .iter()
            .map(|p| (-I * (p * p * config.dt / (4.0 * params.mass * params.hbar))).exp())
            .collect();
        let box_len = grid.q_max - grid.q_min;
        let chirp = 0.25 * grid.p_max(params.hbar) / box_len;
        Ok(Self {
            ps,
            params: params.clone(),
            potential: potential.clone(),
            coeffs: MemoryCoefficients::new(params),
            kernel: BathKernel::new(params),
            config,
            kin_half,
            chirp,
            work: vec![Complex64::new(0.0, 0.0); grid.n],
            work2: vec![Complex64::new(0.0, 0.0); grid.n],
            trial: WaveFunction::zeros(grid),
            prev_mean_q: None,
            q_history: Vec::new(),
        })
    }

    pub fn config(&self) -> &StepperConfig {
        &self.config
    }

    pub fn phase_space(&mut self) -> &mut PhaseSpace {
        &mut self.ps
    }

    /// Forget trajectory history (finite-difference and shifted-noise state).
    pub fn reset(&mut self) {
        self.prev_mean_q = None;
        self.q_history.clear();
    }

    pub fn observables(&mut self, psi: &WaveFunction) -> Observables {
        self.ps.observables(psi)
    }

    /// (g0, g1) used for a step centred at `t_mid`.
    fn step_coefficients(&self, t_mid: f64) -> (Complex64, Complex64, f64) {
        match self.config.scheme {
            Scheme::NonlinearAsymptotic => (self.coeffs.g0_inf(), self.coeffs.g1_inf(), 0.0),
            Scheme::NonlinearFull | Scheme::Linear => (
                self.coeffs.g0(t_mid),
                self.coeffs.g1(t_mid),
                self.coeffs.q2_coefficient(t_mid),
            ),
        }
    }

    /// Advances `psi` from `t` to `t + dt` with noise value `z` (sampled at the
    /// step midpoint).
    pub fn step(&mut self, psi: &mut WaveFunction, z: Complex64, t: f64) -> Result<StepInfo> {
        let dt = self.config.dt;
        let mass = self.params.mass;
        let t_mid = t + 0.5 * dt;
        let linear = self.config.scheme.is_linear();

        self.apply_kinetic_half(psi);

        let (m0, q_recorded) = if linear {
            (Moments::default(), 0.0)
        } else {
            let m = self.moments(psi);
            (m, m.q)
        };
        let m_qdot = match self.config.mean_q_dot_mode {
            MeanQDotMode::POverM => m0.p,
            MeanQDotMode::FiniteDifference => match self.prev_mean_q {
                Some(prev) => mass * (m0.q - prev) / dt,
                None => m0.p,
            },
        };
        self.prev_mean_q = Some(m0.q);
        let z_eff = if !linear && self.params.noise_shift_mode == NoiseShiftMode::Shifted {
            self.q_history.push(m0.q);
            z + self.noise_shift(t_mid)
        } else {
            z
        };

        // The bath generator depends on the packet's own moments. Using the
        // moments at the start of the substep is only first order, so the
        // substep is predicted once and redone with the averaged moments.
        let moments = if linear {
            m0
        } else {
            let empty = WaveFunction {
                grid: self.ps.grid,
                amps: Vec::new(),
            };
            let mut trial = std::mem::replace(&mut self.trial, empty);
            trial.clone_from(psi);
            self.bath_substep(&mut trial, z_eff, t_mid, m0, m_qdot);
            let m1 = self.moments(&trial);
            self.trial = trial;
            m0.midpoint(&m1)
        };
        let m_qdot = match self.config.mean_q_dot_mode {
            MeanQDotMode::POverM => moments.p,
            MeanQDotMode::FiniteDifference => m_qdot,
        };
        self.bath_substep(psi, z_eff, t_mid, moments, m_qdot);

        self.apply_kinetic_half(psi);

        let norm_sq = psi.norm_sq();
        if !norm_sq.is_finite() || psi.has_nan() || norm_sq == 0.0 {
            return Err(QbmError::TrajectoryDiverged {
                trajectory: 0,
                step: 0,
                norm_history: vec![norm_sq],
            });
        }
        if self.config.renormalize() {
            psi.normalize();
        }
        Ok(StepInfo {
            norm_sq,
            mean_q: q_recorded,
        })
    }

    fn apply_kinetic_half(&mut self, psi: &mut WaveFunction) {
        self.ps.plans.forward(&mut psi.amps);
        for (amp, k) in psi.amps.iter_mut().zip(&self.kin_half) {
            *amp *= k;
        }
        self.ps.plans.inverse(&mut psi.amps);
    }

    /// First and second moments of the (unnormalised) state in position space.
    fn moments(&mut self, psi: &WaveFunction) -> Moments {
        let mut w = 0.0;
        let mut sq = 0.0;
        let mut sq2 = 0.0;
        for (amp, q) in psi.amps.iter().zip(&self.ps.q) {
            let x = amp.norm_sqr();
            w += x;
            sq += x * q;
            sq2 += x * q * q;
        }
        self.work.copy_from_slice(&psi.amps);
        self.ps.plans.forward(&mut self.work);
        let mut wp = 0.0;
        let mut sp = 0.0;
        let mut sp2 = 0.0;
        for (amp, p) in self.work.iter().zip(&self.ps.p) {
            let x = amp.norm_sqr();
            wp += x;
            sp += x * p;
            sp2 += x * p * p;
        }
        let q = sq / w;
        let p = sp / wp;
        Moments {
            q,
            p,
            var_q: (sq2 / w - q * q).max(0.0),
            var_p: (sp2 / wp - p * p).max(0.0),
        }
    }

    /// Everything except the kinetic energy over one step, in position space on
    /// entry and exit.
    fn bath_substep(
        &mut self,
        psi: &mut WaveFunction,
        z_eff: Complex64,
        t_mid: f64,
        m: Moments,
        m_qdot: f64,
    ) {
        let dt = self.config.dt;
        let hbar = self.params.hbar;
        let mass = self.params.mass;
        let (g0, g1, q2_coeff) = self.step_coefficients(t_mid);
        let a = g0.re;
        let d = g1.im;
        let c = if self.params.include_re_g1 { g1.re } else { 0.0 };
        let linear = self.config.scheme.is_linear();

        // the squeeze is split in halves around the diagonal factor so the
        // substep is symmetric
        let apply_squeeze = d != 0.0;
        let (qc, pc) = if linear { (0.0, 0.0) } else { (m.q, m.p) };
        if apply_squeeze {
            self.squeeze(psi, 0.5 * d * dt, qc, pc);
        }
        let scale = dt / hbar;
        let force = if linear { 0.0 } else { d * (m.p + m_qdot) };
        let herm_force = if linear { 0.0 } else { c * (m.p - m_qdot) };
        // linear scheme: i·Im g1·qp = i·Im g1·(S + iħ/2) leaves a real factor
        let scalar = if linear { -0.5 * d * dt } else { 0.0 };
        for (amp, q) in psi.amps.iter_mut().zip(&self.ps.q) {
            let v = self.potential.eval(*q, t_mid, mass) + q2_coeff * q * q;
            let x = q - qc;
            let mut e = if linear {
                Complex64::new(-a * q * q, -v) + z_eff * q
            } else {
                Complex64::new(-a * (x * x - m.var_q) + herm_force * x, -v + force * q) + z_eff * x
            };
            e *= scale;
            e.re += scalar;
            *amp *= e.exp();
        }
        if apply_squeeze {
            self.squeeze(psi, 0.5 * d * dt, qc, pc);
        }

        if c != 0.0 {
            self.re_g1_substep(psi, c, qc, pc, m.var_p, linear);
        }
    }
    /// exp(iλ·sym((q−qc)(p−pc))/ħ), which scales position widths about qc by
    /// e^{−λ} and momentum widths about pc by e^{λ}. Factorised exactly into
    /// shears L(c₂)U(b₂)L(c₁)U(b₁) with L(c) = exp(ic(q−qc)²/2ħ) and
    /// U(b) = exp(−ib(p−pc)²/2ħ), each diagonal in one representation.
    /// Position space on entry and exit.
    fn squeeze(&mut self, psi: &mut WaveFunction, lambda: f64, qc: f64, pc: f64) {
        let hbar = self.params.hbar;
        let s = (-lambda).exp();
        let c1 = self.chirp;
        let (b1, b2, c2) = ((s - 1.0) / c1, (1.0 / s - 1.0) / c1, -s * c1);
        let chirp_q = |amps: &mut [Complex64], q: &[f64], c: f64| {
            for (amp, q) in amps.iter_mut().zip(q) {
                let x = q - qc;
                *amp *= (I * (c * x * x / (2.0 * hbar))).exp();
            }
        };
        let chirp_p = |amps: &mut [Complex64], p: &[f64], b: f64| {
            for (amp, p) in amps.iter_mut().zip(p) {
                let y = p - pc;
                *amp *= (-I * (b * y * y / (2.0 * hbar))).exp();
            }
        };
        chirp_q(&mut psi.amps, &self.ps.q, c2);
        self.ps.plans.forward(&mut psi.amps);
        chirp_p(&mut psi.amps, &self.ps.p, b2);
        self.ps.plans.inverse(&mut psi.amps);
        chirp_q(&mut psi.amps, &self.ps.q, c1);
        self.ps.plans.forward(&mut psi.amps);
        chirp_p(&mut psi.amps, &self.ps.p, b1);
        self.ps.plans.inverse(&mut psi.amps);
    }

    /// 2·Re ∫₀^t α*(t,s)⟨q⟩_s ds / ħ by the trapezoid rule over the recorded
    /// midpoint history (⟨q⟩ held constant on [0, dt/2]).
    fn noise_shift(&self, t: f64) -> Complex64 {
        let dt = self.config.dt;
        let h = &self.q_history;
        let n = h.len();
        if n == 0 {
            return Complex64::new(0.0, 0.0);
        }
        let f = |k: usize| self.kernel.alpha(t, (k as f64 + 0.5) * dt).conj() * h[k];
        let mut acc = f(0) * (0.5 * dt);
        for k in 1..n {
            acc += (f(k - 1) + f(k)) * (0.5 * dt);
        }
        Complex64::new(2.0 * acc.re / self.params.hbar, 0.0)
    }

    /// Explicit substep ψ += (c·dt/ħ)(S̃ − ⟨S̃⟩)ψ for the Re g1 term, with S̃ the
    /// symmetrised (q−q̄)(p−p̄) restricted to a window of ±8 widths around the
    /// packet in momentum; outside that window the generator is unbounded.
    fn re_g1_substep(
        &mut self,
        psi: &mut WaveFunction,
        c: f64,
        qc: f64,
        pc: f64,
        var_p: f64,
        linear: bool,
    ) {
        let hbar = self.params.hbar;
        let dt = self.config.dt;
        let p_cut = 8.0 * var_p.max(hbar * hbar).sqrt();
        let window = |y: f64| y * (-(y / p_cut).powi(8)).exp();
        // work = p̃ ψ
        self.work.copy_from_slice(&psi.amps);
        self.ps.plans.forward(&mut self.work);
        for (amp, p) in self.work.iter_mut().zip(&self.ps.p) {
            *amp *= window(p - pc);
        }
        self.ps.plans.inverse(&mut self.work);
        // work2 = p̃ (q̃ ψ)
        for ((w2, amp), q) in self.work2.iter_mut().zip(&psi.amps).zip(&self.ps.q) {
            *w2 = amp * (q - qc);
        }
        self.ps.plans.forward(&mut self.work2);
        for (amp, p) in self.work2.iter_mut().zip(&self.ps.p) {
            *amp *= window(p - pc);
        }
        self.ps.plans.inverse(&mut self.work2);
        let dq = self.ps.grid.dq();
        let mut s_mean = Complex64::new(0.0, 0.0);
        let mut norm = 0.0;
        for (i, q) in self.ps.q.iter().enumerate() {
            let sym = 0.5 * ((q - qc) * self.work[i] + self.work2[i]);
            self.work[i] = sym;
            s_mean += psi.amps[i].conj() * sym;
            norm += psi.amps[i].norm_sqr();
        }
        let s_mean = if linear { 0.0 } else { s_mean.re / norm };
        let k = c * dt / hbar;
        for (amp, sym) in psi.amps.iter_mut().zip(&self.work) {
            *amp += k * (sym - s_mean * *amp);
        }
        let _ = dq;
    }
}

/// One nonlinear step (full or asymptotic coefficients) on a fresh stepper.
#[allow(clippy::too_many_arguments)]
pub fn step_nonlinear(
    psi: &WaveFunction,
    z_value: Complex64,
    t: f64,
    dt: f64,
    asymptotic: bool,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<WaveFunction> {
    let scheme = if asymptotic {
        Scheme::NonlinearAsymptotic
    } else {
        Scheme::NonlinearFull
    };
    let mut stepper = Stepper::new(psi.grid, params, potential, StepperConfig::new(dt, scheme))?;
    let mut out = psi.clone();
    stepper.step(&mut out, z_value, t)?;
    Ok(out)
}

/// One step of the linear equation on a fresh stepper.
pub fn step_linear(
    psi: &WaveFunction,
    z_value: Complex64,
    t: f64,
    dt: f64,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<WaveFunction> {
    let mut stepper = Stepper::new(
        psi.grid,
        params,
        potential,
        StepperConfig::new(dt, Scheme::Linear),
    )?;
    let mut out = psi.clone();
    stepper.step(&mut out, z_value, t)?;
    Ok(out)
}

/// Sample and snapshot times mapped onto step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub dt: f64,
    pub sample_steps: Vec<usize>,
    pub snapshot_steps: Vec<usize>,
}

impl SamplePlan {
    /// Times must be non-negative multiples of dt (relative tolerance 1e-6 of
    /// a step); sample times must be strictly increasing.
    pub fn new(dt: f64, sample_times: &[f64], snapshot_times: &[f64]) -> Result<Self> {
        let to_step = |t: f64, what: &str| -> Result<usize> {
            let k = t / dt;
            let r = k.round();
            if t < 0.0 || !t.is_finite() || (k - r).abs() > 1e-6 {
                return Err(invalid(
                    what,
                    format!("time {t} is not a non-negative multiple of dt = {dt}"),
                ));
            }
            Ok(r as usize)
        };
        let sample_steps = sample_times
            .iter()
            .map(|t| to_step(*t, "sample_times"))
            .collect::<Result<Vec<_>>>()?;
        if sample_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("sample_times", "must be strictly increasing"));
        }
        let mut snapshot_steps = snapshot_times
            .iter()
            .map(|t| to_step(*t, "snapshot_times"))
            .collect::<Result<Vec<_>>>()?;
        snapshot_steps.sort_unstable();
        snapshot_steps.dedup();
        Ok(Self {
            dt,
            sample_steps,
            snapshot_steps,
        })
    }

    /// Evenly spaced samples every `every` steps up to `n_steps` inclusive.
    pub fn uniform(dt: f64, n_steps: usize, every: usize) -> Self {
        let every = every.max(1);
        let mut sample_steps: Vec<usize> = (0..=n_steps).step_by(every).collect();
        if sample_steps.last() != Some(&n_steps) {
            sample_steps.push(n_steps);
        }
        Self {
            dt,
            sample_steps,
            snapshot_steps: Vec::new(),
        }
    }

    pub fn n_steps(&self) -> usize {
        let a = self.sample_steps.last().copied().unwrap_or(0);
        let b = self.snapshot_steps.last().copied().unwrap_or(0);
        a.max(b)
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.sample_steps.iter().map(|k| *k as f64 * self.dt).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub obs: Observables,
}

impl TrajectorySample {
    /// Importance weight: norm² for the linear scheme, 1 otherwise.
    pub fn weight(&self, linear: bool) -> f64 {
        if linear {
            self.obs.norm
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub leakage_warnings: usize,
    pub max_boundary_ratio: f64,
    /// max |norm² − 1| before renormalisation (nonlinear schemes)
    pub max_norm_drift: f64,
    /// samples where the linear-scheme weight left [1e-4, 1e4]
    pub weight_warnings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub samples: Vec<TrajectorySample>,
    pub snapshots: Vec<(f64, WaveFunction)>,
    pub stream: NoiseStream,
    pub scheme: Scheme,
    pub diagnostics: TrajectoryDiagnostics,
}

impl TrajectoryRecord {
    /// Final linear-scheme weight (1 for normalised schemes).
    pub fn final_weight(&self) -> f64 {
        self.samples
            .last()
            .map_or(1.0, |s| s.weight(self.scheme.is_linear()))
    }
}

/// Runs one trajectory, recording observables at the plan's sample steps.
pub fn run_trajectory(
    initial: &WaveFunction,
    noise: &NoisePath,
    config: &StepperConfig,
    potential: &PotentialSpec,
    params: &PhysicalParams,
    plan: &SamplePlan,
) -> Result<TrajectoryRecord> {
    let mut stepper = Stepper::new(initial.grid, params, potential, *config)?;
    run_with_stepper(&mut stepper, initial, noise, plan)
}

/// As [`run_trajectory`], reusing an existing stepper (history is reset).
pub fn run_with_stepper(
    stepper: &mut Stepper,
    initial: &WaveFunction,
    noise: &NoisePath,
    plan: &SamplePlan,
) -> Result<TrajectoryRecord> {
    let n_steps = plan.n_steps();
    if noise.len() < n_steps {
        return Err(invalid(
            "noise",
            format!("path has {} values, run needs {n_steps}", noise.len()),
        ));
    }
    if (noise.dt - plan.dt).abs() > 1e-12 * plan.dt || (stepper.config.dt - plan.dt).abs() > 1e-12 * plan.dt {
        return Err(invalid("noise.dt", "noise, stepper and sample plan disagree on dt"));
    }
    stepper.reset();
    let scheme = stepper.config.scheme;
    let linear = scheme.is_linear();
    let dt = plan.dt;
    let mut psi = initial.clone();
    let mut samples = Vec::with_capacity(plan.sample_steps.len());
    let mut snapshots = Vec::with_capacity(plan.snapshot_steps.len());
    let mut diag = TrajectoryDiagnostics::default();
    let mut norms: Vec<f64> = Vec::new();
    let mut next_sample = 0;
    let mut next_snap = 0;

    let mut record = |k: usize,
                      psi: &WaveFunction,
                      stepper: &mut Stepper,
                      diag: &mut TrajectoryDiagnostics,
                      samples: &mut Vec<TrajectorySample>,
                      snapshots: &mut Vec<(f64, WaveFunction)>| {
        let t = k as f64 * dt;
        let mut checked = false;
        while next_sample < plan.sample_steps.len() && plan.sample_steps[next_sample] == k {
            let obs = stepper.observables(psi);
            if linear && !(1e-4..=1e4).contains(&obs.norm) {
                diag.weight_warnings += 1;
            }
            samples.push(TrajectorySample { t, obs });
            next_sample += 1;
            checked = true;
        }
        while next_snap < plan.snapshot_steps.len() && plan.snapshot_steps[next_snap] == k {
            snapshots.push((t, psi.clone()));
            next_snap += 1;
            checked = true;
        }
        if checked {
            let r = psi.boundary_ratio();
            diag.max_boundary_ratio = diag.max_boundary_ratio.max(r);
            if r > LEAKAGE_THRESHOLD {
                diag.leakage_warnings += 1;
            }
        }
    };

    record(0, &psi, stepper, &mut diag, &mut samples, &mut snapshots);
    for k in 0..n_steps {
        let t = k as f64 * dt;
        match stepper.step(&mut psi, noise.z[k], t) {
            Ok(info) => {
                if !linear {
                    diag.max_norm_drift = diag.max_norm_drift.max((info.norm_sq - 1.0).abs());
                }
                norms.push(info.norm_sq);
                if norms.len() > 8 {
                    norms.remove(0);
                }
            }
            Err(QbmError::TrajectoryDiverged { norm_history, .. }) => {
                norms.extend(norm_history);
                return Err(QbmError::TrajectoryDiverged {
                    trajectory: noise.stream.index,
                    step: k,
                    norm_history: norms,
                });
            }
            Err(e) => return Err(e),
        }
        record(k + 1, &psi, stepper, &mut diag, &mut samples, &mut snapshots);
    }
    if diag.leakage_warnings > 0 {
        log::warn!(
            "trajectory {}: boundary amplitude ratio reached {:.2e}",
            noise.stream.index,
            diag.max_boundary_ratio
        );
    }
    Ok(TrajectoryRecord {
        samples,
        snapshots,
        stream: noise.stream,
        scheme,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_coherent_state;
    use crate::noise::{NoiseSampler, PsdRepair};

    fn harmonic_params(hbar: f64, gamma: f64) -> PhysicalParams {
        PhysicalParams {
            gamma,
            ..PhysicalParams::duffing_bath(hbar)
        }
    }

    #[test]
    fn zero_duration_run_records_initial_state() {
        let p = harmonic_params(0.05, 0.25);
        let grid = GridSpec::new(-4.0, 4.0, 256).unwrap();
        let psi = make_coherent_state(0.5, 0.2, &p, None, &grid).unwrap();
        let plan = SamplePlan::new(0.01, &[0.0], &[]).unwrap();
        let noise = NoisePath::zeros(0, 0.01);
        let cfg = StepperConfig::new(0.01, Scheme::NonlinearFull);
        let rec = run_trajectory(&psi, &noise, &cfg, &PotentialSpec::Harmonic { omega: 1.0 }, &p, &plan).unwrap();
        assert_eq!(rec.samples.len(), 1);
        assert!((rec.samples[0].obs.mean_q - 0.5).abs() < 1e-10);
    }

    #[test]
    fn dt_bound_enforced() {
        let p = harmonic_params(0.01, 0.25);
        let cfg = StepperConfig::new(0.05, Scheme::NonlinearFull);
        assert!(cfg.validate(&p).is_err());
        assert!(StepperConfig::new(0.02, Scheme::NonlinearFull).validate(&p).is_ok());
    }

    #[test]
    fn sample_plan_validation() {
        assert!(SamplePlan::new(0.01, &[0.0, 0.015], &[]).is_err());
        assert!(SamplePlan::new(0.01, &[0.1, 0.05], &[]).is_err());
        let plan = SamplePlan::new(0.01, &[0.0, 0.5, 1.0], &[0.3]).unwrap();
        assert_eq!(plan.sample_steps, vec![0, 50, 100]);
        assert_eq!(plan.n_steps(), 100);
        let u = SamplePlan::uniform(0.01, 95, 10);
        assert_eq!(*u.sample_steps.last().unwrap(), 95);
    }

    #[test]
    fn squeeze_scales_widths() {
        // pure Im g1 step: with V = 0, z = 0, a = 0 the bath part is the squeeze
        // exp(iλS̃/ħ), which maps Δq → e^{−λ}Δq and Δp → e^{λ}Δp.
        let hbar = 0.02;
        let grid = GridSpec::new(-3.0, 3.0, 2048).unwrap();
        let p = PhysicalParams {
            hbar,
            mass: 1.0,
            gamma: 0.0,
            kt: 0.0,
            lambda: 5.0,
            noise_shift_mode: NoiseShiftMode::Raw,
            include_re_g1: false,
        };
        let psi = make_coherent_state(0.4, -0.3, &p, None, &grid).unwrap();
        let mut stepper = Stepper::new(grid, &p, &PotentialSpec::Polynomial { coeffs: vec![] }, StepperConfig::new(0.01, Scheme::NonlinearFull)).unwrap();
        let o0 = stepper.observables(&psi);
        // drive the shear path directly
        let lambda = 0.05;
        let mut out = psi.clone();
        apply_squeeze_for_test(&mut stepper, &mut out, lambda, o0.mean_q, o0.mean_p);
        let o1 = stepper.observables(&out);
        assert!((o1.dq() / o0.dq() - (-lambda).exp()).abs() < 1e-9);
        assert!((o1.dp() / o0.dp() - lambda.exp()).abs() < 1e-9);
        assert!((o1.mean_q - o0.mean_q).abs() < 1e-9);
        assert!((o1.mean_p - o0.mean_p).abs() < 1e-9);
        assert!((out.norm_sq() - 1.0).abs() < 1e-12);
    }

    fn apply_squeeze_for_test(st: &mut Stepper, psi: &mut WaveFunction, lambda: f64, qc: f64, pc: f64) {
        st.squeeze(psi, lambda, qc, pc);
    }

    #[test]
    fn nonlinear_step_keeps_unit_norm() {
        let p = PhysicalParams::duffing_bath(0.01);
        let grid = GridSpec::new(-2.5, 2.5, 1024).unwrap();
        let psi = make_coherent_state(0.1, 0.1, &p, None, &grid).unwrap();
        let pot = PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 };
        let out = step_nonlinear(&psi, Complex64::new(0.4, -0.2), 0.3, 0.02, false, &pot, &p).unwrap();
        assert!((out.norm_sq() - 1.0).abs() < 1e-10);
        let asym = step_nonlinear(&psi, Complex64::new(0.4, -0.2), 0.3, 0.02, true, &pot, &p).unwrap();
        assert!((asym.norm_sq() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_step_without_bath_is_unitary() {
        let p = harmonic_params(0.05, 0.0);
        let grid = GridSpec::new(-4.0, 4.0, 512).unwrap();
        let psi = make_coherent_state(0.7, 0.0, &p, None, &grid).unwrap();
        let out = step_linear(&psi, Complex64::new(0.0, 0.0), 0.0, 0.01, &PotentialSpec::Harmonic { omega: 1.0 }, &p).unwrap();
        assert!((out.norm_sq() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let p = PhysicalParams::duffing_bath(0.01);
        let grid = GridSpec::new(-2.5, 2.5, 1024).unwrap();
        let psi = make_coherent_state(0.1, 0.1, &p, None, &grid).unwrap();
        let sampler = NoiseSampler::new(50, 0.02, &p, PsdRepair::Strict).unwrap();
        let plan = SamplePlan::uniform(0.02, 50, 10);
        let cfg = StepperConfig::new(0.02, Scheme::NonlinearFull);
        let pot = PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 };
        let noise = sampler.sample(NoiseStream::new(42, 5));
        let a = run_trajectory(&psi, &noise, &cfg, &pot, &p, &plan).unwrap();
        let b = run_trajectory(&psi, &noise, &cfg, &pot, &p, &plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shifted_mode_differs_from_raw() {
        let mut p = PhysicalParams::duffing_bath(0.01);
        let grid = GridSpec::new(-2.5, 2.5, 1024).unwrap();
        let psi = make_coherent_state(0.5, 0.0, &p, None, &grid).unwrap();
        let sampler = NoiseSampler::new(20, 0.02, &p, PsdRepair::Strict).unwrap();
        let noise = sampler.sample(NoiseStream::new(1, 0));
        let plan = SamplePlan::uniform(0.02, 20, 20);
        let cfg = StepperConfig::new(0.02, Scheme::NonlinearFull);
        let pot = PotentialSpec::Harmonic { omega: 1.0 };
        let raw = run_trajectory(&psi, &noise, &cfg, &pot, &p, &plan).unwrap();
        p.noise_shift_mode = NoiseShiftMode::Shifted;
        let shifted = run_trajectory(&psi, &noise, &cfg, &pot, &p, &plan).unwrap();
        let dq = raw.samples[1].obs.mean_q - shifted.samples[1].obs.mean_q;
        assert!(dq.abs() > 1e-4, "shift should push ⟨q⟩ outward: {dq}");
    }

    fn closed(hbar: f64) -> PhysicalParams {
        harmonic_params(hbar, 0.0)
    }

    fn run_closed(
        psi: &WaveFunction,
        p: &PhysicalParams,
        pot: &PotentialSpec,
        dt: f64,
        n_steps: usize,
        every: usize,
    ) -> TrajectoryRecord {
        let plan = SamplePlan::uniform(dt, n_steps, every);
        let noise = NoisePath::zeros(n_steps, dt);
        let cfg = StepperConfig::new(dt, Scheme::NonlinearFull);
        let mut rec = run_trajectory(psi, &noise, &cfg, pot, p, &plan).unwrap();
        rec.snapshots.clear();
        rec
    }

    fn final_state(psi: &WaveFunction, p: &PhysicalParams, pot: &PotentialSpec, dt: f64, t: f64) -> WaveFunction {
        let n = (t / dt).round() as usize;
        let mut st = Stepper::new(psi.grid, p, pot, StepperConfig::new(dt, Scheme::NonlinearFull)).unwrap();
        let mut out = psi.clone();
        for k in 0..n {
            st.step(&mut out, Complex64::new(0.0, 0.0), k as f64 * dt).unwrap();
        }
        out
    }

    fn distance(a: &WaveFunction, b: &WaveFunction) -> f64 {
        let mut d = a.clone();
        d.add_scaled(b, Complex64::new(-1.0, 0.0));
        d.norm_sq().sqrt()
    }

    #[test]
    fn closed_harmonic_oscillation() {
        let p = closed(0.05);
        let grid = GridSpec::new(-4.0, 4.0, 512).unwrap();
        let psi = make_coherent_state(1.0, 0.0, &p, None, &grid).unwrap();
        let dt = 0.01;
        let n = (2.0 * std::f64::consts::PI / dt).round() as usize;
        let rec = run_closed(&psi, &p, &PotentialSpec::Harmonic { omega: 1.0 }, dt, n, 10);
        for s in &rec.samples {
            let want = s.t.cos();
            assert!((s.obs.mean_q - want).abs() < 1e-3, "t={} q={} want={}", s.t, s.obs.mean_q, want);
            assert!((s.obs.mean_p + s.t.sin()).abs() < 1e-3);
        }
    }

    #[test]
    fn closed_harmonic_energy_conserved() {
        // Strang splitting conserves a modified energy; the deviation from ⟨H⟩
        // oscillates with amplitude O(dt²), about 2e-5 at dt = 0.01
        let p = closed(0.05);
        let grid = GridSpec::new(-4.0, 4.0, 512).unwrap();
        let psi = make_coherent_state(1.0, 0.0, &p, None, &grid).unwrap();
        let dt = 0.001;
        let n = (2.0 * std::f64::consts::PI / dt).round() as usize;
        let rec = run_closed(&psi, &p, &PotentialSpec::Harmonic { omega: 1.0 }, dt, n, 50);
        let energy = |o: &Observables| 0.5 * (o.mean_p2() + o.mean_q2());
        let e0 = energy(&rec.samples[0].obs);
        for s in &rec.samples {
            let drift = (energy(&s.obs) - e0).abs() / e0;
            assert!(drift < 1e-6, "energy drift {drift:.2e} at t={}", s.t);
        }
    }

    #[test]
    fn free_packet_spreads() {
        let p = closed(0.05);
        let grid = GridSpec::new(-8.0, 8.0, 1024).unwrap();
        let psi = make_coherent_state(0.0, 0.5, &p, None, &grid).unwrap();
        let sigma2 = p.hbar / 2.0;
        let sp2 = p.hbar / 2.0;
        let rec = run_closed(&psi, &p, &PotentialSpec::Polynomial { coeffs: vec![] }, 0.01, 300, 50);
        for s in &rec.samples {
            let want = sigma2 + sp2 * s.t * s.t;
            assert!((s.obs.var_q - want).abs() < 1e-10, "t={}", s.t);
            assert!((s.obs.mean_q - 0.5 * s.t).abs() < 1e-10);
        }
    }

    #[test]
    fn closed_duffing_is_second_order() {
        let p = closed(0.05);
        let grid = GridSpec::new(-3.0, 3.0, 512).unwrap();
        let psi = make_coherent_state(0.8, 0.2, &p, None, &grid).unwrap();
        let pot = PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 };
        let a = final_state(&psi, &p, &pot, 0.02, 1.0);
        let b = final_state(&psi, &p, &pot, 0.01, 1.0);
        let c = final_state(&psi, &p, &pot, 0.005, 1.0);
        let order = (distance(&a, &b) / distance(&b, &c)).log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn damped_duffing_is_second_order() {
        let p = PhysicalParams::duffing_bath(0.05);
        let grid = GridSpec::new(-3.0, 3.0, 512).unwrap();
        let psi = make_coherent_state(0.8, 0.2, &p, None, &grid).unwrap();
        let pot = PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 };
        let a = final_state(&psi, &p, &pot, 0.02, 1.0);
        let b = final_state(&psi, &p, &pot, 0.01, 1.0);
        let c = final_state(&psi, &p, &pot, 0.005, 1.0);
        let order = (distance(&a, &b) / distance(&b, &c)).log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn even_potential_preserves_parity() {
        let p = PhysicalParams::duffing_bath(0.05);
        let grid = GridSpec::new(-3.0, 3.0, 512).unwrap();
        let left = make_coherent_state(-0.7, 0.0, &p, None, &grid).unwrap();
        let right = make_coherent_state(0.7, 0.0, &p, None, &grid).unwrap();
        let one = Complex64::new(1.0, 0.0);
        let psi = crate::model::superpose(&[(one, &left), (one, &right)]).unwrap();
        let pot = PotentialSpec::Duffing { g: 0.0, drive_freq: 1.0 };
        let out = final_state(&psi, &p, &pot, 0.01, 1.0);
        let n = grid.n;
        let peak = out.max_abs();
        for i in 1..n {
            assert!((out.amps[i] - out.amps[n - i]).norm() < 1e-10 * peak.max(1.0));
        }
    }

    #[test]
    fn local_error_with_noise_is_third_order() {
        // one step of dt against two of dt/2 with the same (held) noise value;
        // the one-step discrepancy must shrink at least like dt^1.8
        let p = PhysicalParams::duffing_bath(0.05);
        let grid = GridSpec::new(-3.0, 3.0, 512).unwrap();
        let psi = make_coherent_state(0.6, -0.2, &p, None, &grid).unwrap();
        let pot = PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 };
        let z = Complex64::new(0.8, -0.5);
        let t0 = 0.35;
        let gap = |dt: f64, scheme: Scheme| {
            let cfg = StepperConfig::new(dt, scheme);
            let mut one = psi.clone();
            Stepper::new(grid, &p, &pot, cfg).unwrap().step(&mut one, z, t0).unwrap();
            let cfg = StepperConfig::new(0.5 * dt, scheme);
            let mut st = Stepper::new(grid, &p, &pot, cfg).unwrap();
            let mut two = psi.clone();
            st.step(&mut two, z, t0).unwrap();
            st.step(&mut two, z, t0 + 0.5 * dt).unwrap();
            let a = st.observables(&one);
            let b = st.observables(&two);
            (a.mean_q - b.mean_q).abs() + (a.mean_p - b.mean_p).abs() + (a.var_q - b.var_q).abs()
        };
        for scheme in [Scheme::NonlinearFull, Scheme::NonlinearAsymptotic, Scheme::Linear] {
            let order = (gap(1e-3, scheme) / gap(5e-4, scheme)).log2();
            assert!(order >= 1.8, "{scheme:?}: measured order {order}");
        }
    }

    #[test]
    fn even_state_keeps_zero_mean_position() {
        let p = PhysicalParams::duffing_bath(0.05);
        let grid = GridSpec::new(-3.0, 3.0, 512).unwrap();
        let left = make_coherent_state(-0.5, 0.0, &p, None, &grid).unwrap();
        let right = make_coherent_state(0.5, 0.0, &p, None, &grid).unwrap();
        let one = Complex64::new(1.0, 0.0);
        let psi = crate::model::superpose(&[(one, &left), (one, &right)]).unwrap();
        let pot = PotentialSpec::Duffing { g: 0.0, drive_freq: 1.0 };
        let rec = run_closed(&psi, &p, &pot, 0.01, 200, 10);
        for s in &rec.samples {
            assert!(s.obs.mean_q.abs() < 1e-8, "t={} ⟨q⟩={}", s.t, s.obs.mean_q);
        }
    }
}
