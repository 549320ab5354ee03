//! Physical parameters, potentials, position grids and pure states on them.
//!
//! A [`WaveFunction`] lives on a uniform periodic grid `q_i = q_min + i·dq`,
//! `i = 0..n`. Its momentum representation is the unnormalised DFT of the
//! amplitudes, with bin `j` sitting at `p_j = ħ·2π·j_signed/(n·dq)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QbmError, Result};
use crate::spectral::{signed_index, Plans};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Noise fed to the normalised (nonlinear) stepper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseShiftMode {
    /// z_t exactly as sampled.
    #[default]
    Raw,
    /// z_t + 2·Re ∫₀ᵗ α*(t,s)⟨q⟩_s ds / ħ.
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    pub hbar: f64,
    #[serde(default = "default_mass")]
    pub mass: f64,
    pub gamma: f64,
    pub kt: f64,
    /// Bath cutoff frequency Λ.
    pub lambda: f64,
    #[serde(default)]
    pub noise_shift_mode: NoiseShiftMode,
    #[serde(default)]
    pub include_re_g1: bool,
}

fn default_mass() -> f64 {
    1.0
}

impl PhysicalParams {
    /// Thermal Duffing bath used throughout the experiments.
    pub fn duffing_bath(hbar: f64) -> Self {
        Self {
            hbar,
            mass: 1.0,
            gamma: 0.25,
            kt: 0.3,
            lambda: 5.0,
            noise_shift_mode: NoiseShiftMode::Raw,
            include_re_g1: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hbar > 0.0 && self.hbar.is_finite()) {
            return Err(invalid("hbar", "must be > 0"));
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(invalid("mass", "must be > 0"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", "must be >= 0"));
        }
        if !(self.kt >= 0.0 && self.kt.is_finite()) {
            return Err(invalid("kt", "must be >= 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", "must be > 0"));
        }
        Ok(())
    }

    /// Violations of kT ≥ ħΛ and Λ ≥ max(ω, γ). These are warnings, not errors.
    pub fn regime_warnings(&self, omega_typical: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.kt < self.hbar * self.lambda {
            out.push(format!(
                "outside high-temperature regime: kT = {} < ħΛ = {}",
                self.kt,
                self.hbar * self.lambda
            ));
        }
        let slow = omega_typical.max(self.gamma);
        if self.lambda < slow {
            out.push(format!(
                "cutoff Λ = {} below system scale max(ω, γ) = {}",
                self.lambda, slow
            ));
        }
        out
    }
}

/// Potential V(q, t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// q⁴/4 − q²/2 + g·q·cos(drive_freq·t)
    Duffing {
        g: f64,
        #[serde(default = "default_drive_freq")]
        drive_freq: f64,
    },
    /// ½ m ω² q²
    Harmonic { omega: f64 },
    /// Σ_k coeffs[k]·q^k
    Polynomial { coeffs: Vec<f64> },
}

fn default_drive_freq() -> f64 {
    1.0
}

impl PotentialSpec {
    pub fn eval(&self, q: f64, t: f64, mass: f64) -> f64 {
        match self {
            PotentialSpec::Duffing { g, drive_freq } => {
                let q2 = q * q;
                0.25 * q2 * q2 - 0.5 * q2 + g * q * (drive_freq * t).cos()
            }
            PotentialSpec::Harmonic { omega } => 0.5 * mass * omega * omega * q * q,
            PotentialSpec::Polynomial { coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * q + c)
            }
        }
    }

    /// Power-series coefficients of V(·, t), lowest order first.
    pub fn polynomial_coeffs(&self, t: f64, mass: f64) -> Vec<f64> {
        match self {
            PotentialSpec::Duffing { g, drive_freq } => {
                vec![0.0, g * (drive_freq * t).cos(), -0.5, 0.0, 0.25]
            }
            PotentialSpec::Harmonic { omega } => vec![0.0, 0.0, 0.5 * mass * omega * omega],
            PotentialSpec::Polynomial { coeffs } => coeffs.clone(),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, PotentialSpec::Duffing { g, .. } if *g != 0.0)
    }

    /// Even in q at every t.
    pub fn is_even(&self) -> bool {
        match self {
            PotentialSpec::Duffing { g, .. } => *g == 0.0,
            PotentialSpec::Harmonic { .. } => true,
            PotentialSpec::Polynomial { coeffs } => {
                coeffs.iter().skip(1).step_by(2).all(|c| *c == 0.0)
            }
        }
    }

    /// Frequency scale used for the regime check.
    pub fn typical_frequency(&self, mass: f64) -> f64 {
        match self {
            PotentialSpec::Harmonic { omega } => *omega,
            PotentialSpec::Duffing { drive_freq, .. } => drive_freq.max(1.0),
            PotentialSpec::Polynomial { coeffs } => {
                let c2 = coeffs.get(2).copied().unwrap_or(0.0);
                (2.0 * c2.abs() / mass).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub q_min: f64,
    pub q_max: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(q_min: f64, q_max: f64, n: usize) -> Result<Self> {
        let g = Self { q_min, q_max, n };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !self.n.is_power_of_two() {
            return Err(invalid("grid.n", format!("{} is not a power of two", self.n)));
        }
        if !(self.q_max > self.q_min) || !self.q_min.is_finite() || !self.q_max.is_finite() {
            return Err(invalid("grid", "q_max must exceed q_min"));
        }
        Ok(())
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / self.n as f64
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.q(i)).collect()
    }

    /// Wavenumbers 2πj/(n·dq) in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let scale = 2.0 * PI / (self.n as f64 * self.dq());
        (0..self.n)
            .map(|j| signed_index(j, self.n) as f64 * scale)
            .collect()
    }

    /// Momenta ħk in FFT order.
    pub fn momenta(&self, hbar: f64) -> Vec<f64> {
        self.wavenumbers().into_iter().map(|k| hbar * k).collect()
    }

    pub fn p_max(&self, hbar: f64) -> f64 {
        hbar * PI / self.dq()
    }

    /// Every `factor`-th point of this grid.
    pub fn coarsened(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || !factor.is_power_of_two() || factor >= self.n {
            return Err(invalid("coarsen", format!("bad coarsening factor {factor}")));
        }
        Ok(GridSpec {
            q_min: self.q_min,
            q_max: self.q_max,
            n: self.n / factor,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    pub grid: GridSpec,
    pub amps: Vec<Complex64>,
}

/// Expectation values of a (possibly unnormalised) state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub mean_q: f64,
    pub mean_p: f64,
    /// ⟨q p⟩ as the plain operator product; Im part is ħ/2 up to discretisation.
    pub mean_qp: Complex64,
    /// ⟨(qp + pq)/2⟩
    pub mean_qp_sym: f64,
    pub var_q: f64,
    pub var_p: f64,
    /// dq·Σ|ψ|²
    pub norm: f64,
}

impl Observables {
    pub fn mean_q2(&self) -> f64 {
        self.var_q + self.mean_q * self.mean_q
    }

    pub fn mean_p2(&self) -> f64 {
        self.var_p + self.mean_p * self.mean_p
    }

    pub fn dq(&self) -> f64 {
        self.var_q.max(0.0).sqrt()
    }

    pub fn dp(&self) -> f64 {
        self.var_p.max(0.0).sqrt()
    }

    /// Δq·Δp/ħ
    pub fn uncertainty(&self, hbar: f64) -> f64 {
        self.dq() * self.dp() / hbar
    }

    pub fn is_finite(&self) -> bool {
        [self.mean_q, self.mean_p, self.var_q, self.var_p, self.norm]
            .iter()
            .all(|x| x.is_finite())
    }
}

impl WaveFunction {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            amps: vec![Complex64::new(0.0, 0.0); grid.n],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64) -> Complex64) -> Self {
        let amps = (0..grid.n).map(|i| f(grid.q(i))).collect();
        Self { grid, amps }
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.grid.dq() * self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>()
    }

    /// Rescales to unit norm and returns the previous norm².
    pub fn normalize(&mut self) -> f64 {
        let n2 = self.norm_sq();
        if n2 > 0.0 {
            let s = 1.0 / n2.sqrt();
            self.amps.iter_mut().for_each(|a| *a *= s);
        }
        n2
    }

    pub fn scale(&mut self, factor: Complex64) {
        self.amps.iter_mut().for_each(|a| *a *= factor);
    }

    /// ⟨φ|ψ⟩ by grid quadrature.
    pub fn inner(&self, other: &WaveFunction) -> Complex64 {
        let dq = self.grid.dq();
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * dq
    }

    pub fn add_scaled(&mut self, other: &WaveFunction, c: Complex64) {
        for (a, b) in self.amps.iter_mut().zip(&other.amps) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.amps.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// max(|ψ(q_min)|, |ψ(q_max − dq)|) / max|ψ|
    pub fn boundary_ratio(&self) -> f64 {
        let m = self.max_abs();
        if m == 0.0 {
            return 0.0;
        }
        let first = self.amps.first().map_or(0.0, |a| a.norm());
        let last = self.amps.last().map_or(0.0, |a| a.norm());
        first.max(last) / m
    }

    /// Momentum-space amplitudes (unnormalised DFT, FFT order).
    pub fn momentum_amplitudes(&self) -> Vec<Complex64> {
        let mut buf = self.amps.clone();
        Plans::new(self.grid.n).forward(&mut buf);
        buf
    }

    /// Momentum density |ψ̃(p_j)|² in FFT order, normalised so Σ|ψ̃|²·dp = norm².
    pub fn momentum_density(&self, hbar: f64) -> Vec<f64> {
        let dq = self.grid.dq();
        let scale = dq * dq / (2.0 * PI * hbar);
        self.momentum_amplitudes()
            .iter()
            .map(|a| a.norm_sqr() * scale)
            .collect()
    }

    /// Every `factor`-th amplitude; exact for states band-limited to the coarse Nyquist range.
    pub fn decimate(&self, factor: usize) -> Result<WaveFunction> {
        let grid = self.grid.coarsened(factor)?;
        let amps = self.amps.iter().step_by(factor).copied().collect();
        Ok(WaveFunction { grid, amps })
    }

    pub fn has_nan(&self) -> bool {
        self.amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite())
    }
}

/// Default coherent-state width √(ħ/2mω) at ω = 1.
pub fn default_sigma_q(params: &PhysicalParams) -> f64 {
    (params.hbar / (2.0 * params.mass)).sqrt()
}

const TAIL_THRESHOLD: f64 = 1e-8;

/// Normalised Gaussian ψ(q) ∝ exp(−(q−q0)²/(4σ²) + i p0 q/ħ).
///
/// `sigma_q = None` selects [`default_sigma_q`]. Fails when either the
/// position tails at the box edges or the momentum tails at ±p_max exceed
/// 1e-8 of the peak.
pub fn make_coherent_state(
    q0: f64,
    p0: f64,
    params: &PhysicalParams,
    sigma_q: Option<f64>,
    grid: &GridSpec,
) -> Result<WaveFunction> {
    params.validate()?;
    grid.validate()?;
    let sigma = sigma_q.unwrap_or_else(|| default_sigma_q(params));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma_q", "must be > 0"));
    }
    let hbar = params.hbar;
    let log_tail = -TAIL_THRESHOLD.ln();
    let q_edge = (q0 - grid.q_min).min(grid.q_max - grid.dq() - q0);
    if q_edge <= 0.0 || q_edge * q_edge / (4.0 * sigma * sigma) < log_tail {
        return Err(QbmError::GridOverflow(format!(
            "position tail of packet at q0={q0} (σ={sigma:.4}) exceeds {TAIL_THRESHOLD:e} at the box edge"
        )));
    }
    let sigma_p = hbar / (2.0 * sigma);
    let p_edge = grid.p_max(hbar) - p0.abs();
    if p_edge <= 0.0 || p_edge * p_edge / (4.0 * sigma_p * sigma_p) < log_tail {
        return Err(QbmError::GridOverflow(format!(
            "momentum tail of packet at p0={p0} (σ_p={sigma_p:.4}) exceeds {TAIL_THRESHOLD:e} at p_max={:.4}",
            grid.p_max(hbar)
        )));
    }
    let mut psi = WaveFunction::from_fn(*grid, |q| {
        let x = q - q0;
        (Complex64::new(-x * x / (4.0 * sigma * sigma), p0 * q / hbar)).exp()
    });
    psi.normalize();
    Ok(psi)
}

/// Normalised superposition Σ c_k ψ_k.
pub fn superpose(parts: &[(Complex64, &WaveFunction)]) -> Result<WaveFunction> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("parts", "empty superposition"))?;
    let mut out = WaveFunction::zeros(first.1.grid);
    for (c, psi) in parts {
        if psi.grid != out.grid {
            return Err(invalid("parts", "grids differ"));
        }
        out.add_scaled(psi, *c);
    }
    if out.normalize() == 0.0 {
        return Err(invalid("parts", "superposition vanishes"));
    }
    Ok(out)
}

/// Position/momentum workspace reused across calls on one grid.
#[derive(Clone)]
pub struct PhaseSpace {
    pub grid: GridSpec,
    pub hbar: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub plans: Plans,
    buf: Vec<Complex64>,
}

impl PhaseSpace {
    pub fn new(grid: GridSpec, hbar: f64) -> Self {
        Self {
            grid,
            hbar,
            q: grid.positions(),
            p: grid.momenta(hbar),
            plans: Plans::new(grid.n),
            buf: vec![Complex64::new(0.0, 0.0); grid.n],
        }
    }

    /// Observables with p applied spectrally. Expectations refer to the
    /// normalised state; `norm` reports dq·Σ|ψ|².
    pub fn observables(&mut self, psi: &WaveFunction) -> Observables {
        let dq = self.grid.dq();
        let mut w = 0.0;
        let mut sq = 0.0;
        let mut sq2 = 0.0;
        for (a, q) in psi.amps.iter().zip(&self.q) {
            let d = a.norm_sqr();
            w += d;
            sq += d * q;
            sq2 += d * q * q;
        }
        let norm = w * dq;
        let mean_q = sq / w;
        let var_q = (sq2 / w - mean_q * mean_q).max(0.0);

        self.buf.copy_from_slice(&psi.amps);
        self.plans.forward(&mut self.buf);
        let mut wp = 0.0;
        let mut sp = 0.0;
        let mut sp2 = 0.0;
        for (a, p) in self.buf.iter_mut().zip(&self.p) {
            let d = a.norm_sqr();
            wp += d;
            sp += d * p;
            sp2 += d * p * p;
            *a *= *p;
        }
        let mean_p = sp / wp;
        let var_p = (sp2 / wp - mean_p * mean_p).max(0.0);
        self.plans.inverse(&mut self.buf);
        let qp: Complex64 = psi
            .amps
            .iter()
            .zip(&self.buf)
            .zip(&self.q)
            .map(|((a, pa), q)| a.conj() * pa * *q)
            .sum::<Complex64>()
            / w;
        Observables {
            mean_q,
            mean_p,
            mean_qp: qp,
            mean_qp_sym: qp.re,
            var_q,
            var_p,
            norm,
        }
    }

    /// Multiplies momentum-space amplitudes by exp(−i p² dt/(2mħ)).
    pub fn apply_kinetic(&mut self, psi: &mut WaveFunction, dt: f64, mass: f64) {
        let hbar = self.hbar;
        self.plans.forward(&mut psi.amps);
        for (a, p) in psi.amps.iter_mut().zip(&self.p) {
            *a *= (-I * (p * p * dt / (2.0 * mass * hbar))).exp();
        }
        self.plans.inverse(&mut psi.amps);
    }

    /// Multiplies by exp(−i(V(q,t) + extra_q2·q²)dt/ħ).
    pub fn apply_potential(
        &self,
        psi: &mut WaveFunction,
        dt: f64,
        t: f64,
        potential: &PotentialSpec,
        extra_q2: f64,
        mass: f64,
    ) {
        let hbar = self.hbar;
        for (a, q) in psi.amps.iter_mut().zip(&self.q) {
            let v = potential.eval(*q, t, mass) + extra_q2 * q * q;
            *a *= (-I * (v * dt / hbar)).exp();
        }
    }
}

/// Observables of `psi`; see [`PhaseSpace::observables`].
pub fn observables(psi: &WaveFunction, hbar: f64) -> Observables {
    PhaseSpace::new(psi.grid, hbar).observables(psi)
}

/// Kinetic factor exp(−i p² dt/(2mħ)) in momentum space. Callers pass dt/2
/// for the half-steps of a Strang splitting.
pub fn apply_kinetic_half(psi: &WaveFunction, dt: f64, params: &PhysicalParams) -> WaveFunction {
    let mut out = psi.clone();
    PhaseSpace::new(psi.grid, params.hbar).apply_kinetic(&mut out, dt, params.mass);
    out
}

pub fn apply_potential(
    psi: &WaveFunction,
    dt: f64,
    t: f64,
    potential: &PotentialSpec,
    extra_q2_coeff: f64,
    params: &PhysicalParams,
) -> WaveFunction {
    let mut out = psi.clone();
    PhaseSpace::new(psi.grid, params.hbar).apply_potential(
        &mut out,
        dt,
        t,
        potential,
        extra_q2_coeff,
        params.mass,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(hbar: f64) -> PhysicalParams {
        PhysicalParams::duffing_bath(hbar)
    }

    #[test]
    fn coherent_state_moments() {
        let p = params(0.01);
        let grid = GridSpec::new(-2.5, 2.5, 4096).unwrap();
        let psi = make_coherent_state(0.1, 0.1, &p, None, &grid).unwrap();
        let o = observables(&psi, p.hbar);
        assert_relative_eq!(o.mean_q, 0.1, epsilon = 1e-10);
        assert_relative_eq!(o.mean_p, 0.1, epsilon = 1e-10);
        assert_relative_eq!(o.norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coherent_state_offcentre_quadrature() {
        let p = PhysicalParams {
            hbar: 0.05,
            ..params(0.05)
        };
        let grid = GridSpec::new(-4.0, 4.0, 1024).unwrap();
        let psi = make_coherent_state(0.5, -0.3, &p, None, &grid).unwrap();
        // direct quadrature, independent of PhaseSpace: ⟨p⟩ = ħ Im∫ψ*ψ' by a
        // five-point stencil
        let dq = grid.dq();
        let a = &psi.amps;
        let mut mq = 0.0;
        let mut mp = 0.0;
        for i in 2..grid.n - 2 {
            let d = (a[i - 2] - a[i - 1] * 8.0 + a[i + 1] * 8.0 - a[i + 2]) / (12.0 * dq);
            mq += grid.q(i) * psi.amps[i].norm_sqr() * dq;
            mp += p.hbar * (psi.amps[i].conj() * d).im * dq;
        }
        assert!((mq - 0.5).abs() < 1e-8);
        assert!((mp + 0.3).abs() < 1e-6, "stencil error is O(dq⁴): {mp}");
        let o = observables(&psi, p.hbar);
        assert!((o.mean_q - 0.5).abs() < 1e-8);
        assert!((o.mean_p + 0.3).abs() < 1e-8);
    }

    #[test]
    fn minimum_uncertainty_at_origin() {
        for hbar in [0.01, 0.05, 0.1] {
            let p = params(hbar);
            let grid = GridSpec::new(-3.0, 3.0, 1024).unwrap();
            let psi = make_coherent_state(0.0, 0.0, &p, None, &grid).unwrap();
            let o = observables(&psi, hbar);
            assert_relative_eq!(o.dq() * o.dp(), hbar / 2.0, max_relative = 1e-9);
            assert_relative_eq!(o.dq(), default_sigma_q(&p), max_relative = 1e-9);
            assert_relative_eq!(o.mean_qp.im, hbar / 2.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn even_real_state_has_zero_means() {
        let grid = GridSpec::new(-5.0, 5.0, 512).unwrap();
        // symmetric about q = 0 on the periodic grid means pairing i with n − i
        let psi = WaveFunction::from_fn(grid, |q| Complex64::new((-q * q).exp() * (1.0 + q * q), 0.0));
        let o = observables(&psi, 0.1);
        assert!(o.mean_q.abs() < 1e-12);
        assert!(o.mean_p.abs() < 1e-12);
    }

    #[test]
    fn cat_state_position_variance() {
        let p = params(0.05);
        let grid = GridSpec::new(-4.0, 4.0, 1024).unwrap();
        let a = make_coherent_state(-1.0, 0.0, &p, None, &grid).unwrap();
        let b = make_coherent_state(1.0, 0.0, &p, None, &grid).unwrap();
        let cat = superpose(&[(1.0.into(), &a), (1.0.into(), &b)]).unwrap();
        let o = observables(&cat, p.hbar);
        let s2 = default_sigma_q(&p).powi(2);
        // ⟨a|b⟩ = e^{-1/(2σ²)}, ⟨a|q²|b⟩ = ⟨a|b⟩·σ², ⟨a|q²|a⟩ = 1 + σ²
        let overlap = (-1.0 / (2.0 * s2)).exp();
        let q2 = (1.0 + s2 + overlap * s2) / (1.0 + overlap);
        assert!((o.var_q - q2).abs() / q2 < 1e-6);
        assert!((o.var_q - (1.0 + s2)).abs() / (1.0 + s2) < 0.01);
    }

    #[test]
    fn grid_overflow_detected() {
        let p = params(0.1);
        let grid = GridSpec::new(-1.0, 1.0, 256).unwrap();
        assert!(matches!(
            make_coherent_state(0.9, 0.0, &p, None, &grid),
            Err(QbmError::GridOverflow(_))
        ));
        let coarse = GridSpec::new(-3.0, 3.0, 16).unwrap();
        assert!(matches!(
            make_coherent_state(0.0, 0.5, &p, None, &coarse),
            Err(QbmError::GridOverflow(_))
        ));
        assert!(make_coherent_state(0.0, 0.0, &p, Some(-1.0), &grid).is_err());
    }

    #[test]
    fn grid_must_be_power_of_two() {
        assert!(GridSpec::new(-1.0, 1.0, 100).is_err());
        assert!(GridSpec::new(1.0, -1.0, 128).is_err());
        let g = GridSpec::new(-1.0, 1.0, 128).unwrap();
        assert_relative_eq!(g.p_max(1.0), PI / g.dq());
        let p = g.momenta(1.0);
        assert_eq!(p[0], 0.0);
        assert_relative_eq!(p[64], -PI / g.dq(), max_relative = 1e-14);
    }

    #[test]
    fn kinetic_inverse_is_identity() {
        let p = params(0.01);
        let grid = GridSpec::new(-2.5, 2.5, 2048).unwrap();
        let psi = make_coherent_state(0.3, -0.4, &p, None, &grid).unwrap();
        let fwd = apply_kinetic_half(&psi, 0.01, &p);
        let back = apply_kinetic_half(&fwd, -0.01, &p);
        let err = psi
            .amps
            .iter()
            .zip(&back.amps)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12 * psi.max_abs());
        assert!((fwd.norm_sq() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn potential_step_is_unitary() {
        let p = params(0.01);
        let grid = GridSpec::new(-2.5, 2.5, 1024).unwrap();
        let psi = make_coherent_state(0.3, 0.0, &p, None, &grid).unwrap();
        let out = apply_potential(&psi, 0.02, 1.3, &PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 }, 0.7, &p);
        assert!((out.norm_sq() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn potentials_evaluate() {
        let d = PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 };
        assert_relative_eq!(d.eval(1.0, 0.0, 1.0), 0.25 - 0.5 + 0.3);
        let h = PotentialSpec::Harmonic { omega: 2.0 };
        assert_relative_eq!(h.eval(0.5, 0.0, 3.0), 0.5 * 3.0 * 4.0 * 0.25);
        for (q, t) in [(0.3, 0.0), (-1.2, 2.5)] {
            let c = d.polynomial_coeffs(t, 1.0);
            let poly = PotentialSpec::Polynomial { coeffs: c };
            assert_relative_eq!(poly.eval(q, 0.0, 1.0), d.eval(q, t, 1.0), epsilon = 1e-14);
        }
        assert!(h.is_even());
        assert!(!d.is_even());
    }

    #[test]
    fn regime_warnings() {
        assert!(params(0.01).regime_warnings(1.0).is_empty());
        assert_eq!(params(0.1).regime_warnings(1.0).len(), 1);
    }
}
