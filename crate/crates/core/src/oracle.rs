//! Reference dynamics for the ensemble mean.
//!
//! Two master equations are integrated directly on density matrices in a
//! truncated oscillator number basis:
//!
//! * the Markovian high-temperature QBM equation
//!   ħρ̇ = −i[H,ρ] − i(γ/2)[q,{p,ρ}] − (mγkT/ħ)[q,[q,ρ]];
//! * its memory-corrected form with the time-dependent coefficients g0(t), g1(t),
//!   ħρ̇ = −i[H,ρ] − i(½mγΛ + Im g0)[q²,ρ] + i Im g1 [q,{p,ρ}] − Re g0 [q,[q,ρ]].
//!
//! For harmonic H both close on first and second moments, giving small ODE
//! systems that are integrated separately.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QbmError, Result};
use crate::model::{PhysicalParams, PotentialSpec};
use crate::noise::MemoryCoefficients;

type CMatrix = DMatrix<Complex64>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Which master equation to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// constant coefficients, valid after the memory time
    Qbm,
    /// g0(t), g1(t) from the bath kernel
    TimeDependent,
}

/// Coefficients of the generic quadratic bath generator
/// ħρ̇ = −i[H + ½c q², ρ] + i·d·[q,{p,ρ}] − a·[q,[q,ρ]].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathCoefficients {
    /// extra q² stiffness c (the Hamiltonian gains ½c q²)
    pub stiffness: f64,
    /// d (friction, −γ/2 in the Markov limit)
    pub friction: f64,
    /// a (localisation rate, mγkT/ħ in the Markov limit)
    pub diffusion: f64,
}

impl BathCoefficients {
    pub fn at(generator: Generator, params: &PhysicalParams, t: f64) -> Self {
        match generator {
            Generator::Qbm => Self {
                stiffness: 0.0,
                friction: -0.5 * params.gamma,
                diffusion: params.mass * params.gamma * params.kt / params.hbar,
            },
            Generator::TimeDependent => {
                let c = MemoryCoefficients::new(params);
                let g0 = c.g0(t);
                Self {
                    stiffness: 2.0 * c.q2_coefficient(t),
                    friction: c.g1(t).im,
                    diffusion: g0.re,
                }
            }
        }
    }
}

/// First and second moments; `s` is ⟨(qp+pq)/2⟩.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub q: f64,
    pub p: f64,
    pub q2: f64,
    pub p2: f64,
    pub s: f64,
}

impl Moments {
    /// Gaussian pure state with position width σ_q at (q0, p0).
    pub fn gaussian(q0: f64, p0: f64, sigma_q: f64, hbar: f64) -> Self {
        let sigma_p = hbar / (2.0 * sigma_q);
        Self {
            q: q0,
            p: p0,
            q2: q0 * q0 + sigma_q * sigma_q,
            p2: p0 * p0 + sigma_p * sigma_p,
            s: q0 * p0,
        }
    }

    pub fn var_q(&self) -> f64 {
        self.q2 - self.q * self.q
    }

    pub fn var_p(&self) -> f64 {
        self.p2 - self.p * self.p
    }

    /// det of the covariance matrix; ≥ ħ²/4 for every physical state.
    pub fn covariance_det(&self) -> f64 {
        let c = self.s - self.q * self.p;
        self.var_q() * self.var_p() - c * c
    }

    fn as_array(&self) -> [f64; 5] {
        [self.q, self.p, self.q2, self.p2, self.s]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            q: a[0],
            p: a[1],
            q2: a[2],
            p2: a[3],
            s: a[4],
        }
    }
}

fn moment_rhs(m: &[f64; 5], kappa: f64, d: f64, a_hbar: f64, mass: f64) -> [f64; 5] {
    let [q, p, q2, p2, s] = *m;
    [
        p / mass,
        -kappa * q + 2.0 * d * p,
        2.0 * s / mass,
        -2.0 * kappa * s + 4.0 * d * p2 + 2.0 * a_hbar,
        p2 / mass - kappa * q2 + 2.0 * d * s,
    ]
}

/// RK4 solution of the closed moment system for V = ½mω²q², from `t0`
/// to `t0 + horizon`, one entry per step (including both ends).
pub fn moment_ode(
    params: &PhysicalParams,
    omega: f64,
    generator: Generator,
    initial: Moments,
    t0: f64,
    horizon: f64,
    dt: f64,
) -> Result<Vec<(f64, Moments)>> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(invalid("dt", "dt must be > 0 and horizon ≥ 0"));
    }
    let n = (horizon / dt).round() as usize;
    let m = params.mass;
    let hbar = params.hbar;
    let rhs = |t: f64, y: &[f64; 5]| {
        let c = BathCoefficients::at(generator, params, t);
        let kappa = m * omega * omega + c.stiffness;
        moment_rhs(y, kappa, c.friction, c.diffusion * hbar, m)
    };
    let axpy = |y: &[f64; 5], k: &[f64; 5], h: f64| {
        let mut out = *y;
        for i in 0..5 {
            out[i] += h * k[i];
        }
        out
    };
    let mut y = initial.as_array();
    let mut out = Vec::with_capacity(n + 1);
    out.push((t0, initial));
    for step in 0..n {
        let t = t0 + step as f64 * dt;
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * dt, &axpy(&y, &k1, 0.5 * dt));
        let k3 = rhs(t + 0.5 * dt, &axpy(&y, &k2, 0.5 * dt));
        let k4 = rhs(t + dt, &axpy(&y, &k3, dt));
        for i in 0..5 {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push((t0 + (step + 1) as f64 * dt, Moments::from_array(y)));
    }
    Ok(out)
}

/// Markovian moment system from t = 0.
pub fn moment_ode_harmonic(
    params: &PhysicalParams,
    omega: f64,
    initial: Moments,
    horizon: f64,
    dt: f64,
) -> Result<Vec<(f64, Moments)>> {
    moment_ode(params, omega, Generator::Qbm, initial, 0.0, horizon, dt)
}

/// Linear interpolation of a moment series at `t`.
pub fn interpolate(series: &[(f64, Moments)], t: f64) -> Option<Moments> {
    let k = series.partition_point(|(s, _)| *s < t);
    if k == 0 {
        return series.first().filter(|(s, _)| (s - t).abs() < 1e-12).map(|(_, m)| *m);
    }
    let (t1, b) = series.get(k)?;
    let (t0, a) = series[k - 1];
    let w = (t - t0) / (t1 - t0);
    let (x, y) = (a.as_array(), b.as_array());
    let mut r = [0.0; 5];
    for i in 0..5 {
        r[i] = x[i] + w * (y[i] - x[i]);
    }
    Some(Moments::from_array(r))
}

/// Truncated oscillator eigenbasis of frequency ω_b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub dim: usize,
    pub omega: f64,
    pub hbar: f64,
    pub mass: f64,
}

impl Basis {
    pub fn new(dim: usize, omega: f64, params: &PhysicalParams) -> Result<Self> {
        if dim < 4 {
            return Err(invalid("basis.dim", "must be ≥ 4"));
        }
        if !(omega > 0.0) {
            return Err(invalid("basis.omega", "must be > 0"));
        }
        Ok(Self {
            dim,
            omega,
            hbar: params.hbar,
            mass: params.mass,
        })
    }

    /// Annihilation operator.
    pub fn lowering(&self) -> CMatrix {
        let n = self.dim;
        CMatrix::from_fn(n, n, |i, j| {
            if j == i + 1 {
                Complex64::new((j as f64).sqrt(), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    /// √(ħ/2mω), the position scale of the ground state.
    pub fn length(&self) -> f64 {
        (self.hbar / (2.0 * self.mass * self.omega)).sqrt()
    }

    pub fn position(&self) -> CMatrix {
        let a = self.lowering();
        (&a + a.adjoint()) * Complex64::new(self.length(), 0.0)
    }

    pub fn momentum(&self) -> CMatrix {
        let a = self.lowering();
        let scale = (self.hbar * self.mass * self.omega / 2.0).sqrt();
        (a.adjoint() - &a) * (I * scale)
    }

    /// Hermite functions φ_n(x), n < dim, at the points `xs`; row n.
    pub fn eigenfunctions(&self, xs: &[f64]) -> Vec<Vec<f64>> {
        let k = self.mass * self.omega / self.hbar;
        let norm0 = (k / std::f64::consts::PI).powf(0.25);
        let mut out = vec![vec![0.0; xs.len()]; self.dim];
        for (c, &x) in xs.iter().enumerate() {
            let xi = x * k.sqrt();
            let mut prev = 0.0;
            let mut cur = norm0 * (-0.5 * xi * xi).exp();
            out[0][c] = cur;
            for n in 0..self.dim - 1 {
                let next = (2.0 / (n + 1) as f64).sqrt() * xi * cur - (n as f64 / (n + 1) as f64).sqrt() * prev;
                prev = cur;
                cur = next;
                out[n + 1][c] = cur;
            }
        }
        out
    }
}

/// Number-basis amplitudes of a normalised Gaussian packet at (q0, p0).
pub fn gaussian_amplitudes(basis: Basis, q0: f64, p0: f64, sigma_q: f64) -> Result<nalgebra::DVector<Complex64>> {
    if !(sigma_q > 0.0) {
        return Err(invalid("sigma_q", "must be > 0"));
    }
    let hbar = basis.hbar;
    let reach = (2.0 * basis.dim as f64 + 1.0).sqrt() * basis.length() * 2.0 + 12.0 * sigma_q;
    let lo = (q0 - 12.0 * sigma_q).min(-reach);
    let hi = (q0 + 12.0 * sigma_q).max(reach);
    let h_scale = sigma_q.min(basis.length() / (basis.dim as f64).sqrt());
    let n_pts = ((hi - lo) / (0.05 * h_scale)).ceil() as usize + 1;
    let dx = (hi - lo) / (n_pts - 1) as f64;
    let xs: Vec<f64> = (0..n_pts).map(|i| lo + i as f64 * dx).collect();
    let norm = (2.0 * std::f64::consts::PI * sigma_q * sigma_q).powf(-0.25);
    let psi: Vec<Complex64> = xs
        .iter()
        .map(|x| {
            let d = x - q0;
            Complex64::new(-d * d / (4.0 * sigma_q * sigma_q), p0 * x / hbar).exp() * norm
        })
        .collect();
    let phi = basis.eigenfunctions(&xs);
    let coeffs: Vec<Complex64> = phi
        .iter()
        .map(|row| row.iter().zip(&psi).map(|(f, a)| a * *f).sum::<Complex64>() * dx)
        .collect();
    let captured: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
    if (1.0 - captured).abs() > 1e-8 {
        return Err(invalid(
            "oracle.basis_dim",
            format!("basis captures only {captured:.10} of the initial state"),
        ));
    }
    Ok(nalgebra::DVector::from_vec(coeffs))
}

/// Density operator in a truncated number basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub basis: Basis,
    pub rho: CMatrix,
}

impl DensityMatrix {
    /// |ψ⟩⟨ψ| for ψ(x) ∝ exp(−(x−q0)²/(4σ²) + ip0x/ħ), projected onto the basis
    /// by quadrature and renormalised. Fails if more than 1e-8 of the norm
    /// lies outside the truncated basis.
    pub fn gaussian(basis: Basis, q0: f64, p0: f64, sigma_q: f64) -> Result<Self> {
        Ok(Self::pure(basis, gaussian_amplitudes(basis, q0, p0, sigma_q)?))
    }

    /// |v⟩⟨v| / ⟨v|v⟩.
    pub fn pure(basis: Basis, v: nalgebra::DVector<Complex64>) -> Self {
        let v = &v / Complex64::new(v.norm(), 0.0);
        Self {
            basis,
            rho: &v * v.adjoint(),
        }
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        (&self.rho * op).trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.rho - self.rho.adjoint()).camax()
    }

    pub fn hermitize(&mut self) {
        self.rho = (&self.rho + self.rho.adjoint()) * Complex64::new(0.5, 0.0);
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.rho.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Population in the top 10% of basis states.
    pub fn top_population(&self) -> f64 {
        let n = self.basis.dim;
        let start = n - (n / 10).max(1);
        (start..n).map(|k| self.rho[(k, k)].re).sum()
    }

    pub fn truncation_ok(&self) -> bool {
        self.top_population() < 1e-6
    }
}

/// Operators of one basis, reused across generator evaluations.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub basis: Basis,
    pub params: PhysicalParams,
    pub potential: PotentialSpec,
    pub generator: Generator,
    pub q: CMatrix,
    pub p: CMatrix,
    pub q2: CMatrix,
    kinetic: CMatrix,
    q_powers: Vec<CMatrix>,
    static_h: Option<CMatrix>,
}

impl Oracle {
    pub fn new(basis: Basis, params: &PhysicalParams, potential: &PotentialSpec, generator: Generator) -> Result<Self> {
        params.validate()?;
        let q = basis.position();
        let p = basis.momentum();
        let q2 = &q * &q;
        let kinetic = (&p * &p) * Complex64::new(0.5 / params.mass, 0.0);
        let degree = potential.polynomial_coeffs(0.0, params.mass).len();
        let mut q_powers = vec![CMatrix::identity(basis.dim, basis.dim)];
        for k in 1..degree {
            let next = &q_powers[k - 1] * &q;
            q_powers.push(next);
        }
        let mut oracle = Self {
            basis,
            params: params.clone(),
            potential: potential.clone(),
            generator,
            q,
            p,
            q2,
            kinetic,
            q_powers,
            static_h: None,
        };
        if !potential.is_time_dependent() {
            oracle.static_h = Some(oracle.build_hamiltonian(0.0));
        }
        Ok(oracle)
    }

    fn build_hamiltonian(&self, t: f64) -> CMatrix {
        let mut h = self.kinetic.clone();
        for (c, qk) in self.potential.polynomial_coeffs(t, self.params.mass).iter().zip(&self.q_powers) {
            if *c != 0.0 {
                h += qk * Complex64::new(*c, 0.0);
            }
        }
        h
    }

    pub fn hamiltonian(&self, t: f64) -> CMatrix {
        match &self.static_h {
            Some(h) => h.clone(),
            None => self.build_hamiltonian(t),
        }
    }

    /// dρ/dt for the selected generator.
    pub fn derivative(&self, rho: &CMatrix, t: f64) -> CMatrix {
        let c = BathCoefficients::at(self.generator, &self.params, t);
        let hbar = self.params.hbar;
        let mut h = self.hamiltonian(t);
        if c.stiffness != 0.0 {
            h += &self.q2 * Complex64::new(0.5 * c.stiffness, 0.0);
        }
        let comm = |a: &CMatrix, b: &CMatrix| a * b - b * a;
        let hr = comm(&h, rho);
        let anti = &self.p * rho + rho * &self.p;
        let fr = comm(&self.q, &anti);
        let qr = comm(&self.q, rho);
        let dr = comm(&self.q, &qr);
        (hr * (-I) + fr * (I * c.friction) - dr * Complex64::new(c.diffusion, 0.0)) / Complex64::new(hbar, 0.0)
    }

    pub fn moments(&self, rho: &DensityMatrix) -> Moments {
        let pq = &self.p * &self.q;
        let qp = &self.q * &self.p;
        Moments {
            q: rho.expectation(&self.q).re,
            p: rho.expectation(&self.p).re,
            q2: rho.expectation(&self.q2).re,
            p2: rho.expectation(&(&self.p * &self.p)).re,
            s: 0.5 * rho.expectation(&(qp + pq)).re,
        }
    }

    fn rk4(&self, rho: &CMatrix, t: f64, dt: f64) -> CMatrix {
        let h = Complex64::new(dt, 0.0);
        let half = Complex64::new(0.5 * dt, 0.0);
        let k1 = self.derivative(rho, t);
        let k2 = self.derivative(&(rho + &k1 * half), t + 0.5 * dt);
        let k3 = self.derivative(&(rho + &k2 * half), t + 0.5 * dt);
        let k4 = self.derivative(&(rho + &k3 * h), t + dt);
        rho + (k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4) * (h / 6.0)
    }
}

/// Trace drift per step that triggers a step halving.
pub const TRACE_DRIFT_LIMIT: f64 = 1e-6;
const MAX_HALVINGS: usize = 3;

/// One recorded point of an oracle evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub t: f64,
    pub moments: Moments,
    pub min_eigenvalue: f64,
    pub trace: f64,
    pub top_population: f64,
    pub rho: Option<DensityMatrix>,
}

/// RK4 integration from `t0` over `horizon`, recording every `every` steps.
/// Each step is re-symmetrised; a step whose trace moves by more than 1e-6
/// is retried with halved substeps, at most three times.
pub fn evolve_density(
    oracle: &Oracle,
    rho0: &DensityMatrix,
    t0: f64,
    horizon: f64,
    dt: f64,
    every: usize,
    keep_states: bool,
) -> Result<Vec<OracleSample>> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(invalid("dt", "dt must be > 0 and horizon ≥ 0"));
    }
    let n = (horizon / dt).round() as usize;
    let every = every.max(1);
    let mut rho = rho0.clone();
    let mut out = Vec::new();
    let mut warned = false;
    let record = |t: f64, rho: &DensityMatrix, warned: &mut bool| {
        let top = rho.top_population();
        if top >= 1e-6 && !*warned {
            log::warn!("oracle basis truncation: top-level population {top:.2e} at t = {t}");
            *warned = true;
        }
        OracleSample {
            t,
            moments: oracle.moments(rho),
            min_eigenvalue: rho.min_eigenvalue(),
            trace: rho.trace().re,
            top_population: top,
            rho: keep_states.then(|| rho.clone()),
        }
    };
    out.push(record(t0, &rho, &mut warned));
    for step in 0..n {
        let t = t0 + step as f64 * dt;
        let tr0 = rho.trace().re;
        let mut halvings = 0;
        loop {
            let sub = 1usize << halvings;
            let h = dt / sub as f64;
            let mut trial = rho.rho.clone();
            for k in 0..sub {
                trial = oracle.rk4(&trial, t + k as f64 * h, h);
                trial = (&trial + trial.adjoint()) * Complex64::new(0.5, 0.0);
            }
            let drift = (trial.trace().re - tr0).abs();
            if drift <= TRACE_DRIFT_LIMIT && trial.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                rho.rho = trial;
                break;
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(QbmError::TraceDrift {
                    drift,
                    halvings: MAX_HALVINGS,
                    t,
                });
            }
        }
        if (step + 1) % every == 0 || step + 1 == n {
            out.push(record(t0 + (step + 1) as f64 * dt, &rho, &mut warned));
        }
    }
    Ok(out)
}

/// Fixed point of the Markovian generator (harmonic or any time-independent
/// potential): solves L ρ = 0 with Tr ρ = 1 as a dense linear system.
pub fn stationary_state(oracle: &Oracle) -> Result<DensityMatrix> {
    if oracle.potential.is_time_dependent() {
        return Err(invalid("potential", "stationary state needs a time-independent potential"));
    }
    let d = oracle.basis.dim;
    let n = d * d;
    let mut lmat = CMatrix::zeros(n, n);
    for col in 0..n {
        let mut e = CMatrix::zeros(d, d);
        e[(col % d, col / d)] = Complex64::new(1.0, 0.0);
        let out = oracle.derivative(&e, 0.0);
        for (row, v) in out.iter().enumerate() {
            lmat[(row, col)] = *v;
        }
    }
    // replace the first equation by the trace condition
    let mut rhs = nalgebra::DVector::<Complex64>::zeros(n);
    for col in 0..n {
        lmat[(0, col)] = Complex64::new(0.0, 0.0);
    }
    for k in 0..d {
        lmat[(0, k * d + k)] = Complex64::new(1.0, 0.0);
    }
    rhs[0] = Complex64::new(1.0, 0.0);
    let sol = lmat
        .lu()
        .solve(&rhs)
        .ok_or_else(|| invalid("oracle", "stationary system is singular"))?;
    let rho = CMatrix::from_column_slice(d, d, sol.as_slice());
    let mut out = DensityMatrix {
        basis: oracle.basis,
        rho,
    };
    out.hermitize();
    Ok(out)
}

/// Result of the squeezing scan for short-time positivity loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityScan {
    /// squeeze factor f: position width √(ħ/2m)/f
    pub factor: f64,
    pub min_eigenvalue_markov: f64,
    pub t_at_min_markov: f64,
    pub min_eigenvalue_memory: f64,
}

/// Evolves a position-squeezed Gaussian at the origin under both generators
/// up to `t_max` and records the most negative eigenvalue of each. The basis
/// frequency is f²ω so the initial state is the basis ground state; the
/// generator's spectrum grows with it, so the step is `dt / f²`.
pub fn positivity_scan(
    params: &PhysicalParams,
    omega: f64,
    factors: &[f64],
    dim: usize,
    t_max: f64,
    dt: f64,
) -> Result<Vec<PositivityScan>> {
    let potential = PotentialSpec::Harmonic { omega };
    let mut out = Vec::new();
    for &f in factors {
        let basis = Basis::new(dim, omega * f * f, params)?;
        let sigma = (params.hbar / (2.0 * params.mass * omega)).sqrt() / f;
        let rho0 = DensityMatrix::gaussian(basis, 0.0, 0.0, sigma)?;
        let mut mins = [(f64::INFINITY, 0.0); 2];
        for (slot, generator) in [Generator::Qbm, Generator::TimeDependent].into_iter().enumerate() {
            let oracle = Oracle::new(basis, params, &potential, generator)?;
            let h = t_max / (t_max * f * f / dt).ceil();
            for s in evolve_density(&oracle, &rho0, 0.0, t_max, h, 1, false)? {
                if s.min_eigenvalue < mins[slot].0 {
                    mins[slot] = (s.min_eigenvalue, s.t);
                }
            }
        }
        out.push(PositivityScan {
            factor: f,
            min_eigenvalue_markov: mins[0].0,
            t_at_min_markov: mins[0].1,
            min_eigenvalue_memory: mins[1].0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(hbar: f64) -> PhysicalParams {
        PhysicalParams::duffing_bath(hbar)
    }

    fn harmonic() -> PotentialSpec {
        PotentialSpec::Harmonic { omega: 1.0 }
    }

    fn random_hermitian(d: usize, seed: u64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(d, d, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
    }

    #[test]
    fn markov_moments_relax_to_equipartition() {
        let p = params(0.1);
        let m0 = Moments::gaussian(1.0, 0.0, (0.05f64).sqrt(), 0.1);
        let series = moment_ode_harmonic(&p, 1.0, m0, 80.0, 0.01).unwrap();
        let last = series.last().unwrap().1;
        assert!((last.q2 - 0.3).abs() < 1e-6);
        assert!((last.p2 - 0.3).abs() < 1e-6);
    }

    #[test]
    fn closed_moments_conserve_energy() {
        let mut p = params(0.1);
        p.gamma = 0.0;
        let m0 = Moments::gaussian(0.7, -0.2, 0.2, 0.1);
        let series = moment_ode_harmonic(&p, 1.3, m0, 10.0, 0.005).unwrap();
        let e = |m: &Moments| 0.5 * 1.3 * 1.3 * m.q2 + 0.5 * m.p2;
        for (_, m) in &series {
            assert!((e(m) - e(&m0)).abs() < 1e-8);
        }
    }

    #[test]
    fn first_moment_is_damped_oscillator() {
        let p = params(0.1);
        let m0 = Moments::gaussian(1.0, 0.0, 0.2, 0.1);
        let series = moment_ode_harmonic(&p, 1.0, m0, 5.0, 0.001).unwrap();
        // q̈ = −q − γq̇, q(0) = 1, q̇(0) = 0
        let g = p.gamma;
        let w = (1.0 - 0.25 * g * g).sqrt();
        for (t, m) in series.iter().step_by(500) {
            let want = (-0.5 * g * t).exp() * ((w * t).cos() + 0.5 * g / w * (w * t).sin());
            assert!((m.q - want).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn generators_are_trace_preserving() {
        let p = params(0.1);
        let basis = Basis::new(20, 1.0, &p).unwrap();
        let rho = random_hermitian(20, 3);
        for generator in [Generator::Qbm, Generator::TimeDependent] {
            let o = Oracle::new(basis, &p, &PotentialSpec::Duffing { g: 0.3, drive_freq: 1.0 }, generator).unwrap();
            for t in [0.0, 0.1, 1.0] {
                let d = o.derivative(&rho, t);
                assert!(d.trace().norm() < 1e-12);
                assert!((&d - d.adjoint()).camax() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_generator_reduces_to_markov_late() {
        let p = params(0.1);
        let basis = Basis::new(20, 1.0, &p).unwrap();
        let rho = random_hermitian(20, 5);
        let a = Oracle::new(basis, &p, &harmonic(), Generator::Qbm).unwrap().derivative(&rho, 0.0);
        let o = Oracle::new(basis, &p, &harmonic(), Generator::TimeDependent).unwrap();
        let b = o.derivative(&rho, 20.0 / p.lambda);
        assert!((&a - &b).camax() / a.camax() < 1e-6);
        // the gap closes like e^{−Λt}
        let gap = |t: f64| (&a - o.derivative(&rho, t)).camax();
        let ratio = gap(2.0 / p.lambda) / gap(1.0 / p.lambda);
        assert!(ratio < 1.1 * (-1.0f64).exp() * 2.0, "ratio {ratio}");
    }

    #[test]
    fn memory_generator_at_zero_is_hamiltonian() {
        let p = params(0.1);
        let basis = Basis::new(24, 1.0, &p).unwrap();
        let o = Oracle::new(basis, &p, &harmonic(), Generator::TimeDependent).unwrap();
        let rho0 = DensityMatrix::gaussian(basis, 0.3, 0.1, 0.2).unwrap();
        let d = o.derivative(&rho0.rho, 0.0);
        // d/dt Tr ρ² = 2 Tr(ρ ρ̇) vanishes for unitary flow
        assert!((&rho0.rho * &d).trace().re.abs() < 1e-12);
        let c = BathCoefficients::at(Generator::TimeDependent, &p, 0.0);
        assert_eq!(c.friction, 0.0);
        assert_eq!(c.diffusion, 0.0);
        assert!((c.stiffness - p.mass * p.gamma * p.lambda).abs() < 1e-15);
    }

    #[test]
    fn closed_evolution_conserves_trace_and_purity() {
        let mut p = params(0.1);
        p.gamma = 0.0;
        let basis = Basis::new(40, 1.0, &p).unwrap();
        let o = Oracle::new(basis, &p, &harmonic(), Generator::Qbm).unwrap();
        let rho0 = DensityMatrix::gaussian(basis, 0.5, 0.0, (0.05f64).sqrt()).unwrap();
        let out = evolve_density(&o, &rho0, 0.0, 2.0, 0.002, 100, true).unwrap();
        let last = out.last().unwrap().rho.as_ref().unwrap();
        assert!((last.trace().re - 1.0).abs() < 1e-10);
        assert!((last.purity() - 1.0).abs() < 1e-10);
        assert_eq!(evolve_density(&o, &rho0, 0.0, 0.0, 0.01, 1, true).unwrap()[0].rho.as_ref().unwrap(), &rho0);
    }

    #[test]
    fn density_moments_follow_moment_ode() {
        let p = params(0.1);
        let basis = Basis::new(60, 1.0, &p).unwrap();
        let sigma = (0.05f64).sqrt();
        let rho0 = DensityMatrix::gaussian(basis, 1.0, 0.0, sigma).unwrap();
        for generator in [Generator::Qbm, Generator::TimeDependent] {
            let o = Oracle::new(basis, &p, &harmonic(), generator).unwrap();
            let out = evolve_density(&o, &rho0, 0.0, 2.0, 0.002, 50, false).unwrap();
            let ode = moment_ode(&p, 1.0, generator, o.moments(&rho0), 0.0, 2.0, 0.002).unwrap();
            for s in &out {
                let m = interpolate(&ode, s.t).unwrap();
                for (a, b) in s.moments.as_array().iter().zip(m.as_array()) {
                    assert!((a - b).abs() < 1e-5, "{generator:?} t={} {a} vs {b}", s.t);
                }
                assert!(s.top_population < 1e-6);
            }
        }
    }

    #[test]
    fn stationary_state_is_a_fixed_point() {
        let p = params(0.1);
        let basis = Basis::new(30, 1.0, &p).unwrap();
        let o = Oracle::new(basis, &p, &harmonic(), Generator::Qbm).unwrap();
        let rho = stationary_state(&o).unwrap();
        assert!((rho.trace().re - 1.0).abs() < 1e-10);
        assert!(o.derivative(&rho.rho, 0.0).camax() < 1e-6);
        // equipartition up to truncation of the thermal tail
        assert!((o.moments(&rho).p2 - p.kt).abs() < 0.01);
    }

    #[test]
    fn gaussian_projection_matches_coherent_amplitudes() {
        let p = params(0.1);
        let basis = Basis::new(30, 1.0, &p).unwrap();
        let (q0, p0) = (0.4, -0.3);
        let rho = DensityMatrix::gaussian(basis, q0, p0, basis.length()).unwrap();
        // |⟨n|α⟩|² = e^{−|α|²}|α|^{2n}/n!, α = q0/(2ℓ) + i p0 ℓ/ħ
        let l = basis.length();
        let a2 = (q0 / (2.0 * l)).powi(2) + (p0 * l / p.hbar).powi(2);
        let mut fact = 1.0;
        for n in 0..10 {
            if n > 0 {
                fact *= n as f64;
            }
            let want = (-a2).exp() * a2.powi(n as i32) / fact;
            assert!((rho.rho[(n, n)].re - want).abs() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn truncation_flagged_for_small_basis() {
        let p = params(0.1);
        let basis = Basis::new(8, 1.0, &p).unwrap();
        assert!(DensityMatrix::gaussian(basis, 2.0, 0.0, basis.length()).is_err());
    }
}
