//! High-temperature bath kernel, memory coefficients and colored-noise paths.
//!
//! With Δ(t) = (Λ/2)e^{−Λ|t|} the bath correlation is
//! α(t,s) = 2mγkT·Δ(t−s) + iħmγ·Δ̇(t−s), with Δ̇(0) ≡ 0.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QbmError, Result};
use crate::model::PhysicalParams;

#[derive(Debug, Clone, PartialEq)]
pub struct BathKernel {
    pub params: PhysicalParams,
}

impl BathKernel {
    pub fn new(params: &PhysicalParams) -> Self {
        Self {
            params: params.clone(),
        }
    }

    pub fn delta(&self, t: f64) -> f64 {
        let l = self.params.lambda;
        0.5 * l * (-l * t.abs()).exp()
    }

    /// dΔ/dt, odd, with the value at t = 0 fixed to 0.
    pub fn delta_dot(&self, t: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        let l = self.params.lambda;
        -t.signum() * 0.5 * l * l * (-l * t.abs()).exp()
    }

    pub fn alpha(&self, t: f64, s: f64) -> Complex64 {
        let p = &self.params;
        let tau = t - s;
        Complex64::new(
            2.0 * p.mass * p.gamma * p.kt * self.delta(tau),
            p.hbar * p.mass * p.gamma * self.delta_dot(tau),
        )
    }
}

/// α(t, s) for the exponential high-temperature kernel.
pub fn alpha(t: f64, s: f64, params: &PhysicalParams) -> Complex64 {
    BathKernel::new(params).alpha(t, s)
}

/// Closed forms of g0(t) = (1/ħ)∫₀ᵗ α(t,s)ds and g1(t) = (1/mħ)∫₀ᵗ (t−s)α(t,s)ds.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCoefficients {
    mass: f64,
    gamma: f64,
    lambda: f64,
    hbar: f64,
    /// kT − iħΛ/2
    thermal: Complex64,
}

impl MemoryCoefficients {
    pub fn new(params: &PhysicalParams) -> Self {
        Self {
            mass: params.mass,
            gamma: params.gamma,
            lambda: params.lambda,
            hbar: params.hbar,
            thermal: Complex64::new(params.kt, -0.5 * params.hbar * params.lambda),
        }
    }

    pub fn g0(&self, t: f64) -> Complex64 {
        let rise = -(-self.lambda * t).exp_m1();
        self.g0_inf() * rise
    }

    pub fn g1(&self, t: f64) -> Complex64 {
        let lt = self.lambda * t;
        // 1 − (1+Λt)e^{−Λt}, written to avoid cancellation for small Λt
        let rise = -(-lt).exp_m1() - lt * (-lt).exp();
        self.g1_inf() * rise
    }

    /// mγkT/ħ − i mγΛ/2
    pub fn g0_inf(&self) -> Complex64 {
        self.thermal * (self.mass * self.gamma / self.hbar)
    }

    /// γkT/(ħΛ) − iγ/2
    pub fn g1_inf(&self) -> Complex64 {
        self.thermal * (self.gamma / (self.hbar * self.lambda))
    }

    /// ½mγΛ + Im g0(t), equal to ½mγΛ·e^{−Λt}.
    pub fn q2_coefficient(&self, t: f64) -> f64 {
        0.5 * self.mass * self.gamma * self.lambda + self.g0(t).im
    }
}

pub fn g0(t: f64, params: &PhysicalParams) -> Complex64 {
    MemoryCoefficients::new(params).g0(t)
}

pub fn g1(t: f64, params: &PhysicalParams) -> Complex64 {
    MemoryCoefficients::new(params).g1(t)
}

/// What to do with negative eigenvalues of the assembled covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsdRepair {
    /// Clamp eigenvalues above −1e-8·max diag; fail below.
    #[default]
    Strict,
    /// Always clamp, with a logged warning. Needed outside the high-temperature
    /// regime, where the sampled kernel has negative high-frequency spectrum.
    Clamp,
}

pub const PSD_TOLERANCE: f64 = 1e-8;

/// Identifies a reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub index: u64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, index: u64) -> Self {
        Self { master_seed, index }
    }

    /// Counter-based generator: one ChaCha stream per trajectory index.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.index);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub dt: f64,
    /// z at t_k = (k + ½)·dt, one value per time step.
    pub z: Vec<Complex64>,
    pub stream: NoiseStream,
}

impl NoisePath {
    /// All-zero path, for deterministic runs.
    pub fn zeros(n_steps: usize, dt: f64) -> Self {
        Self {
            dt,
            z: vec![Complex64::new(0.0, 0.0); n_steps],
            stream: NoiseStream::new(0, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dt
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,re_z,im_z")?;
        for (k, z) in self.z.iter().enumerate() {
            writeln!(f, "{:.17e},{:.17e},{:.17e}", self.time(k), z.re, z.im)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMethod {
    Cholesky,
    Eigen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub method: FactorMethod,
    /// Most negative eigenvalue, when the eigen route was taken.
    pub min_eigenvalue: Option<f64>,
    /// Number of eigenvalues set to zero.
    pub clamped: usize,
    pub max_diagonal: f64,
}

/// Dense sampler z = L·ξ with L·L† = C, C_jk = α(t_j, t_k).
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    dt: f64,
    n_steps: usize,
    /// Row-major n×n factor.
    factor: Vec<Complex64>,
    lower_triangular: bool,
    pub report: FactorReport,
}

impl NoiseSampler {
    pub fn new(
        n_steps: usize,
        dt: f64,
        params: &PhysicalParams,
        repair: PsdRepair,
    ) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", "must be > 0"));
        }
        let cov = covariance_matrix(n_steps, dt, params);
        Self::from_covariance(cov, dt, repair)
    }

    pub fn from_covariance(
        cov: DMatrix<Complex64>,
        dt: f64,
        repair: PsdRepair,
    ) -> Result<Self> {
        let n = cov.nrows();
        let max_diag = (0..n).map(|k| cov[(k, k)].re).fold(0.0, f64::max);
        if n == 0 {
            return Ok(Self {
                dt,
                n_steps: 0,
                factor: Vec::new(),
                lower_triangular: true,
                report: FactorReport {
                    method: FactorMethod::Cholesky,
                    min_eigenvalue: None,
                    clamped: 0,
                    max_diagonal: 0.0,
                },
            });
        }
        // complex Cholesky takes square roots of complex pivots and "succeeds" on
        // indefinite Hermitian input; accept it only when every pivot was real
        // and positive
        let chol = nalgebra::Cholesky::new(cov.clone())
            .map(|c| c.l())
            .filter(|l| (0..n).all(|k| l[(k, k)].re > 0.0 && l[(k, k)].im.abs() <= 1e-12 * l[(k, k)].re));
        if let Some(l) = chol {
            return Ok(Self {
                dt,
                n_steps: n,
                factor: row_major(&l),
                lower_triangular: true,
                report: FactorReport {
                    method: FactorMethod::Cholesky,
                    min_eigenvalue: None,
                    clamped: 0,
                    max_diagonal: max_diag,
                },
            });
        }
        let eig = cov.symmetric_eigen();
        let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let tolerance = -PSD_TOLERANCE * max_diag;
        if repair == PsdRepair::Strict && min_ev < tolerance {
            return Err(QbmError::Factorization {
                min_eigenvalue: min_ev,
                tolerance,
            });
        }
        let mut clamped = 0;
        let mut l = eig.eigenvectors.clone();
        for (j, ev) in eig.eigenvalues.iter().enumerate() {
            let s = if *ev > 0.0 {
                ev.sqrt()
            } else {
                clamped += 1;
                0.0
            };
            l.column_mut(j).scale_mut(s);
        }
        if clamped > 0 {
            log::warn!(
                "noise covariance: clamped {clamped} negative eigenvalues (min {min_ev:.3e}, max diag {max_diag:.3e})"
            );
        }
        Ok(Self {
            dt,
            n_steps: n,
            factor: row_major(&l),
            lower_triangular: false,
            report: FactorReport {
                method: FactorMethod::Eigen,
                min_eigenvalue: Some(min_ev),
                clamped,
                max_diagonal: max_diag,
            },
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sample(&self, stream: NoiseStream) -> NoisePath {
        let n = self.n_steps;
        let mut rng = stream.rng();
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        let xi: Vec<Complex64> = (0..n)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(re * scale, im * scale)
            })
            .collect();
        let z = (0..n)
            .map(|j| {
                let row = &self.factor[j * n..(j + 1) * n];
                let end = if self.lower_triangular { j + 1 } else { n };
                row[..end]
                    .iter()
                    .zip(&xi[..end])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        NoisePath {
            dt: self.dt,
            z,
            stream,
        }
    }
}

fn row_major(m: &DMatrix<Complex64>) -> Vec<Complex64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Hermitian Toeplitz C_jk = α(t_j, t_k) on the step midpoints.
pub fn covariance_matrix(n_steps: usize, dt: f64, params: &PhysicalParams) -> DMatrix<Complex64> {
    let kernel = BathKernel::new(params);
    DMatrix::from_fn(n_steps, n_steps, |j, k| {
        kernel.alpha((j as f64 + 0.5) * dt, (k as f64 + 0.5) * dt)
    })
}

/// One noise path of `n_steps` values for `stream`.
pub fn sample_noise(
    n_steps: usize,
    dt: f64,
    params: &PhysicalParams,
    stream: NoiseStream,
    repair: PsdRepair,
) -> Result<NoisePath> {
    Ok(NoiseSampler::new(n_steps, dt, params, repair)?.sample(stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bath(hbar: f64) -> PhysicalParams {
        PhysicalParams::duffing_bath(hbar)
    }

    /// Composite Simpson on [a, b] with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> Complex64, a: f64, b: f64, n: usize) -> Complex64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += f(a + k as f64 * h) * w;
        }
        s * (h / 3.0)
    }

    #[test]
    fn alpha_equal_times() {
        let a = alpha(1.0, 1.0, &bath(0.01));
        assert_relative_eq!(a.re, 0.375, max_relative = 1e-14);
        assert_eq!(a.im, 0.0);
        // Δ̇(0) = 0 agrees with the symmetric finite difference of Δ
        let k = BathKernel::new(&bath(0.01));
        let h = 1e-6;
        assert!((k.delta(h) - k.delta(-h)) / (2.0 * h) == 0.0);
    }

    #[test]
    fn alpha_hermitian() {
        let p = bath(0.01);
        for (t, s) in [(0.3, 0.1), (2.0, 0.0), (0.0, 0.7)] {
            assert_eq!(alpha(s, t, &p), alpha(t, s, &p).conj());
        }
    }

    #[test]
    fn alpha_one_memory_time() {
        let p = bath(0.01);
        let tau = 1.0 / p.lambda;
        let got = alpha(0.5 + tau, 0.5, &p);
        let e = (-1.0f64).exp();
        let want = Complex64::new(
            e * p.mass * p.gamma * p.lambda * p.kt,
            -e * p.hbar * p.mass * p.gamma * p.lambda * p.lambda / 2.0,
        );
        assert_relative_eq!(got.re, want.re, max_relative = 1e-13);
        assert_relative_eq!(got.im, want.im, max_relative = 1e-13);
        // Δ integrates to 1 − e^{−ΛT} on [−T, T]
        let k = BathKernel::new(&p);
        let t_max = 0.4;
        let integral = simpson(|t| Complex64::new(k.delta(t), 0.0), 0.0, t_max, 2000).re * 2.0;
        assert_relative_eq!(integral, 1.0 - (-p.lambda * t_max).exp(), max_relative = 1e-10);
    }

    #[test]
    fn coefficients_vanish_at_zero() {
        let c = MemoryCoefficients::new(&bath(0.01));
        assert_eq!(c.g0(0.0), Complex64::new(0.0, 0.0));
        assert_eq!(c.g1(0.0), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn coefficient_asymptotes() {
        let c = MemoryCoefficients::new(&bath(0.01));
        assert_relative_eq!(c.g0_inf().re, 7.5, max_relative = 1e-14);
        assert_relative_eq!(c.g0_inf().im, -0.625, max_relative = 1e-14);
        assert_relative_eq!(c.g1_inf().im, -0.125, max_relative = 1e-14);
        let late = c.g0(20.0 / 5.0);
        assert!((late - c.g0_inf()).norm() / c.g0_inf().norm() < 1e-6);
    }

    #[test]
    fn g0_matches_quadrature_at_three_memory_times() {
        let p = bath(0.01);
        let c = MemoryCoefficients::new(&p);
        let t = 3.0 / p.lambda;
        // the kink of α at s = t sits at the endpoint, where the one-sided limit
        // is used (the Δ̇(0) = 0 convention only matters on the diagonal)
        let f = |s: f64| alpha(t, s.min(t * (1.0 - 1e-15)), &p);
        let quad = simpson(f, 0.0, t, 4000) / p.hbar;
        assert!((quad - c.g0(t)).norm() / c.g0(t).norm() < 1e-8);
        let quad1 = simpson(|s| f(s) * (t - s), 0.0, t, 4000) / (p.mass * p.hbar);
        assert!((quad1 - c.g1(t)).norm() / c.g1(t).norm() < 1e-8);
    }

    #[test]
    fn q2_coefficient_cancellation() {
        let p = bath(0.01);
        let c = MemoryCoefficients::new(&p);
        let c0 = 0.5 * p.mass * p.gamma * p.lambda;
        for k in 0..100 {
            let t = k as f64 * 0.05;
            let want = c0 * (-p.lambda * t).exp();
            assert!((c.q2_coefficient(t) - want).abs() < 1e-14);
        }
        assert!(c.q2_coefficient(14.0 / p.lambda) < 1e-6 * c.q2_coefficient(0.0));
    }

    #[test]
    fn duffing_kernel_is_psd_at_default_step() {
        let sampler = NoiseSampler::new(200, 0.02, &bath(0.01), PsdRepair::Strict).unwrap();
        assert_eq!(sampler.report.method, FactorMethod::Cholesky);
        let eig = covariance_matrix(200, 0.02, &bath(0.01)).symmetric_eigen();
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= -PSD_TOLERANCE * 0.375);
    }

    #[test]
    fn low_temperature_kernel_rejected_or_clamped() {
        let mut p = bath(0.1);
        p.kt = 0.3;
        let err = NoiseSampler::new(100, 0.005, &p, PsdRepair::Strict).unwrap_err();
        assert!(matches!(err, QbmError::Factorization { .. }));
        let s = NoiseSampler::new(100, 0.005, &p, PsdRepair::Clamp).unwrap();
        assert!(s.report.clamped > 0);
        assert!(s.report.min_eigenvalue.unwrap() < 0.0);
    }

    #[test]
    fn same_stream_is_bit_identical() {
        let s = NoiseSampler::new(50, 0.02, &bath(0.01), PsdRepair::Strict).unwrap();
        let a = s.sample(NoiseStream::new(7, 3));
        let b = s.sample(NoiseStream::new(7, 3));
        let c = s.sample(NoiseStream::new(7, 4));
        assert_eq!(a, b);
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn noise_csv_dump() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        let s = NoiseSampler::new(4, 0.02, &bath(0.01), PsdRepair::Strict).unwrap();
        s.sample(NoiseStream::new(1, 0)).write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("t,re_z,im_z\n"));
    }
}
