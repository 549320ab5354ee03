//! Wigner functions of grid states and grid density matrices.
//!
//! For row `q_i` the autocorrelation f_i(k) = ρ(q_{i−k}, q_{i+k}) is formed
//! with zero padding (no periodic wrap) and Fourier transformed in k, giving
//! W on the momentum axis p_j = πħ·j/(n·dq), j ∈ [−n/2, n/2). That axis
//! spans half the grid's FFT momentum range, so the momentum marginal is exact
//! only for states whose momentum content fits inside it; the position
//! marginal is exact for any input.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QbmError, Result};
use crate::model::{GridSpec, WaveFunction};
use crate::spectral::{signed_index, Plans};

/// Maximum |ρ − ρ†| accepted by [`wigner_of_density`].
pub const HERMITICITY_TOLERANCE: f64 = 1e-8;

/// W(q_i, p_j) stored row-major with q as the slow index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerGrid {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub values: Vec<f64>,
    pub hbar: f64,
}

impl WignerGrid {
    pub fn zeros(grid: &GridSpec, hbar: f64) -> Self {
        let n = grid.n;
        let dp = PI * hbar / (n as f64 * grid.dq());
        Self {
            q: grid.positions(),
            p: (0..n).map(|j| (j as f64 - (n / 2) as f64) * dp).collect(),
            values: vec![0.0; n * n],
            hbar,
        }
    }

    pub fn n_q(&self) -> usize {
        self.q.len()
    }

    pub fn n_p(&self) -> usize {
        self.p.len()
    }

    pub fn dq(&self) -> f64 {
        self.q[1] - self.q[0]
    }

    pub fn dp(&self) -> f64 {
        self.p[1] - self.p[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_p() + j]
    }

    /// ∫∫ W dq dp
    pub fn normalization(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dq() * self.dp()
    }

    /// ∫ W dp on the q axis.
    pub fn q_marginal(&self) -> Vec<f64> {
        let dp = self.dp();
        self.values
            .chunks(self.n_p())
            .map(|row| row.iter().sum::<f64>() * dp)
            .collect()
    }

    /// ∫ W dq on the p axis.
    pub fn p_marginal(&self) -> Vec<f64> {
        let dq = self.dq();
        let n_p = self.n_p();
        let mut out = vec![0.0; n_p];
        for row in self.values.chunks(n_p) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
        out.iter_mut().for_each(|o| *o *= dq);
        out
    }

    /// 2πħ ∫∫ W² dq dp, equal to Tr ρ².
    pub fn purity(&self) -> f64 {
        2.0 * PI * self.hbar * self.values.iter().map(|w| w * w).sum::<f64>() * self.dq() * self.dp()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// ∫∫ |W − other| dq dp
    pub fn l1_distance(&self, other: &WignerGrid) -> Result<f64> {
        if self.q != other.q || self.p != other.p {
            return Err(invalid("wigner", "grids differ"));
        }
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s * self.dq() * self.dp())
    }

    /// self += w·other
    pub fn add_scaled(&mut self, other: &WignerGrid, w: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += w * b;
        }
    }

    pub fn scale(&mut self, w: f64) {
        self.values.iter_mut().for_each(|a| *a *= w);
    }

    /// Rows `q,p,w` for small grids.
    pub fn write_csv(&self, path: &std::path::Path, header: &str) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in header.lines() {
            writeln!(f, "# {line}")?;
        }
        writeln!(f, "q,p,w")?;
        for (i, q) in self.q.iter().enumerate() {
            for (j, p) in self.p.iter().enumerate() {
                writeln!(f, "{q},{p},{}", self.at(i, j))?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

type Correlator<'a> = dyn Fn(usize, usize) -> Complex64 + Sync + 'a;

/// out += weight·Σ_s W[s] where each source returns ρ_s(q_x, q_y). Rows are
/// computed in parallel; within a row the sources are added in order, so the
/// result does not depend on the thread count.
fn transform_rows(grid: &GridSpec, out: &mut WignerGrid, weight: f64, sources: &[&Correlator<'_>]) {
    let n = grid.n;
    let scale = weight * grid.dq() / (PI * out.hbar);
    out.values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let plans = Plans::new(n);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let reach = i.min(n - 1 - i);
        for corr in sources {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            buf[0] = corr(i, i);
            for k in 1..=reach {
                buf[k] = corr(i - k, i + k);
                buf[n - k] = corr(i + k, i - k);
            }
            plans.inverse_unscaled(&mut buf);
            for (j, w) in row.iter_mut().enumerate() {
                // output column j holds p index j − n/2
                let fft_bin = (j + n / 2) % n;
                debug_assert_eq!(signed_index(fft_bin, n), j as i64 - (n / 2) as i64);
                *w += scale * buf[fft_bin].re;
            }
        }
    });
}

/// W of a pure state. The state should be normalised; no check is made.
pub fn wigner_of_state(psi: &WaveFunction, hbar: f64) -> WignerGrid {
    let mut out = WignerGrid::zeros(&psi.grid, hbar);
    accumulate_states(&mut out, &[psi], 1.0);
    out
}

/// out += weight·Σ W[ψ_k], for states on the grid `out` was built for.
pub fn accumulate_states(out: &mut WignerGrid, states: &[&WaveFunction], weight: f64) {
    let Some(first) = states.first() else {
        return;
    };
    let grid = first.grid;
    let closures: Vec<Box<Correlator<'_>>> = states
        .iter()
        .map(|psi| {
            let a = &psi.amps;
            Box::new(move |x: usize, y: usize| a[x] * a[y].conj()) as Box<Correlator<'_>>
        })
        .collect();
    let refs: Vec<&Correlator<'_>> = closures.iter().map(|b| b.as_ref()).collect();
    transform_rows(&grid, out, weight, &refs);
}

/// Dense density matrix on a position grid, row-major ρ[i][j] = ρ(q_i, q_j).
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub grid: GridSpec,
    pub values: Vec<Complex64>,
}

impl GridDensity {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.n * grid.n],
        }
    }

    pub fn pure(psi: &WaveFunction) -> Self {
        let mut rho = Self::zeros(psi.grid);
        rho.add_projector(psi, 1.0);
        rho
    }

    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.grid.n + j]
    }

    /// self += w·|ψ⟩⟨ψ|
    pub fn add_projector(&mut self, psi: &WaveFunction, w: f64) {
        let n = self.grid.n;
        for (i, a) in psi.amps.iter().enumerate() {
            let wa = a * w;
            let row = &mut self.values[i * n..(i + 1) * n];
            for (r, b) in row.iter_mut().zip(&psi.amps) {
                *r += wa * b.conj();
            }
        }
    }

    pub fn add_scaled(&mut self, other: &GridDensity, w: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * w;
        }
    }

    pub fn scale(&mut self, w: f64) {
        self.values.iter_mut().for_each(|a| *a *= w);
    }

    /// dq·Σ ρ_ii
    pub fn trace(&self) -> f64 {
        let n = self.grid.n;
        (0..n).map(|i| self.values[i * n + i].re).sum::<f64>() * self.grid.dq()
    }

    /// max |ρ_ij − ρ_ji*|
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.grid.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.values[i * n + j] - self.values[j * n + i].conj()).norm());
            }
        }
        worst
    }

    /// Eigenvalues of the operator (matrix times dq), ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.grid.n;
        let dq = self.grid.dq();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            0.5 * (self.values[i * n + j] + self.values[j * n + i].conj()) * dq
        });
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }
}

/// W of a grid density matrix; rejects input that is not Hermitian to 1e-8
/// (relative to its largest entry).
pub fn wigner_of_density(rho: &GridDensity, hbar: f64) -> Result<WignerGrid> {
    let scale = rho.values.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    let err = rho.hermiticity_error() / scale;
    if err > HERMITICITY_TOLERANCE {
        return Err(QbmError::NotHermitian(err));
    }
    let n = rho.grid.n;
    let mut out = WignerGrid::zeros(&rho.grid, hbar);
    let corr = |x: usize, y: usize| rho.values[x * n + y];
    transform_rows(&rho.grid, &mut out, 1.0, &[&corr]);
    Ok(out)
}
