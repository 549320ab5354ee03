//! Quantum Brownian motion by non-Markovian quantum state diffusion.
//!
//! Pure-state trajectories are propagated on a position grid and averaged
//! into the reduced density operator; harmonic-oscillator master-equation
//! integrators serve as independent checks of the ensemble mean.

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod propagator;
pub mod spectral;
pub mod wigner;

pub use error::{QbmError, Result};
