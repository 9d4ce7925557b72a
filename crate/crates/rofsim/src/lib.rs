//! Physical-layer simulator for a converged access-metro optical link that
//! carries an analog IF-OFDM radio-over-fibre channel next to a coherent
//! DP-QPSK channel through a cascade of ROADM wavelength-selective switches.
//!
//! The crate is organized around [`signal::SampleBuffer`], a sampled complex
//! envelope; everything else is either a transform over buffers (modulators,
//! fibre, amplifiers, filters, detectors), a measurement over buffers
//! (spectra, OSNR, EVM), or plumbing that composes them into reproducible
//! scenario runs.

pub mod analysis;
pub mod coherent;
pub mod error;
pub mod fft;
pub mod ofdm;
pub mod optics;
pub mod rng;
pub mod signal;
pub mod topology;

pub use error::{Result, SimError};
pub use rng::RngStream;
pub use signal::{SampleBuffer, SignalDomain};

/// Planck constant, J s.
pub const PLANCK: f64 = 6.62607015e-34;
/// Elementary charge, C.
pub const ELECTRON_CHARGE: f64 = 1.602176634e-19;
/// Vacuum speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
