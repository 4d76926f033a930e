//! Spectra, matrix elements and dephasing estimates for the fluxonium circuit
//! `H = E_C n² + E_L φ² − E_J cos(φ − θ)`.
//!
//! Energies are carried as frequencies `E/h` in GHz throughout.

pub mod bath;
pub mod bloch;
pub mod cli;
pub mod error;
mod linalg;
pub mod operators;
pub mod params;
pub mod spectrum;
pub mod sweep;
pub mod units;

pub use error::{Error, Result};
pub use linalg::SymTridiagonal;
pub use params::CircuitParams;
