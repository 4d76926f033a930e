//! Circuit parameters, physical constants and unit conversions.
//!
//! Energies are stored as frequencies `E/h` in GHz. The external flux is the
//! dimensionless phase `theta = 2π Θ/Φ0`, stored reduced to `[0, 2π)`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CODATA-2018 exact SI constants and values derived from them.
pub mod constants {
    use std::f64::consts::TAU;

    /// Elementary charge (C).
    pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
    /// Planck constant (J s).
    pub const PLANCK: f64 = 6.626_070_15e-34;
    /// Reduced Planck constant (J s).
    pub const HBAR: f64 = PLANCK / TAU;
    /// Boltzmann constant (J/K).
    pub const BOLTZMANN: f64 = 1.380_649e-23;
    /// Superconducting flux quantum `h/2e` (Wb).
    pub const FLUX_QUANTUM: f64 = PLANCK / (2.0 * ELEMENTARY_CHARGE);
    /// Superconducting resistance quantum `h/(2e)^2` (Ω).
    pub const RESISTANCE_QUANTUM: f64 = PLANCK / (4.0 * ELEMENTARY_CHARGE * ELEMENTARY_CHARGE);
    /// Joules per GHz of `E/h`.
    pub const JOULES_PER_GHZ: f64 = PLANCK * 1e9;
}

use constants::*;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("invalid {field}: {value} ({reason})")]
    Invalid {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
}

pub(crate) fn require_positive(field: &'static str, value: f64) -> Result<f64, ParamError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ParamError::Invalid {
            field,
            value,
            reason: "must be finite and > 0",
        })
    }
}

pub(crate) fn require_non_negative(field: &'static str, value: f64) -> Result<f64, ParamError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(ParamError::Invalid {
            field,
            value,
            reason: "must be finite and >= 0",
        })
    }
}

/// Reduce a flux phase to `[0, 2π)`.
pub fn reduce_flux(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Fluxonium circuit energies (GHz) and external flux phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    e_c: f64,
    e_l: f64,
    e_j: f64,
    theta: f64,
}

impl CircuitParams {
    pub fn new(e_c: f64, e_l: f64, e_j: f64, theta: f64) -> Result<Self, ParamError> {
        if !theta.is_finite() {
            return Err(ParamError::Invalid {
                field: "theta",
                value: theta,
                reason: "must be finite",
            });
        }
        Ok(Self {
            e_c: require_positive("e_c", e_c)?,
            e_l: require_positive("e_l", e_l)?,
            e_j: require_non_negative("e_j", e_j)?,
            theta: reduce_flux(theta),
        })
    }

    /// Build from the dimensionless sweep axes `sqrt(E_C/E_L)` and `E_J/E_C`
    /// at a reference charging energy.
    pub fn from_ratios(e_c: f64, r_imp: f64, r_j: f64, theta: f64) -> Result<Self, ParamError> {
        let e_c = require_positive("e_c", e_c)?;
        let r_imp = require_positive("r_imp", r_imp)?;
        let r_j = require_non_negative("r_j", r_j)?;
        Self::new(e_c, e_c / (r_imp * r_imp), r_j * e_c, theta)
    }

    /// Build from capacitance (F), inductance (H) and junction critical
    /// current (A). The flux phase defaults to zero.
    pub fn from_physical(
        capacitance: f64,
        inductance: f64,
        critical_current: f64,
    ) -> Result<Self, ParamError> {
        let c = require_positive("capacitance", capacitance)?;
        let l = require_positive("inductance", inductance)?;
        let ic = require_positive("critical_current", critical_current)?;
        Self::new(
            charging_energy_from_capacitance(c),
            inductive_energy_from_inductance(l),
            josephson_energy_from_critical_current(ic),
            0.0,
        )
    }

    pub fn e_c(&self) -> f64 {
        self.e_c
    }

    pub fn e_l(&self) -> f64 {
        self.e_l
    }

    pub fn e_j(&self) -> f64 {
        self.e_j
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self {
            theta: reduce_flux(theta),
            ..self
        }
    }

    pub fn with_e_j(self, e_j: f64) -> Result<Self, ParamError> {
        Self::new(self.e_c, self.e_l, e_j, self.theta)
    }

    /// Multiply every energy by `factor`, leaving the flux untouched.
    pub fn scaled(self, factor: f64) -> Result<Self, ParamError> {
        let f = require_positive("factor", factor)?;
        Self::new(self.e_c * f, self.e_l * f, self.e_j * f, self.theta)
    }

    pub fn ratios(&self) -> DerivedRatios {
        ratios(self)
    }

    /// Zero-point spread of the bare oscillator `(E_C / 4E_L)^(1/4)`.
    pub fn phi_zpf(&self) -> f64 {
        (self.e_c / (4.0 * self.e_l)).powf(0.25)
    }

    /// Bare oscillator quantum `2 sqrt(E_C E_L)` (GHz).
    pub fn plasma_energy(&self) -> f64 {
        2.0 * (self.e_c * self.e_l).sqrt()
    }

    pub fn capacitance(&self) -> f64 {
        capacitance_from_charging_energy(self.e_c)
    }

    pub fn inductance(&self) -> f64 {
        inductance_from_inductive_energy(self.e_l)
    }

    /// Critical current in amperes; zero when `E_J = 0`.
    pub fn critical_current(&self) -> f64 {
        critical_current_from_josephson_energy(self.e_j)
    }
}

/// Dimensionless ratios used as sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRatios {
    /// `sqrt(E_C/E_L)`
    pub r_imp: f64,
    /// `E_J/E_C`
    pub r_j: f64,
    /// `Z0/R_Q = r_imp / 2π`
    pub z_over_rq: f64,
}

pub fn ratios(p: &CircuitParams) -> DerivedRatios {
    let r_imp = (p.e_c / p.e_l).sqrt();
    DerivedRatios {
        r_imp,
        r_j: p.e_j / p.e_c,
        z_over_rq: r_imp / TAU,
    }
}

/// `E_C/h = (2e)^2 / 2C` in GHz.
pub fn charging_energy_from_capacitance(capacitance: f64) -> f64 {
    let q = 2.0 * ELEMENTARY_CHARGE;
    q * q / (2.0 * capacitance) / JOULES_PER_GHZ
}

pub fn capacitance_from_charging_energy(e_c: f64) -> f64 {
    let q = 2.0 * ELEMENTARY_CHARGE;
    q * q / (2.0 * e_c * JOULES_PER_GHZ)
}

/// `E_L/h = (Φ0/2π)^2 / 2L` in GHz.
pub fn inductive_energy_from_inductance(inductance: f64) -> f64 {
    let phi = FLUX_QUANTUM / (2.0 * PI);
    phi * phi / (2.0 * inductance) / JOULES_PER_GHZ
}

pub fn inductance_from_inductive_energy(e_l: f64) -> f64 {
    let phi = FLUX_QUANTUM / (2.0 * PI);
    phi * phi / (2.0 * e_l * JOULES_PER_GHZ)
}

/// `E_J/h = I_c Φ0 / 2π` in GHz.
pub fn josephson_energy_from_critical_current(critical_current: f64) -> f64 {
    critical_current * FLUX_QUANTUM / (2.0 * PI) / JOULES_PER_GHZ
}

pub fn critical_current_from_josephson_energy(e_j: f64) -> f64 {
    e_j * JOULES_PER_GHZ * 2.0 * PI / FLUX_QUANTUM
}

/// Characteristic impedance `Z0 = sqrt(E_C/E_L) R_Q / 2π` in ohms.
pub fn impedance(p: &CircuitParams) -> f64 {
    ratios(p).z_over_rq * RESISTANCE_QUANTUM
}
