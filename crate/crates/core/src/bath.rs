//! Markovian pure dephasing from an ohmic bath, and the leakage/dephasing
//! error budget of a gate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::constants::{BOLTZMANN, HBAR};
use crate::params::{require_non_negative, require_positive};

/// Calibration temperature used when none is given (typical dilution
/// refrigerator base temperature).
pub const DEFAULT_TEMPERATURE: f64 = 0.020;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BathFamily {
    /// `J(ω) = α ω`.
    Ohmic,
    /// `J(ω) ∝ α ω^s`; only `s = 1` has a finite zero-frequency limit.
    PowerLaw { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathParams {
    pub family: BathFamily,
    pub alpha: f64,
    /// Kelvin.
    pub temperature: f64,
}

impl BathParams {
    pub fn ohmic(alpha: f64, temperature: f64) -> Result<Self> {
        Self::new(BathFamily::Ohmic, alpha, temperature)
    }

    pub fn new(family: BathFamily, alpha: f64, temperature: f64) -> Result<Self> {
        require_non_negative("alpha", alpha)?;
        require_positive("temperature", temperature)?;
        Ok(Self {
            family,
            alpha,
            temperature,
        })
    }
}

/// `lim_{ω→0} J(ω) coth(βħω/2)` in s⁻¹.
fn zero_frequency_noise(bath: &BathParams) -> Result<f64> {
    match bath.family {
        BathFamily::Ohmic => Ok(2.0 * bath.alpha * BOLTZMANN * bath.temperature / HBAR),
        BathFamily::PowerLaw { exponent: 1.0 } => {
            Ok(2.0 * bath.alpha * BOLTZMANN * bath.temperature / HBAR)
        }
        BathFamily::PowerLaw { exponent } => {
            let limit = if exponent > 1.0 { "0" } else { "infinite" };
            Err(Error::NotImplemented(format!(
                "power-law bath with exponent {exponent}: lim ω→0 J(ω)coth(βħω/2) ~ ω^(s-1) is {limit}, \
                 so the Markovian pure-dephasing rate is not finite and nonzero; only the ohmic family is supported"
            )))
        }
    }
}

/// `Γφ = (π M²φ / 4) · lim_{ω→0} J(ω) coth(βħω/2)` in s⁻¹.
pub fn pure_dephasing_rate(m_phi_sq: f64, bath: &BathParams) -> Result<f64> {
    require_non_negative("m_phi_sq", m_phi_sq)?;
    Ok(PI * m_phi_sq / 4.0 * zero_frequency_noise(bath)?)
}

/// Ohmic coupling `α` that gives `gamma_measured` (s⁻¹) at `m_phi_sq` and
/// `temperature` (K).
pub fn calibrate_alpha(gamma_measured: f64, m_phi_sq: f64, temperature: f64) -> Result<f64> {
    require_positive("gamma_measured", gamma_measured)?;
    require_positive("temperature", temperature)?;
    if m_phi_sq == 0.0 {
        return Err(Error::Domain(
            "cannot calibrate alpha at m_phi_sq = 0: the rate does not depend on alpha there"
                .into(),
        ));
    }
    require_positive("m_phi_sq", m_phi_sq)?;
    let unit = BathParams::ohmic(1.0, temperature)?;
    Ok(gamma_measured / pure_dephasing_rate(m_phi_sq, &unit)?)
}

/// Proportionality constants in `τ = c_τ/Ω` and `p_φ = c_φ Γφ τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConstants {
    pub gate_time_factor: f64,
    pub dephasing_factor: f64,
}

impl Default for BudgetConstants {
    fn default() -> Self {
        Self {
            gate_time_factor: 1.0,
            dephasing_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// s⁻¹.
    pub gamma_phi: f64,
    /// Seconds.
    pub gate_time: f64,
    /// Rabi rate Ω (s⁻¹).
    pub rabi: f64,
    pub p_leak: f64,
    pub p_dephase: f64,
    /// Set when either probability reaches 1, where the estimates no
    /// longer mean anything.
    pub out_of_regime: bool,
}

/// Budget for a gate of Rabi rate `rabi` (s⁻¹) on a qubit with anharmonicity
/// `delta` (GHz).
pub fn error_budget(gamma_phi: f64, delta: f64, rabi: f64) -> Result<ErrorBudget> {
    error_budget_with(gamma_phi, delta, rabi, &BudgetConstants::default())
}

pub fn error_budget_with(
    gamma_phi: f64,
    delta: f64,
    rabi: f64,
    constants: &BudgetConstants,
) -> Result<ErrorBudget> {
    require_non_negative("gamma_phi", gamma_phi)?;
    require_positive("delta", delta)?;
    require_positive("rabi", rabi)?;
    require_positive("gate_time_factor", constants.gate_time_factor)?;
    require_positive("dephasing_factor", constants.dephasing_factor)?;
    // ħΩ/δ with δ = h·f_δ
    let ratio = rabi / (2.0 * PI * delta * 1e9);
    let p_leak = ratio * ratio;
    let gate_time = constants.gate_time_factor / rabi;
    let p_dephase = constants.dephasing_factor * gamma_phi * gate_time;
    Ok(ErrorBudget {
        gamma_phi,
        gate_time,
        rabi,
        p_leak,
        p_dephase,
        out_of_regime: p_leak >= 1.0 || p_dephase >= 1.0,
    })
}
