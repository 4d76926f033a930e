//! Charge-dispersion bands of the inductor-free circuit and the effective
//! capacitance derived from their curvature.
//!
//! Capacitances are carried as capacitive energies `E_C* = (2e)²/2C*` in GHz.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymTridiagonal;

/// Starting charge cutoff for `band`.
pub const DEFAULT_M_MAX: usize = 8;
/// Quasicharge step of the curvature stencil.
pub const CURVATURE_STEP: f64 = 1e-3;

const BAND_TOL: f64 = 1e-10;
const M_MAX_CAP: usize = 1 << 14;

fn charge_matrix(e_c: f64, e_j: f64, n_tilde: f64, m_max: usize) -> SymTridiagonal {
    let m = m_max as i64;
    let diag = (-m..=m)
        .map(|q| {
            let x = q as f64 + n_tilde;
            e_c * x * x
        })
        .collect();
    SymTridiagonal::new(diag, vec![-0.5 * e_j; 2 * m_max])
}

fn band_at(e_c: f64, e_j: f64, n_tilde: f64, k: usize, m_max: usize) -> f64 {
    charge_matrix(e_c, e_j, n_tilde, m_max).lowest_eigenvalues(k + 1)[k]
}

/// `k`-th band at quasicharge `n_tilde` (`|n_tilde| <= 0.5`), starting from
/// charge states `|m| <= m_max` and doubling the cutoff until stable.
pub fn band(e_c: f64, e_j: f64, n_tilde: f64, k: usize, m_max: usize) -> Result<f64> {
    crate::params::require_positive("e_c", e_c)?;
    crate::params::require_non_negative("e_j", e_j)?;
    if !(n_tilde.abs() <= 0.5) {
        return Err(Error::validation(format!(
            "quasicharge must lie in [-0.5, 0.5], got {n_tilde}"
        )));
    }
    if m_max < 8 {
        return Err(Error::validation(format!(
            "m_max must be >= 8, got {m_max}"
        )));
    }
    if k > 2 * m_max {
        return Err(Error::validation(format!(
            "band {k} not available with {} charge states",
            2 * m_max + 1
        )));
    }
    let mut m = m_max;
    let mut prev = band_at(e_c, e_j, n_tilde, k, m);
    loop {
        m *= 2;
        let next = band_at(e_c, e_j, n_tilde, k, m);
        if (next - prev).abs() <= BAND_TOL * next.abs().max(e_c) {
            return Ok(next);
        }
        if m >= M_MAX_CAP {
            return Err(Error::Convergence {
                dimension: 2 * m + 1,
                last_delta: (next - prev).abs() / next.abs().max(e_c),
            });
        }
        prev = next;
    }
}

/// `band` for any quasicharge, folded into the first zone.
pub fn band_periodic(e_c: f64, e_j: f64, n_tilde: f64, k: usize, m_max: usize) -> Result<f64> {
    if !n_tilde.is_finite() {
        return Err(Error::validation("quasicharge must be finite"));
    }
    let folded = n_tilde - n_tilde.round();
    band(e_c, e_j, folded, k, m_max)
}

/// `E_C* = ½ d²ε₀/dñ²` at `ñ = 0` by a five-point stencil.
pub fn effective_capacitance_numeric(e_c: f64, e_j: f64) -> Result<f64> {
    let h = CURVATURE_STEP;
    let f = |x: f64| band(e_c, e_j, x, 0, DEFAULT_M_MAX);
    let d2 = (-f(2.0 * h)? + 16.0 * f(h)? - 30.0 * f(0.0)? + 16.0 * f(-h)? - f(-2.0 * h)?)
        / (12.0 * h * h);
    Ok(0.5 * d2)
}

/// Phase-slip amplitude `t = 4(2E_J³E_C)^{1/4}/√π · exp(−8√(E_J/2E_C))`.
pub fn instanton_amplitude(e_c: f64, e_j: f64) -> Result<f64> {
    crate::params::require_positive("e_c", e_c)?;
    if !(e_j.is_finite() && e_j > 0.0) {
        return Err(Error::Domain(format!(
            "instanton amplitude needs e_j > 0, got {e_j}"
        )));
    }
    let prefactor = 4.0 * (2.0 * e_j.powi(3) * e_c).powf(0.25) / PI.sqrt();
    Ok(prefactor * (-8.0 * (e_j / (2.0 * e_c)).sqrt()).exp())
}

/// Tight-binding `E_C* = 4π²t`.
pub fn effective_capacitance_tb(e_c: f64, e_j: f64) -> Result<f64> {
    Ok(4.0 * PI * PI * instanton_amplitude(e_c, e_j)?)
}

/// `ω*/2π = 2√(E_L E_C*)` in GHz.
pub fn effective_frequency(e_l: f64, e_c_star: f64) -> Result<f64> {
    crate::params::require_positive("e_l", e_l)?;
    crate::params::require_positive("e_c_star", e_c_star)?;
    Ok(2.0 * (e_l * e_c_star).sqrt())
}

/// `σ²_k = (2k+1)/2 · √(E_C*/E_L)`.
pub fn predicted_variance(e_l: f64, e_c_star: f64, k: usize) -> Result<f64> {
    crate::params::require_positive("e_l", e_l)?;
    crate::params::require_positive("e_c_star", e_c_star)?;
    Ok((2 * k + 1) as f64 / 2.0 * (e_c_star / e_l).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionResult {
    pub quasicharge_grid: Vec<f64>,
    /// `bands[k][i]` is band `k` at `quasicharge_grid[i]`.
    pub bands: [Vec<f64>; 2],
    pub c_star_numeric: f64,
    /// Absent at `E_J = 0`, where the instanton formula does not apply.
    pub c_star_tb: Option<f64>,
    pub t_instanton: Option<f64>,
    /// `ω*/2π` (GHz), when an inductive energy is supplied.
    pub omega_star: Option<f64>,
}

/// Bands 0 and 1 on `points` uniform quasicharges spanning `[−0.5, 0.5]`.
pub fn dispersion(e_c: f64, e_j: f64, e_l: Option<f64>, points: usize) -> Result<DispersionResult> {
    if points < 2 {
        return Err(Error::validation(format!(
            "quasicharge grid needs >= 2 points, got {points}"
        )));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| -0.5 + i as f64 / (points - 1) as f64)
        .collect();
    let mut bands = [Vec::with_capacity(points), Vec::with_capacity(points)];
    for &x in &grid {
        for (k, b) in bands.iter_mut().enumerate() {
            b.push(band(e_c, e_j, x, k, DEFAULT_M_MAX)?);
        }
    }
    let c_star_numeric = effective_capacitance_numeric(e_c, e_j)?;
    let (t_instanton, c_star_tb) = if e_j > 0.0 {
        (
            Some(instanton_amplitude(e_c, e_j)?),
            Some(effective_capacitance_tb(e_c, e_j)?),
        )
    } else {
        (None, None)
    };
    let omega_star = e_l
        .map(|l| effective_frequency(l, c_star_numeric))
        .transpose()?;
    Ok(DispersionResult {
        quasicharge_grid: grid,
        bands,
        c_star_numeric,
        c_star_tb,
        t_instanton,
        omega_star,
    })
}
