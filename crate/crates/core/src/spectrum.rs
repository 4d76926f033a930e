//! Per-point observables: transitions, anharmonicity, the dephasing matrix
//! element, phase variances, persistent current and flux sensitivity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::{self, ConvergeOptions, EigenSolution, OperatorSet};
use crate::params::CircuitParams;

pub const DEFAULT_THETA_SAMPLES: usize = 32;
/// Step of the flux finite differences.
pub const FLUX_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub params: CircuitParams,
    pub delta_10: f64,
    pub delta_21: f64,
    pub anharmonicity: f64,
    pub rel_anharmonicity: f64,
    pub m_phi_sq: f64,
    /// `σ²_k` for `k = 0, 1, 2`.
    pub variance: [f64; 3],
    pub persistent_current_max: f64,
    pub basis_dimension: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableOptions {
    pub converge: ConvergeOptions,
    pub theta_samples: usize,
}

impl Default for ObservableOptions {
    fn default() -> Self {
        Self {
            converge: ConvergeOptions::default(),
            theta_samples: DEFAULT_THETA_SAMPLES,
        }
    }
}

pub fn observables(p: &CircuitParams, tol: f64) -> Result<SpectralResult> {
    observables_with(
        p,
        &ObservableOptions {
            converge: ConvergeOptions::with_tol(tol),
            ..ObservableOptions::default()
        },
    )
}

pub fn observables_with(p: &CircuitParams, opts: &ObservableOptions) -> Result<SpectralResult> {
    let c = operators::converge_with(p, 3, &opts.converge)?;
    let (sol, ops) = (&c.solution, &c.operators);
    let e = &sol.values;
    let delta_10 = e[1] - e[0];
    let delta_21 = e[2] - e[1];
    let anharmonicity = delta_21 - delta_10;
    let m = |k| matrix_element(sol, ops, k, k);
    let m_phi = m(1)? - m(0)?;
    let variance = [
        variance(sol, ops, 0)?,
        variance(sol, ops, 1)?,
        variance(sol, ops, 2)?,
    ];
    let persistent_current_max = max_persistent_current_in(ops, opts.theta_samples)?;
    Ok(SpectralResult {
        params: *p,
        delta_10,
        delta_21,
        anharmonicity,
        rel_anharmonicity: anharmonicity / delta_10,
        m_phi_sq: m_phi * m_phi,
        variance,
        persistent_current_max,
        basis_dimension: sol.basis_dimension,
    })
}

fn check_index(sol: &EigenSolution, k: usize) -> Result<()> {
    if k >= sol.len() {
        return Err(Error::validation(format!(
            "state {k} not retained (have {})",
            sol.len()
        )));
    }
    Ok(())
}

/// `⟨k|φ|k2⟩`.
pub fn matrix_element(sol: &EigenSolution, ops: &OperatorSet, k: usize, k2: usize) -> Result<f64> {
    check_index(sol, k)?;
    check_index(sol, k2)?;
    Ok(ops.phi().bilinear(sol.vector(k), sol.vector(k2)))
}

/// `⟨k|φ²|k⟩ − ⟨k|φ|k⟩²`.
pub fn variance(sol: &EigenSolution, ops: &OperatorSet, k: usize) -> Result<f64> {
    check_index(sol, k)?;
    let v = sol.vector(k);
    let pv = ops.phi().apply(v);
    let mean = linalg::dot(v, &pv);
    Ok(linalg::dot(&pv, &pv) - mean * mean)
}

/// `−(E_J/E_L)⟨0|sin(φ−θ)|0⟩` for a solution computed in `ops`.
pub fn persistent_current_in(ops: &OperatorSet, sol: &EigenSolution) -> f64 {
    let p = ops.params();
    if p.e_j() == 0.0 {
        return 0.0;
    }
    let v = sol.vector(0);
    -(p.e_j() / p.e_l()) * ops.sin_op().bilinear(v, v)
}

/// Ground-state persistent current `(∂ε₀/∂θ)/E_L` at the flux of `p`.
pub fn persistent_current(p: &CircuitParams) -> Result<f64> {
    let c = operators::converge_with(p, 1, &ConvergeOptions::default())?;
    Ok(persistent_current_in(&c.operators, &c.solution))
}

/// Maximum of `|i_p(θ)|` over `θ ∈ [0, π]`, using `p`'s converged basis
/// for every flux sample.
pub fn max_persistent_current(p: &CircuitParams, theta_samples: usize) -> Result<f64> {
    if p.e_j() == 0.0 {
        check_samples(theta_samples)?;
        return Ok(0.0);
    }
    let c = operators::converge_with(p, 1, &ConvergeOptions::default())?;
    max_persistent_current_in(&c.operators, theta_samples)
}

fn check_samples(theta_samples: usize) -> Result<()> {
    if theta_samples < 8 {
        return Err(Error::validation(format!(
            "theta_samples must be >= 8, got {theta_samples}"
        )));
    }
    Ok(())
}

pub fn max_persistent_current_in(ops: &OperatorSet, theta_samples: usize) -> Result<f64> {
    check_samples(theta_samples)?;
    if ops.params().e_j() == 0.0 {
        return Ok(0.0);
    }
    let current = |theta: f64| -> Result<f64> {
        let moved = ops.with_theta(theta);
        let sol = operators::eigensolve(&moved, 1)?;
        Ok(persistent_current_in(&moved, &sol).abs())
    };
    let step = PI / (theta_samples - 1) as f64;
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..theta_samples {
        let theta = i as f64 * step;
        let v = current(theta)?;
        if v > best.1 {
            best = (theta, v);
        }
    }
    let (t0, f0) = best;
    let h = 0.5 * step;
    let (fm, fp) = (current(t0 - h)?, current(t0 + h)?);
    let mut peak = f0.max(fm).max(fp);
    let curvature = fp - 2.0 * f0 + fm;
    if curvature < 0.0 {
        let offset = (0.5 * h * (fm - fp) / curvature).clamp(-h, h);
        peak = peak.max(current(t0 + offset)?);
    }
    Ok(peak)
}

fn transition(ops: &OperatorSet, theta: f64) -> Result<f64> {
    let sol = operators::eigensolve(&ops.with_theta(theta), 2)?;
    Ok(sol.values[1] - sol.values[0])
}

/// `dΔ10/dθ` (GHz per radian): central differences at steps `h` and `2h`,
/// combined by one Richardson step, in a single converged basis.
pub fn flux_sensitivity_numeric(p: &CircuitParams) -> Result<f64> {
    let c = operators::converge_with(p, 2, &ConvergeOptions::default())?;
    flux_sensitivity_in(&c.operators, FLUX_STEP)
}

pub fn flux_sensitivity_in(ops: &OperatorSet, h: f64) -> Result<f64> {
    let theta = ops.params().theta();
    let d = |step: f64| -> Result<f64> {
        Ok((transition(ops, theta + step)? - transition(ops, theta - step)?) / (2.0 * step))
    };
    let (d1, d2) = (d(h)?, d(2.0 * h)?);
    Ok((4.0 * d1 - d2) / 3.0)
}

/// `−E_J sin(θ) σ²₀ e^{−σ²₀/2}` (GHz per radian).
pub fn flux_sensitivity_approx(p: &CircuitParams, sigma0_sq: f64) -> Result<f64> {
    if !(sigma0_sq.is_finite() && sigma0_sq > 0.0) {
        return Err(Error::validation(format!(
            "sigma0_sq must be > 0, got {sigma0_sq}"
        )));
    }
    Ok(-p.e_j() * p.theta().sin() * sigma0_sq * (-sigma0_sq / 2.0).exp())
}
