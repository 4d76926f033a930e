//! Parameter-grid sweeps over `(√(E_C/E_L), E_J/E_C)`, phase classification
//! and log-linear regression of the resulting columns.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch;
use crate::error::{Error, Result};
use crate::operators::{self, ConvergeOptions};
use crate::params::CircuitParams;
use crate::spectrum::{self, ObservableOptions, DEFAULT_THETA_SAMPLES};

/// Persistent-current threshold separating the two phases.
pub const DEFAULT_THRESHOLD: f64 = 1e-2;
/// Basis cap per grid point; large enough for `√(E_C/E_L) ≲ 300`.
pub const DEFAULT_MAX_DIMENSION: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub r_imp_grid: Vec<f64>,
    pub r_j_grid: Vec<f64>,
    pub theta: f64,
    pub e_c_ref: f64,
    pub theta_samples: usize,
    pub tol: f64,
    pub threshold: f64,
    pub max_dimension: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            r_imp_grid: Vec::new(),
            r_j_grid: Vec::new(),
            theta: FRAC_PI_2,
            e_c_ref: 1.0,
            theta_samples: DEFAULT_THETA_SAMPLES,
            tol: 1e-9,
            threshold: DEFAULT_THRESHOLD,
            max_dimension: DEFAULT_MAX_DIMENSION,
        }
    }
}

fn sorted_grid(name: &str, grid: &[f64], allow_zero: bool) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::validation(format!("{name} is empty")));
    }
    for &x in grid {
        let ok = x.is_finite() && (x > 0.0 || (allow_zero && x == 0.0));
        if !ok {
            let bound = if allow_zero { ">= 0" } else { "> 0" };
            return Err(Error::validation(format!(
                "{name} value {x} must be finite and {bound}"
            )));
        }
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if let Some(w) = g.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::validation(format!("{name} repeats {}", w[0])));
    }
    Ok(g)
}

impl SweepSpec {
    pub fn new(r_imp_grid: Vec<f64>, r_j_grid: Vec<f64>) -> Self {
        Self {
            r_imp_grid,
            r_j_grid,
            ..Self::default()
        }
    }

    /// Check the spec and return it with both grids sorted ascending.
    pub fn validated(&self) -> Result<SweepSpec> {
        let r_imp_grid = sorted_grid("r_imp_grid", &self.r_imp_grid, false)?;
        let r_j_grid = sorted_grid("r_j_grid", &self.r_j_grid, true)?;
        if !self.theta.is_finite() {
            return Err(Error::validation("theta must be finite"));
        }
        crate::params::require_positive("e_c_ref", self.e_c_ref)?;
        crate::params::require_positive("threshold", self.threshold)?;
        if self.theta_samples < 8 {
            return Err(Error::validation("theta_samples must be >= 8"));
        }
        if !(self.tol >= 1e-12) {
            return Err(Error::validation("tol must be >= 1e-12"));
        }
        if self.max_dimension < 64 {
            return Err(Error::validation("max_dimension must be >= 64"));
        }
        Ok(SweepSpec {
            r_imp_grid,
            r_j_grid,
            ..self.clone()
        })
    }

    fn observable_options(&self) -> ObservableOptions {
        ObservableOptions {
            converge: ConvergeOptions {
                tol: self.tol,
                max_dimension: self.max_dimension,
                ..ConvergeOptions::default()
            },
            theta_samples: self.theta_samples,
        }
    }

    /// `(r_j, r_imp)` pairs in output order: `r_j` outer, `r_imp` inner.
    fn points(&self) -> Vec<(f64, f64)> {
        self.r_j_grid
            .iter()
            .flat_map(|&rj| self.r_imp_grid.iter().map(move |&ri| (rj, ri)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Insulating,
    Superconducting,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Insulating => "insulating",
            Phase::Superconducting => "superconducting",
        }
    }
}

/// Insulating iff `i_p_max < threshold`.
pub fn classify(i_p_max: f64, threshold: f64) -> Result<Phase> {
    if !(i_p_max >= 0.0) {
        return Err(Error::validation(format!(
            "i_p_max must be >= 0, got {i_p_max}"
        )));
    }
    Ok(if i_p_max < threshold {
        Phase::Insulating
    } else {
        Phase::Superconducting
    })
}

/// One grid point. Values that are undefined at this point (or that could
/// not be computed) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub r_imp: f64,
    pub r_j: f64,
    pub theta: f64,
    pub delta_10: Option<f64>,
    pub rel_anharmonicity: Option<f64>,
    pub m_phi_sq: Option<f64>,
    pub m_phi_sq_over_delta_r: Option<f64>,
    pub sigma0_sq: Option<f64>,
    pub sigma0_sq_predicted: Option<f64>,
    pub e_c_star_numeric: Option<f64>,
    pub e_c_star_tb: Option<f64>,
    pub i_p_max: Option<f64>,
    pub phase: Option<Phase>,
    pub basis_dimension: Option<usize>,
    /// `None` for a successful point, otherwise the failure.
    pub error: Option<String>,
}

impl SweepRecord {
    fn failed(r_imp: f64, r_j: f64, theta: f64, err: &Error) -> Self {
        Self {
            r_imp,
            r_j,
            theta,
            delta_10: None,
            rel_anharmonicity: None,
            m_phi_sq: None,
            m_phi_sq_over_delta_r: None,
            sigma0_sq: None,
            sigma0_sq_predicted: None,
            e_c_star_numeric: None,
            e_c_star_tb: None,
            i_p_max: None,
            phase: None,
            basis_dimension: None,
            error: Some(format!("{}: {}", err.kind(), err)),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn value(&self, column: Column) -> Option<f64> {
        match column {
            Column::Delta10 => self.delta_10,
            Column::RelAnharmonicity => self.rel_anharmonicity,
            Column::AbsRelAnharmonicity => self.rel_anharmonicity.map(f64::abs),
            Column::MPhiSq => self.m_phi_sq,
            Column::MPhiSqOverDeltaR => self.m_phi_sq_over_delta_r,
            Column::Sigma0Sq => self.sigma0_sq,
            Column::IpMax => self.i_p_max,
        }
    }
}

fn evaluate(spec: &SweepSpec, r_imp: f64, r_j: f64) -> Result<SweepRecord> {
    let p = CircuitParams::from_ratios(spec.e_c_ref, r_imp, r_j, spec.theta)?;
    let s = spectrum::observables_with(&p, &spec.observable_options())?;
    let e_c_star = bloch::effective_capacitance_numeric(p.e_c(), p.e_j())?;
    let e_c_star_tb = if p.e_j() > 0.0 {
        Some(bloch::effective_capacitance_tb(p.e_c(), p.e_j())?)
    } else {
        None
    };
    let predicted = bloch::predicted_variance(p.e_l(), e_c_star, 0)?;
    let ratio = if s.rel_anharmonicity != 0.0 {
        Some(s.m_phi_sq / s.rel_anharmonicity)
    } else {
        None
    };
    Ok(SweepRecord {
        r_imp,
        r_j,
        theta: p.theta(),
        delta_10: Some(s.delta_10),
        rel_anharmonicity: Some(s.rel_anharmonicity),
        m_phi_sq: Some(s.m_phi_sq),
        m_phi_sq_over_delta_r: ratio,
        sigma0_sq: Some(s.variance[0]),
        sigma0_sq_predicted: Some(predicted),
        e_c_star_numeric: Some(e_c_star),
        e_c_star_tb,
        i_p_max: Some(s.persistent_current_max),
        phase: Some(classify(s.persistent_current_max, spec.threshold)?),
        basis_dimension: Some(s.basis_dimension),
        error: None,
    })
}

/// Evaluate every grid point. Failed points become marked rows.
pub fn run(spec: &SweepSpec) -> Result<Vec<SweepRecord>> {
    let spec = spec.validated()?;
    let theta = crate::params::reduce_flux(spec.theta);
    Ok(spec
        .points()
        .par_iter()
        .map(|&(rj, ri)| {
            evaluate(&spec, ri, rj).unwrap_or_else(|e| SweepRecord::failed(ri, rj, theta, &e))
        })
        .collect())
}

/// One point of the persistent-current phase diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub r_j: f64,
    pub el_over_ec: f64,
    pub r_imp: f64,
    pub i_p_max: Option<f64>,
    pub phase: Option<Phase>,
    pub basis_dimension: Option<usize>,
    pub error: Option<String>,
}

fn evaluate_phase(spec: &SweepSpec, r_imp: f64, r_j: f64) -> Result<(f64, usize)> {
    let p = CircuitParams::from_ratios(spec.e_c_ref, r_imp, r_j, spec.theta)?;
    let c = operators::converge_with(&p, 1, &spec.observable_options().converge)?;
    let ip = spectrum::max_persistent_current_in(&c.operators, spec.theta_samples)?;
    Ok((ip, c.solution.basis_dimension))
}

/// Only the maximum persistent current and phase at each grid point.
pub fn run_phase_diagram(spec: &SweepSpec) -> Result<Vec<PhasePoint>> {
    let spec = spec.validated()?;
    Ok(spec
        .points()
        .par_iter()
        .map(|&(rj, ri)| {
            let base = PhasePoint {
                r_j: rj,
                el_over_ec: 1.0 / (ri * ri),
                r_imp: ri,
                i_p_max: None,
                phase: None,
                basis_dimension: None,
                error: None,
            };
            let outcome = evaluate_phase(&spec, ri, rj)
                .and_then(|(ip, n)| Ok((ip, n, classify(ip, spec.threshold)?)));
            match outcome {
                Ok((ip, n, phase)) => PhasePoint {
                    i_p_max: Some(ip),
                    phase: Some(phase),
                    basis_dimension: Some(n),
                    ..base
                },
                Err(e) => PhasePoint {
                    error: Some(format!("{}: {}", e.kind(), e)),
                    ..base
                },
            }
        })
        .collect())
}

/// Classification along one row of fixed `E_L/E_C`, sorted by `E_J/E_C`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRow {
    pub r_imp: f64,
    pub el_over_ec: f64,
    /// Number of phase changes between neighbouring `r_j`.
    pub switches: usize,
    /// Smallest `r_j` classified superconducting.
    pub first_superconducting: Option<f64>,
}

/// Group successful phase points into rows ordered by decreasing `E_L/E_C`.
pub fn phase_rows(points: &[PhasePoint]) -> Vec<PhaseRow> {
    let mut r_imps: Vec<f64> = points.iter().map(|p| p.r_imp).collect();
    r_imps.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    r_imps.dedup();
    r_imps
        .into_iter()
        .map(|ri| {
            let mut row: Vec<(f64, Phase)> = points
                .iter()
                .filter(|p| p.r_imp == ri)
                .filter_map(|p| p.phase.map(|ph| (p.r_j, ph)))
                .collect();
            row.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
            let switches = row.windows(2).filter(|w| w[0].1 != w[1].1).count();
            let first_superconducting = row
                .iter()
                .find(|(_, ph)| *ph == Phase::Superconducting)
                .map(|(rj, _)| *rj);
            PhaseRow {
                r_imp: ri,
                el_over_ec: 1.0 / (ri * ri),
                switches,
                first_superconducting,
            }
        })
        .collect()
}

/// Whether rows switch at most once and the boundary never moves down as
/// `E_L/E_C` decreases. Rows with no superconducting point count as a
/// boundary above the grid.
pub fn boundary_is_monotone(rows: &[PhaseRow]) -> bool {
    let key = |r: &PhaseRow| r.first_superconducting.unwrap_or(f64::INFINITY);
    rows.iter().all(|r| r.switches <= 1) && rows.windows(2).all(|w| key(&w[1]) >= key(&w[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Delta10,
    RelAnharmonicity,
    /// `|δ_r|`; δ_r is negative deep in the insulating phase.
    AbsRelAnharmonicity,
    MPhiSq,
    MPhiSqOverDeltaR,
    Sigma0Sq,
    IpMax,
}

impl Column {
    pub fn name(&self) -> &'static str {
        match self {
            Column::Delta10 => "delta_10",
            Column::RelAnharmonicity => "rel_anharmonicity",
            Column::AbsRelAnharmonicity => "abs_rel_anharmonicity",
            Column::MPhiSq => "m_phi_sq",
            Column::MPhiSqOverDeltaR => "m_phi_sq_over_delta_r",
            Column::Sigma0Sq => "sigma0_sq",
            Column::IpMax => "i_p_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    /// `ln y = intercept + slope·x`.
    ExpDecay,
    /// `ln y = intercept + slope·ln x`.
    PowerLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: FitKind,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    /// Points dropped because the value was missing or not positive.
    pub excluded: usize,
}

pub const MIN_FIT_POINTS: usize = 4;

/// Ordinary least squares of `ln y` against `x` or `ln x`.
pub fn fit_series(xs: &[f64], ys: &[f64], kind: FitKind) -> Result<FitReport> {
    if xs.len() != ys.len() {
        return Err(Error::validation("x and y lengths differ"));
    }
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut excluded = 0;
    for (&x, &y) in xs.iter().zip(ys) {
        let ok_x = match kind {
            FitKind::ExpDecay => x.is_finite(),
            FitKind::PowerLaw => x.is_finite() && x > 0.0,
        };
        if ok_x && y.is_finite() && y > 0.0 {
            u.push(if kind == FitKind::PowerLaw { x.ln() } else { x });
            v.push(y.ln());
        } else {
            excluded += 1;
        }
    }
    if u.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            usable: u.len(),
            excluded,
            required: MIN_FIT_POINTS,
        });
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let sxx: f64 = u.iter().map(|a| (a - mu).powi(2)).sum();
    let sxy: f64 = u.iter().zip(&v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let syy: f64 = v.iter().map(|b| (b - mv).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::validation("all x values coincide"));
    }
    let slope = sxy / sxx;
    let intercept = mv - slope * mu;
    let ss_res: f64 = u
        .iter()
        .zip(&v)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(FitReport {
        kind,
        slope,
        intercept,
        r_squared,
        n_points: u.len(),
        excluded,
    })
}

/// Fit `column` against `r_imp` over the insulating records, which must all
/// share one `r_j`.
pub fn fit_decay(records: &[SweepRecord], column: Column, kind: FitKind) -> Result<FitReport> {
    let subset: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.phase == Some(Phase::Insulating))
        .collect();
    if let Some(first) = subset.first() {
        if subset.iter().any(|r| r.r_j != first.r_j) {
            return Err(Error::validation("fit_decay needs records at a single r_j"));
        }
    }
    let xs: Vec<f64> = subset.iter().map(|r| r.r_imp).collect();
    let ys: Vec<f64> = subset
        .iter()
        .map(|r| r.value(column).unwrap_or(f64::NAN))
        .collect();
    fit_series(&xs, &ys, kind)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub const RECORD_COLUMNS: [&str; 15] = [
    "r_imp",
    "r_j",
    "theta",
    "delta_10",
    "rel_anharmonicity",
    "m_phi_sq",
    "m_phi_sq_over_delta_r",
    "sigma0_sq",
    "sigma0_sq_predicted",
    "e_c_star_numeric",
    "e_c_star_tb",
    "i_p_max",
    "phase",
    "basis_dimension",
    "error",
];

pub const PHASE_COLUMNS: [&str; 6] = [
    "r_j",
    "el_over_ec",
    "i_p_max",
    "phase",
    "basis_dimension",
    "error",
];

fn csv_error(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// Write `#`-prefixed header lines, then a CSV table.
pub fn write_csv<W: Write>(
    mut out: W,
    metadata: &[String],
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> std::io::Result<()> {
    for line in metadata {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()
}

pub fn record_row(r: &SweepRecord) -> Vec<String> {
    vec![
        format!("{}", r.r_imp),
        format!("{}", r.r_j),
        format!("{}", r.theta),
        opt(r.delta_10),
        opt(r.rel_anharmonicity),
        opt(r.m_phi_sq),
        opt(r.m_phi_sq_over_delta_r),
        opt(r.sigma0_sq),
        opt(r.sigma0_sq_predicted),
        opt(r.e_c_star_numeric),
        opt(r.e_c_star_tb),
        opt(r.i_p_max),
        r.phase.map(|p| p.as_str().to_string()).unwrap_or_default(),
        r.basis_dimension.map(|n| n.to_string()).unwrap_or_default(),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn phase_row(p: &PhasePoint) -> Vec<String> {
    vec![
        format!("{}", p.r_j),
        format!("{:e}", p.el_over_ec),
        opt(p.i_p_max),
        p.phase.map(|p| p.as_str().to_string()).unwrap_or_default(),
        p.basis_dimension.map(|n| n.to_string()).unwrap_or_default(),
        p.error.clone().unwrap_or_default(),
    ]
}

pub fn write_records_csv<W: Write>(
    out: W,
    metadata: &[String],
    records: &[SweepRecord],
) -> std::io::Result<()> {
    write_csv(
        out,
        metadata,
        &RECORD_COLUMNS,
        records.iter().map(record_row),
    )
}
