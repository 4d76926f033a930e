//! Command-line front end.
//!
//! Every command reads its parameters from flags and/or a JSON run
//! configuration (flags win), validates them, and writes one CSV (or JSON)
//! document:
//!
//! ```text
//! # fluxonium <version>
//! # command <name>
//! # config <canonical JSON of the merged configuration>
//! # config_sha256 <hex digest of that JSON>
//! <header>
//! <rows>
//! # <annotation key> <JSON>
//! ```
//!
//! Exit codes: 0 success, 2 validation, 3 convergence, 4 I/O.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::bath::{self, BathFamily, BathParams, BudgetConstants};
use crate::bloch;
use crate::error::Error;
use crate::operators;
use crate::params::{self, CircuitParams};
use crate::spectrum::{self, ObservableOptions};
use crate::sweep::{self, Column, FitKind, SweepSpec};
use crate::units::{self, Dimension};

const COMMANDS: [&str; 7] = [
    "spectrum",
    "dispersion",
    "sweep",
    "phase-diagram",
    "tradeoff",
    "budget",
    "convert",
];

/// Charging energy used when a circuit is given only through ratios.
pub const DEFAULT_E_C: f64 = 1.0;
pub const DEFAULT_WAVEFUNCTION_POINTS: usize = 401;
pub const DEFAULT_DISPERSION_POINTS: usize = 101;

pub const SPECTRUM_COLUMNS: [&str; 17] = [
    "e_c",
    "e_l",
    "e_j",
    "theta",
    "r_imp",
    "r_j",
    "delta_10",
    "delta_21",
    "anharmonicity",
    "rel_anharmonicity",
    "m_phi_sq",
    "sigma0_sq",
    "sigma1_sq",
    "sigma2_sq",
    "i_p_max",
    "persistent_current",
    "basis_dimension",
];
pub const WAVEFUNCTION_COLUMNS: [&str; 3] = ["phi", "psi0", "potential"];
pub const DISPERSION_COLUMNS: [&str; 3] = ["n_tilde", "eps0", "eps1"];
pub const TRADEOFF_COLUMNS: [&str; 6] = [
    "r_j",
    "r_imp",
    "rel_anharmonicity",
    "m_phi_sq",
    "phase",
    "error",
];
pub const QUANTITY_COLUMNS: [&str; 3] = ["quantity", "value", "unit"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// A magnitude as typed by the user (`300MHz`, `1e4nH`, `pi/2`, `0.3`).
/// JSON configs may also give a bare number.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Quantity(String);

impl FromStr for Quantity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(Quantity(s.to_string()))
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(v) => Quantity(format!("{v}")),
            Raw::Text(s) => Quantity(s),
        })
    }
}

impl Quantity {
    fn read(&self, key: &str, dim: Dimension) -> Result<f64, CliError> {
        units::parse(&self.0, dim).map_err(|e| CliError::Validation(format!("{key}: {e}")))
    }
}

/// A grid axis: a JSON array, a comma list `1,2,5`, or `lin:a:b:n` /
/// `log:a:b:n` for `n` evenly (or log-evenly) spaced values from `a` to `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Text(String),
}

impl FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(Grid::Text(s.to_string()))
    }
}

impl Grid {
    pub fn values(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let bad = |why: &str| CliError::Validation(format!("{key}: {why}"));
        let text = match self {
            Grid::List(v) => return Ok(v.clone()),
            Grid::Text(t) => t.trim(),
        };
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() == 1 {
            return text
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(&format!("cannot read {x:?} as a number")))
                })
                .collect();
        }
        let [kind, a, b, n] = parts[..] else {
            return Err(bad("expected lin:start:stop:count or log:start:stop:count"));
        };
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("cannot read {x:?} as a number")))
        };
        let (a, b) = (num(a)?, num(b)?);
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| bad(&format!("cannot read {n:?} as a count")))?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let at = |i: usize| {
            if n == 1 {
                0.0
            } else {
                i as f64 / (n - 1) as f64
            }
        };
        match kind {
            "lin" => Ok((0..n).map(|i| a + (b - a) * at(i)).collect()),
            "log" => {
                if a <= 0.0 || b <= 0.0 {
                    return Err(bad("log grid needs positive end points"));
                }
                let (la, lb) = (a.log10(), b.log10());
                let mut v: Vec<f64> = (0..n).map(|i| 10f64.powf(la + (lb - la) * at(i))).collect();
                v[0] = a;
                if n > 1 {
                    v[n - 1] = b;
                }
                Ok(v)
            }
            other => Err(bad(&format!("unknown grid kind {other:?}"))),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Circuit parameters, given directly, as ratios to `E_C`, or physically.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct CircuitArgs {
    /// Charging energy E_C/h [GHz, or suffixed: MHz, kHz, Hz]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ec: Option<Quantity>,
    /// Inductive energy E_L/h
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el: Option<Quantity>,
    /// Josephson energy E_J/h
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ej: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ej_over_ec: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el_over_ec: Option<f64>,
    /// Shunt inductance [H, or nH, uH, pH]
    #[arg(long = "L", id = "L")]
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub inductance: Option<Quantity>,
    /// Capacitance [F, or fF, pF]
    #[arg(long = "C", id = "C")]
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub capacitance: Option<Quantity>,
    /// Junction critical current [A, or pA, nA]
    #[arg(long = "Ic", id = "Ic")]
    #[serde(rename = "Ic", skip_serializing_if = "Option::is_none")]
    pub critical_current: Option<Quantity>,
    /// Reduced external flux θ [rad, or pi/2 style]; default 0
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Quantity>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverArgs {
    /// Relative eigenvalue tolerance of the basis-doubling loop
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Largest basis dimension tried
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dimension: Option<usize>,
    /// Flux samples on [0, π] for the maximum persistent current
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_samples: Option<usize>,
}

impl SolverArgs {
    fn observable_options(&self) -> ObservableOptions {
        let mut o = ObservableOptions::default();
        if let Some(t) = self.tol {
            o.converge.tol = t;
        }
        if let Some(m) = self.max_dimension {
            o.converge.max_dimension = m;
        }
        if let Some(s) = self.theta_samples {
            o.theta_samples = s;
        }
        o
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpectrumArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub circuit: CircuitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Also emit a (phi, psi0, potential) table of the ground state
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub wavefunction: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavefunction_points: Option<usize>,
    /// Half-width of the wavefunction window; default |⟨φ⟩| + 6σ₀
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavefunction_phi_max: Option<f64>,
    /// Write the wavefunction table to its own file
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavefunction_output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct DispersionArgs {
    /// Charging energy E_C/h; default 1 GHz
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ec: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ej: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ej_over_ec: Option<f64>,
    /// Optional inductive energy, for the effective-oscillator frequency
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el_over_ec: Option<f64>,
    /// Quasicharge samples on [−0.5, 0.5]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridArgs {
    /// √(E_C/E_L) axis
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_imp: Option<Grid>,
    /// E_L/E_C axis, instead of r_imp
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el_over_ec: Option<Grid>,
    /// E_J/E_C axis
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_j: Option<Grid>,
    /// Flux at which spectra are evaluated; default pi/2
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Quantity>,
    /// Reference charging energy; default 1 GHz
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_c_ref: Option<Quantity>,
    /// Persistent-current threshold between the phases
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct BudgetArgs {
    /// Pure dephasing rate Γφ [s⁻¹, or Hz/kHz/MHz read as s⁻¹]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_phi: Option<Quantity>,
    /// |⟨1|φ|1⟩ − ⟨0|φ|0⟩|²
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_phi_sq: Option<f64>,
    /// Ohmic coupling α
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Bath temperature [K, or mK]; default 20 mK
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Quantity>,
    /// Spectral-density exponent s in J ∝ ω^s; only 1 is supported
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bath_exponent: Option<f64>,
    /// Set α from a measured rate, e.g. gamma=400kHz,mphi2=30
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<String>,
    /// Anharmonicity δ/h used for leakage
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Quantity>,
    /// Rabi rate Ω [s⁻¹]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rabi: Option<Quantity>,
    /// Gate time τ [s, or ns/us]; sets Ω = c_τ/τ
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_time: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_time_factor: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dephasing_factor: Option<f64>,
    /// Circuit from which M²φ and δ are computed when given
    #[command(flatten)]
    #[serde(flatten)]
    pub circuit: CircuitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConvertArgs {
    #[arg(long = "L", id = "L")]
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub inductance: Option<Quantity>,
    #[arg(long = "C", id = "C")]
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub capacitance: Option<Quantity>,
    #[arg(long = "Ic", id = "Ic")]
    #[serde(rename = "Ic", skip_serializing_if = "Option::is_none")]
    pub critical_current: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ec: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el: Option<Quantity>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ej: Option<Quantity>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Spectrum, matrix elements and persistent current at one circuit point
    Spectrum(SpectrumArgs),
    /// Bloch bands of the inductor-free circuit and the effective capacitance
    Dispersion(DispersionArgs),
    /// Full observable table over an (r_imp, r_j) grid
    Sweep(GridArgs),
    /// Persistent-current classification over an (r_j, E_L/E_C) grid
    PhaseDiagram(GridArgs),
    /// Relative anharmonicity against M²φ per r_j, with decay fits
    Tradeoff(GridArgs),
    /// Dephasing rate and gate error budget
    Budget(BudgetArgs),
    /// Convert between circuit elements and energies
    Convert(ConvertArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Spectrum(_) => "spectrum",
            Command::Dispersion(_) => "dispersion",
            Command::Sweep(_) => "sweep",
            Command::PhaseDiagram(_) => "phase-diagram",
            Command::Tradeoff(_) => "tradeoff",
            Command::Budget(_) => "budget",
            Command::Convert(_) => "convert",
        }
    }

    fn parameters(&self) -> Value {
        let v = match self {
            Command::Spectrum(a) => serde_json::to_value(a),
            Command::Dispersion(a) => serde_json::to_value(a),
            Command::Sweep(a) | Command::PhaseDiagram(a) | Command::Tradeoff(a) => {
                serde_json::to_value(a)
            }
            Command::Budget(a) => serde_json::to_value(a),
            Command::Convert(a) => serde_json::to_value(a),
        };
        v.expect("arguments serialize")
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "fluxonium",
    version,
    about = "Fluxonium spectra, sweeps and dephasing budgets"
)]
pub struct Cli {
    /// JSON run configuration; flags override its parameters
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (default stdout)
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default)]
    pub parameters: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(String),
    Io(String),
    Lib(Error),
    /// Some grid points failed; the table has already been written.
    PartialFailure {
        failed: Vec<Value>,
        total: usize,
        convergence: bool,
    },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 4,
            CliError::Lib(Error::Convergence { .. }) => 3,
            CliError::Lib(_) => 2,
            CliError::PartialFailure { convergence, .. } => {
                if *convergence {
                    3
                } else {
                    2
                }
            }
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, message, extra) = match self {
            CliError::Validation(m) => ("validation", m.clone(), Value::Null),
            CliError::Io(m) => ("io", m.clone(), Value::Null),
            CliError::Lib(e) => (e.kind(), e.to_string(), Value::Null),
            CliError::PartialFailure { failed, total, .. } => (
                "partial_failure",
                format!("{} of {total} grid points failed", failed.len()),
                Value::Array(failed.clone()),
            ),
        };
        let mut body = json!({ "kind": kind, "message": message, "exit_code": self.exit_code() });
        if !extra.is_null() {
            body["points"] = extra;
        }
        json!({ "error": body })
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// One named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub tables: Vec<Table>,
    /// Structured trailing comments, in order.
    pub annotations: Vec<(String, Value)>,
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// JSON mirror of a CSV cell.
fn cell_value(s: &str) -> Value {
    if s.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = s.parse::<i64>() {
        return json!(i);
    }
    if let Ok(x) = s.parse::<f64>() {
        if x.is_finite() {
            return json!(x);
        }
    }
    match s {
        "true" => json!(true),
        "false" => json!(false),
        _ => json!(s),
    }
}

struct Header {
    command: String,
    config_json: String,
    digest: String,
}

impl Header {
    fn new(config: &RunConfig) -> Self {
        let config_json = serde_json::to_string(config).expect("config serializes");
        let digest = Sha256::digest(config_json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Header {
            command: config.command.clone().unwrap_or_default(),
            config_json,
            digest,
        }
    }

    fn lines(&self) -> Vec<String> {
        vec![
            format!("fluxonium {}", env!("CARGO_PKG_VERSION")),
            format!("command {}", self.command),
            format!("config {}", self.config_json),
            format!("config_sha256 {}", self.digest),
        ]
    }
}

fn render_csv(
    header: &Header,
    tables: &[&Table],
    annotations: &[(String, Value)],
) -> Result<Vec<u8>, CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    let mut out = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let meta = if i == 0 {
            header.lines()
        } else {
            vec![format!("table {}", t.name)]
        };
        sweep::write_csv(&mut out, &meta, &t.header, t.rows.iter().cloned()).map_err(io)?;
    }
    for (key, value) in annotations {
        writeln!(out, "# {key} {value}").map_err(io)?;
    }
    Ok(out)
}

fn render_json(header: &Header, tables: &[&Table], annotations: &[(String, Value)]) -> Vec<u8> {
    let mut t = Map::new();
    for table in tables {
        let rows: Vec<Value> = table
            .rows
            .iter()
            .map(|r| {
                let obj: Map<String, Value> = table
                    .header
                    .iter()
                    .zip(r)
                    .map(|(k, v)| (k.to_string(), cell_value(v)))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        t.insert(
            table.name.clone(),
            json!({ "columns": table.header, "rows": rows }),
        );
    }
    let mut notes: BTreeMap<&str, Vec<&Value>> = BTreeMap::new();
    for (k, v) in annotations {
        notes.entry(k).or_default().push(v);
    }
    let config: Value = serde_json::from_str(&header.config_json).expect("round trip");
    let doc = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": header.command,
        "config": config,
        "config_sha256": header.digest,
        "tables": t,
        "annotations": notes,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("document serializes");
    s.push('\n');
    s.into_bytes()
}

fn render(
    format: Format,
    header: &Header,
    tables: &[&Table],
    annotations: &[(String, Value)],
) -> Result<Vec<u8>, CliError> {
    match format {
        Format::Csv => render_csv(header, tables, annotations),
        Format::Json => Ok(render_json(header, tables, annotations)),
    }
}

/// Exactly one of several ways to give a quantity.
fn one_of(what: &str, options: Vec<(&str, Option<f64>)>) -> Result<Option<f64>, CliError> {
    let given: Vec<(&str, f64)> = options
        .iter()
        .filter_map(|(k, v)| v.map(|v| (*k, v)))
        .collect();
    match given.len() {
        0 => Ok(None),
        1 => Ok(Some(given[0].1)),
        _ => {
            let keys: Vec<&str> = given.iter().map(|g| g.0).collect();
            Err(invalid(format!(
                "over-determined: {what} given by {}",
                keys.join(" and ")
            )))
        }
    }
}

fn required(what: &str, keys: &str, v: Option<f64>) -> Result<f64, CliError> {
    v.ok_or_else(|| invalid(format!("under-determined: {what} needs one of {keys}")))
}

fn read(q: &Option<Quantity>, key: &str, dim: Dimension) -> Result<Option<f64>, CliError> {
    q.as_ref().map(|q| q.read(key, dim)).transpose()
}

impl CircuitArgs {
    fn any(&self) -> bool {
        self.ec.is_some()
            || self.el.is_some()
            || self.ej.is_some()
            || self.ej_over_ec.is_some()
            || self.el_over_ec.is_some()
            || self.inductance.is_some()
            || self.capacitance.is_some()
            || self.critical_current.is_some()
            || self.theta.is_some()
    }

    pub fn resolve(&self) -> Result<CircuitParams, CliError> {
        let c = read(&self.capacitance, "C", Dimension::Capacitance)?;
        let l = read(&self.inductance, "L", Dimension::Inductance)?;
        let ic = read(&self.critical_current, "Ic", Dimension::Current)?;
        for (k, v) in [("C", c), ("L", l)] {
            if let Some(v) = v {
                if v <= 0.0 {
                    return Err(invalid(format!("{k} must be > 0, got {v}")));
                }
            }
        }
        let e_c = one_of(
            "E_C",
            vec![
                ("ec", read(&self.ec, "ec", Dimension::Energy)?),
                ("C", c.map(params::charging_energy_from_capacitance)),
            ],
        )?;
        let absolute = self.el.is_some() || self.ej.is_some() || l.is_some() || ic.is_some();
        let e_c = match e_c {
            Some(v) => v,
            None if !absolute => DEFAULT_E_C,
            None => return Err(invalid("under-determined: E_C needs one of ec, C")),
        };
        let e_l = one_of(
            "E_L",
            vec![
                ("el", read(&self.el, "el", Dimension::Energy)?),
                ("L", l.map(params::inductive_energy_from_inductance)),
                ("el_over_ec", self.el_over_ec.map(|r| r * e_c)),
            ],
        )?;
        let e_l = required("E_L", "el, L, el_over_ec", e_l)?;
        let e_j = one_of(
            "E_J",
            vec![
                ("ej", read(&self.ej, "ej", Dimension::Energy)?),
                ("Ic", ic.map(params::josephson_energy_from_critical_current)),
                ("ej_over_ec", self.ej_over_ec.map(|r| r * e_c)),
            ],
        )?;
        let e_j = required("E_J", "ej, Ic, ej_over_ec", e_j)?;
        let theta = read(&self.theta, "theta", Dimension::Angle)?.unwrap_or(0.0);
        Ok(CircuitParams::new(e_c, e_l, e_j, theta).map_err(Error::from)?)
    }
}

fn spectrum_row(p: &CircuitParams, s: &spectrum::SpectralResult, ip: f64) -> Vec<String> {
    let r = p.ratios();
    vec![
        num(p.e_c()),
        num(p.e_l()),
        num(p.e_j()),
        num(p.theta()),
        num(r.r_imp),
        num(r.r_j),
        num(s.delta_10),
        num(s.delta_21),
        num(s.anharmonicity),
        num(s.rel_anharmonicity),
        num(s.m_phi_sq),
        num(s.variance[0]),
        num(s.variance[1]),
        num(s.variance[2]),
        num(s.persistent_current_max),
        num(ip),
        s.basis_dimension.to_string(),
    ]
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<Report, CliError> {
    let p = a.circuit.resolve()?;
    let points = a.wavefunction_points.unwrap_or(DEFAULT_WAVEFUNCTION_POINTS);
    if a.wavefunction && points < 2 {
        return Err(invalid(format!(
            "wavefunction_points must be >= 2, got {points}"
        )));
    }
    if let Some(w) = a.wavefunction_phi_max {
        if !(w.is_finite() && w > 0.0) {
            return Err(invalid(format!(
                "wavefunction_phi_max must be > 0, got {w}"
            )));
        }
    }
    let opts = a.solver.observable_options();
    let s = spectrum::observables_with(&p, &opts)?;
    let ground = operators::converge_with(&p, 1, &opts.converge)?;
    let ip = spectrum::persistent_current_in(&ground.operators, &ground.solution);
    let mut report = Report {
        tables: vec![Table {
            name: "spectrum".into(),
            header: SPECTRUM_COLUMNS.to_vec(),
            rows: vec![spectrum_row(&p, &s, ip)],
        }],
        annotations: Vec::new(),
    };
    if a.wavefunction {
        let basis = ground.operators.basis();
        let psi = ground.solution.vector(0);
        let mean = spectrum::matrix_element(&ground.solution, &ground.operators, 0, 0)?;
        let half = a
            .wavefunction_phi_max
            .unwrap_or(mean.abs() + 6.0 * s.variance[0].sqrt());
        let rows = (0..points)
            .map(|i| {
                let phi = -half + 2.0 * half * i as f64 / (points - 1) as f64;
                let v = p.e_l() * phi * phi - p.e_j() * (phi - p.theta()).cos();
                vec![num(phi), num(basis.wavefunction(psi, phi)), num(v)]
            })
            .collect();
        report.tables.push(Table {
            name: "wavefunction".into(),
            header: WAVEFUNCTION_COLUMNS.to_vec(),
            rows,
        });
    }
    Ok(report)
}

fn cmd_dispersion(a: &DispersionArgs) -> Result<Report, CliError> {
    let e_c = read(&a.ec, "ec", Dimension::Energy)?.unwrap_or(DEFAULT_E_C);
    let e_j = one_of(
        "E_J",
        vec![
            ("ej", read(&a.ej, "ej", Dimension::Energy)?),
            ("ej_over_ec", a.ej_over_ec.map(|r| r * e_c)),
        ],
    )?;
    let e_j = required("E_J", "ej, ej_over_ec", e_j)?;
    let e_l = one_of(
        "E_L",
        vec![
            ("el", read(&a.el, "el", Dimension::Energy)?),
            ("el_over_ec", a.el_over_ec.map(|r| r * e_c)),
        ],
    )?;
    let points = a.points.unwrap_or(DEFAULT_DISPERSION_POINTS);
    if !(e_c.is_finite() && e_c > 0.0) {
        return Err(invalid(format!("ec must be > 0, got {e_c}")));
    }
    if !(e_j.is_finite() && e_j >= 0.0) {
        return Err(invalid(format!("E_J must be >= 0, got {e_j}")));
    }
    if let Some(l) = e_l {
        if !(l.is_finite() && l > 0.0) {
            return Err(invalid(format!("E_L must be > 0, got {l}")));
        }
    }
    let d = bloch::dispersion(e_c, e_j, e_l, points)?;
    let rows = d
        .quasicharge_grid
        .iter()
        .enumerate()
        .map(|(i, &x)| vec![format!("{x}"), num(d.bands[0][i]), num(d.bands[1][i])])
        .collect();
    let summary = json!({
        "e_c": e_c,
        "e_j": e_j,
        "e_l": e_l,
        "e_c_star_numeric": d.c_star_numeric,
        "e_c_star_tb": d.c_star_tb,
        "t_instanton": d.t_instanton,
        "omega_star": d.omega_star,
        "tb_relative_difference": d.c_star_tb.map(|tb| (d.c_star_numeric - tb).abs() / tb),
    });
    Ok(Report {
        tables: vec![Table {
            name: "dispersion".into(),
            header: DISPERSION_COLUMNS.to_vec(),
            rows,
        }],
        annotations: vec![("summary".into(), summary)],
    })
}

impl GridArgs {
    pub fn spec(&self) -> Result<SweepSpec, CliError> {
        let r_imp = match (&self.r_imp, &self.el_over_ec) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "over-determined: grid axis given by both r_imp and el_over_ec",
                ))
            }
            (None, None) => {
                return Err(invalid("under-determined: grid needs r_imp or el_over_ec"))
            }
            (Some(g), None) => g.values("r_imp")?,
            (None, Some(g)) => g
                .values("el_over_ec")?
                .into_iter()
                .map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { f64::NAN })
                .collect(),
        };
        let r_j = self
            .r_j
            .as_ref()
            .ok_or_else(|| invalid("under-determined: grid needs r_j"))?
            .values("r_j")?;
        let mut spec = SweepSpec::new(r_imp, r_j);
        if let Some(t) = read(&self.theta, "theta", Dimension::Angle)? {
            spec.theta = t;
        }
        if let Some(e) = read(&self.e_c_ref, "e_c_ref", Dimension::Energy)? {
            spec.e_c_ref = e;
        }
        if let Some(t) = self.threshold {
            spec.threshold = t;
        }
        if let Some(t) = self.solver.tol {
            spec.tol = t;
        }
        if let Some(m) = self.solver.max_dimension {
            spec.max_dimension = m;
        }
        if let Some(s) = self.solver.theta_samples {
            spec.theta_samples = s;
        }
        Ok(spec.validated()?)
    }
}

fn failure(r_imp: f64, r_j: f64, err: &str) -> Value {
    json!({ "r_imp": r_imp, "r_j": r_j, "error": err })
}

fn partial(failed: Vec<Value>, total: usize) -> Option<CliError> {
    if failed.is_empty() {
        return None;
    }
    let convergence = failed.iter().any(|f| {
        f["error"]
            .as_str()
            .is_some_and(|e| e.starts_with("convergence"))
    });
    Some(CliError::PartialFailure {
        failed,
        total,
        convergence,
    })
}

fn sweep_failures(records: &[sweep::SweepRecord]) -> Option<CliError> {
    let failed = records
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| failure(r.r_imp, r.r_j, e)))
        .collect();
    partial(failed, records.len())
}

fn cmd_sweep(a: &GridArgs) -> Result<(Report, Option<CliError>), CliError> {
    let records = sweep::run(&a.spec()?)?;
    let report = Report {
        tables: vec![Table {
            name: "sweep".into(),
            header: sweep::RECORD_COLUMNS.to_vec(),
            rows: records.iter().map(sweep::record_row).collect(),
        }],
        annotations: Vec::new(),
    };
    Ok((report, sweep_failures(&records)))
}

fn cmd_phase_diagram(a: &GridArgs) -> Result<(Report, Option<CliError>), CliError> {
    let points = sweep::run_phase_diagram(&a.spec()?)?;
    let rows = sweep::phase_rows(&points);
    let mut annotations: Vec<(String, Value)> = rows
        .iter()
        .rev()
        .map(|r| {
            (
                "row".to_string(),
                serde_json::to_value(r).expect("row serializes"),
            )
        })
        .collect();
    annotations.push((
        "boundary".into(),
        json!({ "monotone": sweep::boundary_is_monotone(&rows) }),
    ));
    let failed = points
        .iter()
        .filter_map(|p| p.error.as_ref().map(|e| failure(p.r_imp, p.r_j, e)))
        .collect();
    let report = Report {
        tables: vec![Table {
            name: "phase-diagram".into(),
            header: sweep::PHASE_COLUMNS.to_vec(),
            rows: points.iter().map(sweep::phase_row).collect(),
        }],
        annotations,
    };
    Ok((report, partial(failed, points.len())))
}

fn fit_note(r_j: f64, records: &[sweep::SweepRecord], column: Column, kind: FitKind) -> Value {
    let mut v = match sweep::fit_decay(records, column, kind) {
        Ok(f) => serde_json::to_value(f).expect("fit serializes"),
        Err(e) => json!({ "kind": kind, "error": format!("{}: {}", e.kind(), e) }),
    };
    v["r_j"] = json!(r_j);
    v["column"] = json!(column.name());
    v
}

fn cmd_tradeoff(a: &GridArgs) -> Result<(Report, Option<CliError>), CliError> {
    let spec = a.spec()?;
    let records = sweep::run(&spec)?;
    let rows = records
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.r_j),
                format!("{}", r.r_imp),
                opt_num(r.rel_anharmonicity),
                opt_num(r.m_phi_sq),
                r.phase.map(|p| p.as_str().to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let mut annotations = Vec::new();
    for &r_j in &spec.r_j_grid {
        let subset: Vec<sweep::SweepRecord> =
            records.iter().filter(|r| r.r_j == r_j).cloned().collect();
        annotations.push((
            "fit".into(),
            fit_note(r_j, &subset, Column::MPhiSq, FitKind::ExpDecay),
        ));
        annotations.push((
            "fit".into(),
            fit_note(r_j, &subset, Column::AbsRelAnharmonicity, FitKind::PowerLaw),
        ));
    }
    let report = Report {
        tables: vec![Table {
            name: "tradeoff".into(),
            header: TRADEOFF_COLUMNS.to_vec(),
            rows,
        }],
        annotations,
    };
    Ok((report, sweep_failures(&records)))
}

struct Calibration {
    gamma: f64,
    m_phi_sq: f64,
}

fn parse_calibration(s: &str) -> Result<Calibration, CliError> {
    let mut gamma = None;
    let mut m = None;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| invalid(format!("calibrate: expected key=value, got {part:?}")))?;
        match k.trim() {
            "gamma" => {
                gamma = Some(Quantity(v.trim().into()).read("calibrate.gamma", Dimension::Rate)?)
            }
            "mphi2" => {
                m = Some(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| invalid(format!("calibrate.mphi2: cannot read {v:?}")))?,
                )
            }
            other => {
                return Err(invalid(format!(
                    "calibrate: unknown key {other:?} (expected gamma, mphi2)"
                )))
            }
        }
    }
    match (gamma, m) {
        (Some(gamma), Some(m_phi_sq)) => Ok(Calibration { gamma, m_phi_sq }),
        _ => Err(invalid("calibrate needs both gamma and mphi2")),
    }
}

fn quantity_row(name: &str, value: Option<f64>, unit: &str) -> Vec<String> {
    vec![name.to_string(), opt_num(value), unit.to_string()]
}

fn cmd_budget(a: &BudgetArgs) -> Result<Report, CliError> {
    let temperature = read(&a.temperature, "temperature", Dimension::Temperature)?
        .unwrap_or(bath::DEFAULT_TEMPERATURE);
    let family = match a.bath_exponent {
        None | Some(1.0) => BathFamily::Ohmic,
        Some(exponent) => BathFamily::PowerLaw { exponent },
    };
    let calibration = a.calibrate.as_deref().map(parse_calibration).transpose()?;
    let gamma_given = read(&a.gamma_phi, "gamma_phi", Dimension::Rate)?;
    if gamma_given.is_some() {
        for (k, present) in [
            ("m_phi_sq", a.m_phi_sq.is_some()),
            ("alpha", a.alpha.is_some()),
            ("calibrate", calibration.is_some()),
        ] {
            if present {
                return Err(invalid(format!(
                    "over-determined: gamma_phi given together with {k}"
                )));
            }
        }
    }
    if a.alpha.is_some() && calibration.is_some() {
        return Err(invalid(
            "over-determined: alpha given by both alpha and calibrate",
        ));
    }
    let delta_given = read(&a.delta, "delta", Dimension::Energy)?;
    let rabi_given = read(&a.rabi, "rabi", Dimension::Rate)?;
    let tau_given = read(&a.gate_time, "gate_time", Dimension::Time)?;
    let constants = BudgetConstants {
        gate_time_factor: a.gate_time_factor.unwrap_or(1.0),
        dephasing_factor: a.dephasing_factor.unwrap_or(1.0),
    };
    if rabi_given.is_some() && tau_given.is_some() {
        return Err(invalid(
            "over-determined: drive given by both rabi and gate_time",
        ));
    }
    if let Some(t) = tau_given {
        if !(t > 0.0) {
            return Err(invalid(format!("gate_time must be > 0, got {t}")));
        }
    }
    let rabi = required(
        "the drive",
        "rabi, gate_time",
        rabi_given.or(tau_given.map(|t| constants.gate_time_factor / t)),
    )?;

    // validate everything that can be checked before touching the solver
    let circuit = if a.circuit.any() {
        if a.m_phi_sq.is_some() || delta_given.is_some() {
            let which = if a.m_phi_sq.is_some() {
                "m_phi_sq"
            } else {
                "delta"
            };
            return Err(invalid(format!(
                "over-determined: {which} given together with a circuit"
            )));
        }
        Some(a.circuit.resolve()?)
    } else {
        None
    };
    if circuit.is_none() {
        if delta_given.is_none() {
            return Err(invalid("under-determined: delta needs delta or a circuit"));
        }
        if gamma_given.is_none() && a.m_phi_sq.is_none() {
            return Err(invalid("under-determined: gamma_phi needs gamma_phi, or m_phi_sq with alpha/calibrate, or a circuit"));
        }
    }
    if gamma_given.is_none() && a.alpha.is_none() && calibration.is_none() {
        return Err(invalid(
            "under-determined: alpha needs alpha or calibrate (or give gamma_phi)",
        ));
    }
    let alpha = match (&calibration, a.alpha) {
        (Some(c), None) => Some(bath::calibrate_alpha(c.gamma, c.m_phi_sq, temperature)?),
        (None, a) => a,
        (Some(_), Some(_)) => unreachable!(),
    };

    let (m_phi_sq, delta) = match circuit {
        Some(p) => {
            let s = spectrum::observables_with(&p, &a.solver.observable_options())?;
            (Some(s.m_phi_sq), s.anharmonicity.abs())
        }
        None => (a.m_phi_sq, delta_given.expect("checked")),
    };
    let gamma_phi = match gamma_given {
        Some(g) => g,
        None => {
            let b = BathParams::new(family, alpha.expect("checked"), temperature)?;
            bath::pure_dephasing_rate(m_phi_sq.expect("checked"), &b)?
        }
    };
    let b = bath::error_budget_with(gamma_phi, delta, rabi, &constants)?;
    let rows = vec![
        quantity_row("m_phi_sq", m_phi_sq, ""),
        quantity_row("alpha", alpha, ""),
        quantity_row("temperature", Some(temperature), "K"),
        quantity_row("gamma_phi", Some(b.gamma_phi), "s^-1"),
        quantity_row("delta", Some(delta), "GHz"),
        quantity_row("rabi", Some(b.rabi), "s^-1"),
        quantity_row("gate_time", Some(b.gate_time), "s"),
        quantity_row("p_leak", Some(b.p_leak), ""),
        quantity_row("p_dephase", Some(b.p_dephase), ""),
        vec![
            "out_of_regime".into(),
            b.out_of_regime.to_string(),
            String::new(),
        ],
    ];
    Ok(Report {
        tables: vec![Table {
            name: "budget".into(),
            header: QUANTITY_COLUMNS.to_vec(),
            rows,
        }],
        annotations: Vec::new(),
    })
}

fn cmd_convert(a: &ConvertArgs) -> Result<Report, CliError> {
    let pos = |v: Option<f64>, k: &str| -> Result<Option<f64>, CliError> {
        match v {
            Some(x) if !(x > 0.0) => Err(invalid(format!("{k} must be > 0, got {x}"))),
            other => Ok(other),
        }
    };
    let c = pos(read(&a.capacitance, "C", Dimension::Capacitance)?, "C")?;
    let l = pos(read(&a.inductance, "L", Dimension::Inductance)?, "L")?;
    let ic = pos(read(&a.critical_current, "Ic", Dimension::Current)?, "Ic")?;
    let ec = pos(read(&a.ec, "ec", Dimension::Energy)?, "ec")?;
    let el = pos(read(&a.el, "el", Dimension::Energy)?, "el")?;
    let ej = pos(read(&a.ej, "ej", Dimension::Energy)?, "ej")?;
    if [c, l, ic, ec, el, ej].iter().all(Option::is_none) {
        return Err(invalid(
            "under-determined: give at least one of L, C, Ic, ec, el, ej",
        ));
    }
    let e_c = one_of(
        "E_C",
        vec![
            ("C", c.map(params::charging_energy_from_capacitance)),
            ("ec", ec),
        ],
    )?;
    let e_l = one_of(
        "E_L",
        vec![
            ("L", l.map(params::inductive_energy_from_inductance)),
            ("el", el),
        ],
    )?;
    let e_j = one_of(
        "E_J",
        vec![
            ("Ic", ic.map(params::josephson_energy_from_critical_current)),
            ("ej", ej),
        ],
    )?;
    let c = c.or(e_c.map(params::capacitance_from_charging_energy));
    let l = l.or(e_l.map(params::inductance_from_inductive_energy));
    let ic = ic.or(e_j.map(params::critical_current_from_josephson_energy));
    let both = |a: Option<f64>, b: Option<f64>| a.zip(b);
    let r_imp = both(e_c, e_l).map(|(c, l)| (c / l).sqrt());
    let z_over_rq = r_imp.map(|r| r / std::f64::consts::TAU);
    let rows = vec![
        quantity_row("C", c, "F"),
        quantity_row("ec", e_c, "GHz"),
        quantity_row("L", l, "H"),
        quantity_row("el", e_l, "GHz"),
        quantity_row("Ic", ic, "A"),
        quantity_row("ej", e_j, "GHz"),
        quantity_row("r_imp", r_imp, ""),
        quantity_row("el_over_ec", both(e_c, e_l).map(|(c, l)| l / c), ""),
        quantity_row("r_j", both(e_c, e_j).map(|(c, j)| j / c), ""),
        quantity_row(
            "phi_zpf",
            both(e_c, e_l).map(|(c, l)| (c / (4.0 * l)).powf(0.25)),
            "",
        ),
        quantity_row(
            "z0",
            z_over_rq.map(|z| z * params::constants::RESISTANCE_QUANTUM),
            "Ohm",
        ),
        quantity_row("z0_over_rq", z_over_rq, ""),
        quantity_row(
            "plasma_frequency",
            both(e_c, e_j).map(|(c, j)| (8.0 * c * j).sqrt()),
            "GHz",
        ),
    ];
    Ok(Report {
        tables: vec![Table {
            name: "convert".into(),
            header: QUANTITY_COLUMNS.to_vec(),
            rows,
        }],
        annotations: Vec::new(),
    })
}

fn allowed_keys(command: &str) -> Vec<String> {
    let cli = Cli::command();
    let sub = cli.find_subcommand(command).expect("known command");
    sub.get_arguments()
        .filter(|a| !a.is_global_set())
        .map(|a| a.get_id().to_string())
        .filter(|id| !matches!(id.as_str(), "help" | "config" | "output" | "format"))
        .collect()
}

fn parse_command(name: &str, params: Map<String, Value>) -> Result<Command, CliError> {
    let allowed = allowed_keys(name);
    if let Some(k) = params.keys().find(|k| !allowed.contains(k)) {
        return Err(invalid(format!(
            "unknown key {k:?} for command {name}; accepted keys: {}",
            allowed.join(", ")
        )));
    }
    let v = Value::Object(params);
    let bad = |e: serde_json::Error| invalid(format!("parameters for {name}: {e}"));
    Ok(match name {
        "spectrum" => Command::Spectrum(serde_json::from_value(v).map_err(bad)?),
        "dispersion" => Command::Dispersion(serde_json::from_value(v).map_err(bad)?),
        "sweep" => Command::Sweep(serde_json::from_value(v).map_err(bad)?),
        "phase-diagram" => Command::PhaseDiagram(serde_json::from_value(v).map_err(bad)?),
        "tradeoff" => Command::Tradeoff(serde_json::from_value(v).map_err(bad)?),
        "budget" => Command::Budget(serde_json::from_value(v).map_err(bad)?),
        "convert" => Command::Convert(serde_json::from_value(v).map_err(bad)?),
        other => {
            return Err(invalid(format!(
                "unknown command {other:?}; expected one of {}",
                COMMANDS.join(", ")
            )))
        }
    })
}

/// Fully resolved invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    pub output: Option<PathBuf>,
    pub format: Format,
}

/// Merge flags over the optional config file and validate keys.
pub fn resolve(cli: Cli) -> Result<Invocation, CliError> {
    let file = match &cli.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| invalid(format!("config {}: {e}", path.display())))?
        }
    };
    let name = match (&cli.command, &file.command) {
        (Some(c), Some(f)) if c.name() != f => {
            return Err(invalid(format!(
                "command {} on the command line but {f} in the config file",
                c.name()
            )))
        }
        (Some(c), _) => c.name().to_string(),
        (None, Some(f)) => f.clone(),
        (None, None) => {
            return Err(invalid(format!(
                "no command given; expected one of {}",
                COMMANDS.join(", ")
            )))
        }
    };
    if !COMMANDS.contains(&name.as_str()) {
        return Err(invalid(format!(
            "unknown command {name:?}; expected one of {}",
            COMMANDS.join(", ")
        )));
    }
    let mut params = file.parameters.clone();
    if let Some(c) = &cli.command {
        if let Value::Object(flags) = c.parameters() {
            params.extend(flags);
        }
    }
    let command = parse_command(&name, params.clone())?;
    let format = cli.format.or(file.format).unwrap_or_default();
    Ok(Invocation {
        command,
        config: RunConfig {
            command: Some(name),
            parameters: params,
            output_path: None,
            format: Some(format),
        },
        output: cli.output.or(file.output_path),
        format,
    })
}

fn write_out(path: Option<&PathBuf>, bytes: &[u8], stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display()))),
        None => stdout
            .write_all(bytes)
            .and_then(|_| stdout.flush())
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Run the resolved command, writing its document. A partial failure is
/// returned only after the table has been written.
pub fn execute(inv: &Invocation, stdout: &mut dyn Write) -> Result<(), CliError> {
    let header = Header::new(&inv.config);
    let (report, deferred) = match &inv.command {
        Command::Spectrum(a) => (cmd_spectrum(a)?, None),
        Command::Dispersion(a) => (cmd_dispersion(a)?, None),
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::PhaseDiagram(a) => cmd_phase_diagram(a)?,
        Command::Tradeoff(a) => cmd_tradeoff(a)?,
        Command::Budget(a) => (cmd_budget(a)?, None),
        Command::Convert(a) => (cmd_convert(a)?, None),
    };
    let split = match &inv.command {
        Command::Spectrum(a) => a.wavefunction_output.clone(),
        _ => None,
    };
    let tables: Vec<&Table> = report.tables.iter().collect();
    match split {
        Some(path) if tables.len() > 1 => {
            let main = render(inv.format, &header, &tables[..1], &report.annotations)?;
            write_out(inv.output.as_ref(), &main, stdout)?;
            let wf = render(inv.format, &header, &tables[1..], &[])?;
            write_out(Some(&path), &wf, stdout)?;
        }
        _ => {
            let bytes = render(inv.format, &header, &tables, &report.annotations)?;
            write_out(inv.output.as_ref(), &bytes, stdout)?;
        }
    }
    deferred.map_or(Ok(()), Err)
}

/// Entry point with injectable streams; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let err =
                invalid(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""));
            let _ = writeln!(stderr, "{}", err.to_json());
            return err.exit_code();
        }
    };
    let outcome = resolve(cli).and_then(|inv| execute(&inv, stdout));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.exit_code()
        }
    }
}
