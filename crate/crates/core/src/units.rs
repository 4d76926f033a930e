//! Magnitudes with case-sensitive unit suffixes, e.g. `300MHz`, `1e4nH`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    /// Energies as `E/h`; bare numbers are GHz.
    Energy,
    Inductance,
    Capacitance,
    Current,
    Temperature,
    /// Rates in s⁻¹; suffixes `Hz`, `kHz`, ... scale without a 2π.
    Rate,
    Time,
    /// Radians, or multiples of π written `pi/2`, `3pi/4`, `0.5pi`.
    Angle,
}

impl Dimension {
    fn units(&self) -> &'static [(&'static str, f64)] {
        match self {
            Dimension::Energy => &[("GHz", 1.0), ("MHz", 1e-3), ("kHz", 1e-6), ("Hz", 1e-9)],
            Dimension::Inductance => &[
                ("nH", 1e-9),
                ("uH", 1e-6),
                ("pH", 1e-12),
                ("mH", 1e-3),
                ("H", 1.0),
            ],
            Dimension::Capacitance => &[
                ("fF", 1e-15),
                ("pF", 1e-12),
                ("nF", 1e-9),
                ("aF", 1e-18),
                ("F", 1.0),
            ],
            Dimension::Current => &[
                ("pA", 1e-12),
                ("nA", 1e-9),
                ("uA", 1e-6),
                ("mA", 1e-3),
                ("A", 1.0),
            ],
            Dimension::Temperature => &[("mK", 1e-3), ("uK", 1e-6), ("K", 1.0)],
            Dimension::Rate => &[("GHz", 1e9), ("MHz", 1e6), ("kHz", 1e3), ("Hz", 1.0)],
            Dimension::Time => &[
                ("ps", 1e-12),
                ("ns", 1e-9),
                ("us", 1e-6),
                ("ms", 1e-3),
                ("s", 1.0),
            ],
            Dimension::Angle => &[],
        }
    }

    /// Unit a bare number is read in.
    pub fn default_unit(&self) -> &'static str {
        match self {
            Dimension::Energy => "GHz",
            Dimension::Inductance => "H",
            Dimension::Capacitance => "F",
            Dimension::Current => "A",
            Dimension::Temperature => "K",
            Dimension::Rate => "Hz",
            Dimension::Time => "s",
            Dimension::Angle => "rad",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitError {
    pub input: String,
    pub expected: Dimension,
}

impl fmt::Display for UnitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.expected == Dimension::Angle {
            return write!(
                f,
                "cannot read {:?} as an angle: expected radians or a multiple of pi",
                self.input
            );
        }
        let units: Vec<&str> = self.expected.units().iter().map(|u| u.0).collect();
        write!(
            f,
            "cannot read {:?} as {:?}: expected a number with optional suffix {}",
            self.input,
            self.expected,
            units.join("/")
        )
    }
}

impl std::error::Error for UnitError {}

/// Parse into the dimension's base unit (GHz for energies, SI otherwise).
pub fn parse(input: &str, dim: Dimension) -> Result<f64, UnitError> {
    let err = || UnitError {
        input: input.to_string(),
        expected: dim,
    };
    let s = input.trim();
    if dim == Dimension::Angle {
        return parse_angle(s).ok_or_else(err);
    }
    let mut number = s;
    let mut factor = 1.0;
    for (suffix, f) in dim.units() {
        if let Some(head) = s.strip_suffix(suffix) {
            // `1e4nH` must not be read as `1e4n` + `H`
            if head.ends_with(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
                continue;
            }
            number = head.trim_end();
            factor = *f;
            break;
        }
    }
    let v: f64 = number.parse().map_err(|_| err())?;
    if !v.is_finite() {
        return Err(err());
    }
    Ok(v * factor)
}

fn parse_angle(s: &str) -> Option<f64> {
    let finite = |v: f64| v.is_finite().then_some(v);
    let Some(at) = s.find("pi") else {
        return s.parse().ok().and_then(finite);
    };
    let coef = match s[..at].trim_end_matches('*').trim() {
        "" | "+" => 1.0,
        "-" => -1.0,
        c => c.parse().ok()?,
    };
    let denom = match s[at + 2..].trim() {
        "" => 1.0,
        d => d.strip_prefix('/')?.trim().parse().ok()?,
    };
    finite(coef * std::f64::consts::PI / denom)
}
