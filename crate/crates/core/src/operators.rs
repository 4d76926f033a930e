//! Truncated operator matrices for the fluxonium Hamiltonian
//! `H = E_C n² + E_L φ² − E_J cos(φ − θ)` and a verified eigensolver.
//!
//! Two representations are provided. The harmonic-oscillator basis is the
//! production path; the real-space grid exists as an independent oracle.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SymTridiagonal};
use crate::params::CircuitParams;

/// Largest oscillator-basis dimension `converge` will try.
pub const MAX_DIMENSION: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis {
    /// Fock states of an oscillator with `φ = length·(a + a†)`.
    HarmonicOscillator { dimension: usize, length: f64 },
    /// Uniform grid on `(−phi_max, phi_max)` with Dirichlet walls.
    Grid { points: usize, phi_max: f64 },
}

impl Basis {
    pub fn dimension(&self) -> usize {
        match *self {
            Basis::HarmonicOscillator { dimension, .. } => dimension,
            Basis::Grid { points, .. } => points,
        }
    }

    /// Position-space amplitude `ψ(φ)` of the state with basis coefficients
    /// `coeffs`, normalized so that `∫|ψ|² dφ = Σ c²`.
    pub fn wavefunction(&self, coeffs: &[f64], phi: f64) -> f64 {
        match *self {
            Basis::HarmonicOscillator { length, .. } => {
                hermite_sum(coeffs, phi / (length * SQRT_2)) / (length * SQRT_2).sqrt()
            }
            Basis::Grid { points, phi_max } => {
                let h = 2.0 * phi_max / (points + 1) as f64;
                // nodes at −phi_max + (j+1)h, zero on both walls
                let u = (phi + phi_max) / h;
                if !(0.0..=(points + 1) as f64).contains(&u) {
                    return 0.0;
                }
                let j = (u.floor() as usize).min(points);
                let at = |i: usize| {
                    if i == 0 || i > points {
                        0.0
                    } else {
                        coeffs[i - 1]
                    }
                };
                let t = u - j as f64;
                ((1.0 - t) * at(j) + t * at(j + 1)) / h.sqrt()
            }
        }
    }
}

/// `Σ c_n h_n(x)` over normalized Hermite functions. The recurrence is run on
/// rescaled values so that `e^{−x²/2}` never underflows on its own.
fn hermite_sum(coeffs: &[f64], x: f64) -> f64 {
    const BIG: f64 = 1e150;
    let mut log_scale = -0.5 * x * x - 0.25 * PI.ln();
    let (mut prev, mut cur) = (0.0, 1.0);
    let mut sum = 0.0;
    for (n, &c) in coeffs.iter().enumerate() {
        sum += c * cur;
        let nf = n as f64;
        let next = (2.0 / (nf + 1.0)).sqrt() * x * cur - (nf / (nf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
        if cur.abs() > BIG {
            prev /= BIG;
            cur /= BIG;
            sum /= BIG;
            log_scale += BIG.ln();
        }
    }
    if sum == 0.0 {
        return 0.0;
    }
    sum.signum() * (sum.abs().ln() + log_scale).exp()
}

/// A real matrix in whichever storage suits its structure.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Dense(DMatrix<f64>),
    Diagonal(Vec<f64>),
    Tridiagonal(SymTridiagonal),
    /// Antisymmetric tridiagonal with `upper[i] = A[i][i+1] = −A[i+1][i]`.
    AntisymmetricTridiagonal(Vec<f64>),
}

impl Operator {
    pub fn dim(&self) -> usize {
        match self {
            Operator::Dense(m) => m.nrows(),
            Operator::Diagonal(d) => d.len(),
            Operator::Tridiagonal(t) => t.dim(),
            Operator::AntisymmetricTridiagonal(u) => u.len() + 1,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Operator::Dense(m) => (m * DVector::from_column_slice(x)).as_slice().to_vec(),
            Operator::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            Operator::Tridiagonal(t) => t.mul_vec(x),
            Operator::AntisymmetricTridiagonal(u) => {
                let mut y = vec![0.0; x.len()];
                for (i, ui) in u.iter().enumerate() {
                    y[i] += ui * x[i + 1];
                    y[i + 1] -= ui * x[i];
                }
                y
            }
        }
    }

    /// `uᵀ · O · v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        linalg::dot(u, &self.apply(v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        match self {
            Operator::Dense(m) => m.clone(),
            Operator::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Operator::Tridiagonal(t) => {
                let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(&t.diag));
                for (i, e) in t.off.iter().enumerate() {
                    m[(i + 1, i)] = *e;
                    m[(i, i + 1)] = *e;
                }
                m
            }
            Operator::AntisymmetricTridiagonal(u) => {
                let mut m = DMatrix::zeros(n, n);
                for (i, e) in u.iter().enumerate() {
                    m[(i, i + 1)] = *e;
                    m[(i + 1, i)] = -*e;
                }
                m
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Operator::Dense(m) => m.norm(),
            Operator::Diagonal(d) => d.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Operator::Tridiagonal(t) => {
                let d: f64 = t.diag.iter().map(|x| x * x).sum();
                let o: f64 = t.off.iter().map(|x| x * x).sum();
                (d + 2.0 * o).sqrt()
            }
            Operator::AntisymmetricTridiagonal(u) => {
                (2.0 * u.iter().map(|x| x * x).sum::<f64>()).sqrt()
            }
        }
    }
}

/// Symmetric pentadiagonal part `E_C n² + E_L φ²`, stored by bands.
#[derive(Debug, Clone, PartialEq)]
struct Banded {
    d0: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Banded {
    fn add_to(&self, m: &mut DMatrix<f64>) {
        for (i, x) in self.d0.iter().enumerate() {
            m[(i, i)] += x;
        }
        for (i, x) in self.d1.iter().enumerate() {
            m[(i + 1, i)] += x;
            m[(i, i + 1)] += x;
        }
        for (i, x) in self.d2.iter().enumerate() {
            m[(i + 2, i)] += x;
            m[(i, i + 2)] += x;
        }
    }
}

/// Matrices of `φ`, `n`, `cos(φ−θ)`, `sin(φ−θ)` and `H` in one basis.
///
/// `n_op` holds the real antisymmetric `A` with `n = i·A`.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    basis: Basis,
    params: CircuitParams,
    phi: Operator,
    n_op: Operator,
    cos_op: Operator,
    sin_op: Operator,
    hamiltonian: Operator,
    bare: Banded,
}

impl OperatorSet {
    pub fn basis(&self) -> Basis {
        self.basis
    }
    pub fn params(&self) -> &CircuitParams {
        &self.params
    }
    pub fn dimension(&self) -> usize {
        self.basis.dimension()
    }
    pub fn phi(&self) -> &Operator {
        &self.phi
    }
    pub fn n_op(&self) -> &Operator {
        &self.n_op
    }
    pub fn cos_op(&self) -> &Operator {
        &self.cos_op
    }
    pub fn sin_op(&self) -> &Operator {
        &self.sin_op
    }
    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    /// Same basis, different external flux. Costs O(N²) instead of a rebuild.
    pub fn with_theta(&self, theta: f64) -> OperatorSet {
        let params = self.params.with_theta(theta);
        let delta = params.theta() - self.params.theta();
        let (s, c) = delta.sin_cos();
        let e_j = params.e_j();
        let (cos_op, sin_op, hamiltonian) = match (&self.cos_op, &self.sin_op) {
            (Operator::Dense(co), Operator::Dense(si)) => {
                let cos_new = co * c + si * s;
                let sin_new = si * c - co * s;
                let mut h = &cos_new * (-e_j);
                self.bare.add_to(&mut h);
                (
                    Operator::Dense(cos_new),
                    Operator::Dense(sin_new),
                    Operator::Dense(h),
                )
            }
            (Operator::Diagonal(_), Operator::Diagonal(_)) => {
                let x = match &self.phi {
                    Operator::Diagonal(x) => x,
                    _ => unreachable!("grid phi is diagonal"),
                };
                let (cos_new, sin_new) = grid_potential(x, params.theta());
                let diag = self
                    .bare
                    .d0
                    .iter()
                    .zip(&cos_new)
                    .map(|(b, cv)| b - e_j * cv)
                    .collect();
                (
                    Operator::Diagonal(cos_new),
                    Operator::Diagonal(sin_new),
                    Operator::Tridiagonal(SymTridiagonal::new(diag, self.bare.d1.clone())),
                )
            }
            _ => unreachable!("cos and sin share storage"),
        };
        OperatorSet {
            basis: self.basis,
            params,
            phi: self.phi.clone(),
            n_op: self.n_op.clone(),
            cos_op,
            sin_op,
            hamiltonian,
            bare: self.bare.clone(),
        }
    }
}

/// Oscillator length used by `converge`.
///
/// The bare length `(E_C/4E_L)^{1/4}` is exact at `E_J = 0` but needs a basis
/// far larger than the state when it spreads over many cosine wells. The
/// length is shrunk until the basis can resolve the intra-well charge scale
/// `4 + 2√(E_J/E_C)` over a window of a few `φ_zpf`.
pub fn oscillator_length(p: &CircuitParams) -> f64 {
    let zpf = p.phi_zpf();
    if p.e_j() == 0.0 {
        return zpf;
    }
    let n_win = 4.0 + 2.0 * (p.e_j() / p.e_c()).sqrt();
    let s = (4.0 / (zpf * n_win)).sqrt().min(1.0);
    s * zpf
}

/// First dimension tried by `converge` for a given oscillator length.
pub fn starting_dimension(p: &CircuitParams, length: f64) -> usize {
    let r_imp = (p.e_c() / p.e_l()).sqrt();
    let s = length / p.phi_zpf();
    let n = (8.0 * r_imp * s * s).ceil();
    (n as usize).max(32)
}

/// Oscillator basis with the bare length `(E_C/4E_L)^{1/4}`.
pub fn build_ho(p: &CircuitParams, dimension: usize) -> Result<OperatorSet> {
    build_ho_with_length(p, dimension, p.phi_zpf())
}

pub fn build_ho_with_length(
    p: &CircuitParams,
    dimension: usize,
    length: f64,
) -> Result<OperatorSet> {
    if dimension < 4 {
        return Err(Error::validation(format!(
            "oscillator dimension must be >= 4, got {dimension}"
        )));
    }
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::validation(format!(
            "oscillator length must be > 0, got {length}"
        )));
    }
    let n = dimension;
    let l = length;
    let sq: Vec<f64> = (1..n).map(|i| (i as f64).sqrt()).collect();

    let phi = SymTridiagonal::new(vec![0.0; n], sq.iter().map(|s| l * s).collect());
    // A = (a† − a)/(2l): A[i][i+1] = −√(i+1)/(2l)
    let n_op: Vec<f64> = sq.iter().map(|s| -s / (2.0 * l)).collect();

    // n² and φ² projected onto the first N Fock states
    let (e_c, e_l) = (p.e_c(), p.e_l());
    let kin = e_c / (4.0 * l * l);
    let pot = e_l * l * l;
    let d0: Vec<f64> = (0..n).map(|i| (kin + pot) * (2 * i + 1) as f64).collect();
    let d1 = vec![0.0; n - 1];
    let d2: Vec<f64> = (0..n - 2)
        .map(|i| (pot - kin) * ((i + 1) as f64 * (i + 2) as f64).sqrt())
        .collect();
    let bare = Banded { d0, d1, d2 };

    let (cos_op, sin_op) = projected_trig(n, l, p.theta());

    let mut h = &cos_op * (-p.e_j());
    bare.add_to(&mut h);

    Ok(OperatorSet {
        basis: Basis::HarmonicOscillator {
            dimension: n,
            length: l,
        },
        params: *p,
        phi: Operator::Tridiagonal(phi),
        n_op: Operator::AntisymmetricTridiagonal(n_op),
        cos_op: Operator::Dense(cos_op),
        sin_op: Operator::Dense(sin_op),
        hamiltonian: Operator::Dense(h),
        bare,
    })
}

/// Extra quadrature nodes needed for `cos(l·X − θ)` to be resolved on the
/// first `n` Fock states.
pub(crate) fn quadrature_padding(n: usize, l: f64) -> usize {
    (2.0 * l * (2.0 * n as f64).sqrt()).ceil() as usize + 32
}

/// Projections of `cos(φ−θ)` and `sin(φ−θ)` onto the first `n` Fock states,
/// evaluated as spectral functions of a larger truncated `φ`. Taking the
/// spectral function of the `n`-state `φ` itself leaves spurious low-energy
/// states localized on the outermost nodes.
fn projected_trig(n: usize, l: f64, theta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = n + quadrature_padding(n, l);
    let (nodes, u) = gauss_hermite_rows(m, n);
    let mut wc = u.clone();
    let mut ws = u.clone();
    for (j, x) in nodes.iter().enumerate() {
        let (s, c) = (l * x - theta).sin_cos();
        wc.column_mut(j).scale_mut(c);
        ws.column_mut(j).scale_mut(s);
    }
    let ut = u.transpose();
    let mut cos_op = wc * &ut;
    let mut sin_op = ws * &ut;
    symmetrize(&mut cos_op);
    symmetrize(&mut sin_op);
    (cos_op, sin_op)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition of the `m`-state truncated `a + a†`: nodes ascending,
/// and the leading `rows` components of each normalized eigenvector as the
/// columns of a `rows × m` matrix.
pub(crate) fn gauss_hermite_rows(m: usize, rows: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = m;
    let sq: Vec<f64> = (1..n).map(|i| (i as f64).sqrt()).collect();
    let x = SymTridiagonal::new(vec![0.0; n], sq.clone());
    let half = n.div_ceil(2);
    let lower = x.lowest_eigenvalues(half);
    let mut nodes = vec![0.0; n];
    for (i, v) in lower.iter().enumerate() {
        nodes[i] = *v;
        nodes[n - 1 - i] = -*v;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let mut u = DMatrix::zeros(rows, n);
    let mut col = vec![0.0; n];
    for (j, &lam) in nodes.iter().enumerate() {
        // √k v_{k-1} + √(k+1) v_{k+1} = λ v_k
        col[0] = 1.0;
        if n > 1 {
            col[1] = lam;
        }
        for k in 1..n - 1 {
            col[k + 1] = (lam * col[k] - sq[k - 1] * col[k - 1]) / sq[k];
            if col[k + 1].abs() > 1e100 {
                for c in col[..=k + 1].iter_mut() {
                    *c *= 1e-100;
                }
            }
        }
        let norm = linalg::dot(&col, &col).sqrt();
        for (k, c) in col[..rows].iter().enumerate() {
            u[(k, j)] = c / norm;
        }
    }
    (nodes, u)
}

fn grid_potential(x: &[f64], theta: f64) -> (Vec<f64>, Vec<f64>) {
    x.iter()
        .map(|xi| {
            let (s, c) = (xi - theta).sin_cos();
            (c, s)
        })
        .unzip()
}

/// Smallest grid half-width accepted by `build_grid`.
pub fn minimum_phi_max(p: &CircuitParams) -> f64 {
    6.0 * p.phi_zpf() * SQRT_2
}

/// Central-difference representation on `points` interior grid points.
pub fn build_grid(p: &CircuitParams, points: usize, phi_max: f64) -> Result<OperatorSet> {
    if points < 64 {
        return Err(Error::validation(format!(
            "grid needs >= 64 points, got {points}"
        )));
    }
    let min = minimum_phi_max(p);
    if !(phi_max.is_finite() && phi_max >= min * (1.0 - 1e-12)) {
        return Err(Error::validation(format!(
            "phi_max {phi_max} does not cover 6 standard deviations (needs >= {min})"
        )));
    }
    let h = 2.0 * phi_max / (points + 1) as f64;
    let x: Vec<f64> = (0..points).map(|j| -phi_max + (j + 1) as f64 * h).collect();
    let (e_c, e_l) = (p.e_c(), p.e_l());
    let kin_d = 2.0 * e_c / (h * h);
    let kin_o = -e_c / (h * h);
    let d0: Vec<f64> = x.iter().map(|xi| kin_d + e_l * xi * xi).collect();
    let bare = Banded {
        d0,
        d1: vec![kin_o; points - 1],
        d2: Vec::new(),
    };
    let (cos_v, sin_v) = grid_potential(&x, p.theta());
    let diag = bare
        .d0
        .iter()
        .zip(&cos_v)
        .map(|(b, c)| b - p.e_j() * c)
        .collect();
    Ok(OperatorSet {
        basis: Basis::Grid { points, phi_max },
        params: *p,
        phi: Operator::Diagonal(x),
        // n = −i d/dφ, so A = −d/dφ
        n_op: Operator::AntisymmetricTridiagonal(vec![-1.0 / (2.0 * h); points - 1]),
        cos_op: Operator::Diagonal(cos_v),
        sin_op: Operator::Diagonal(sin_v),
        hamiltonian: Operator::Tridiagonal(SymTridiagonal::new(diag, bare.d1.clone())),
        bare,
    })
}

/// Lowest eigenpairs of a Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution {
    /// Ascending energies (GHz).
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: DMatrix<f64>,
    /// Largest `‖Hv − λv‖₂ / ‖H‖_F` over the retained states.
    pub residual_norm: f64,
    pub basis_dimension: usize,
}

impl EigenSolution {
    pub fn vector(&self, j: usize) -> &[f64] {
        let n = self.vectors.nrows();
        &self.vectors.as_slice()[j * n..(j + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

const RESIDUAL_TOL: f64 = 1e-9;
const ORTHO_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;

/// Lowest `k` eigenpairs of a dense symmetric matrix, `1 <= k <= N`.
pub fn symmetric_eigen(matrix: &DMatrix<f64>, k: usize) -> Result<EigenSolution> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::Contract(format!(
            "matrix is {}x{}, not square",
            n,
            matrix.ncols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::validation(format!(
            "cannot retain {k} states of a {n}x{n} matrix"
        )));
    }
    let scale = matrix.amax();
    let mut asym: f64 = 0.0;
    for j in 0..n {
        for i in j + 1..n {
            asym = asym.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Contract(format!(
            "matrix asymmetry {asym:e} exceeds {SYMMETRY_TOL:e} relative"
        )));
    }
    let (values, vectors) = linalg::dense_lowest(matrix, k);
    finish(
        values,
        vectors,
        &Operator::Dense(matrix.clone()),
        matrix.norm(),
    )
}

fn finish(
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    h: &Operator,
    h_norm: f64,
) -> Result<EigenSolution> {
    let n = h.dim();
    let k = values.len();
    let mut residual: f64 = 0.0;
    for (lam, v) in values.iter().zip(&vectors) {
        let hv = h.apply(v);
        let r: f64 = hv
            .iter()
            .zip(v)
            .map(|(a, b)| (a - lam * b).powi(2))
            .sum::<f64>()
            .sqrt();
        residual = residual.max(r);
    }
    let residual_norm = if h_norm > 0.0 {
        residual / h_norm
    } else {
        residual
    };
    if residual_norm > RESIDUAL_TOL {
        return Err(Error::Contract(format!(
            "eigen residual {residual_norm:e} exceeds {RESIDUAL_TOL:e}"
        )));
    }
    for a in 0..k {
        for b in 0..=a {
            let d = linalg::dot(&vectors[a], &vectors[b]);
            let target = if a == b { 1.0 } else { 0.0 };
            if (d - target).abs() > ORTHO_TOL {
                return Err(Error::Contract(format!(
                    "eigenvectors {a},{b} overlap {d:e}"
                )));
            }
        }
    }
    let mut m = DMatrix::zeros(n, k);
    for (j, v) in vectors.iter().enumerate() {
        m.column_mut(j).copy_from_slice(v);
    }
    Ok(EigenSolution {
        values,
        vectors: m,
        residual_norm,
        basis_dimension: n,
    })
}

/// Lowest `k` eigenpairs of the Hamiltonian, `k <= dimension/2`.
pub fn eigensolve(ops: &OperatorSet, k: usize) -> Result<EigenSolution> {
    let n = ops.dimension();
    if k == 0 || k > n / 2 {
        return Err(Error::validation(format!(
            "can retain 1..={} states of a dimension-{n} basis, asked for {k}",
            n / 2
        )));
    }
    match &ops.hamiltonian {
        Operator::Dense(h) => symmetric_eigen(h, k),
        Operator::Tridiagonal(t) => {
            let (values, vectors) = linalg::tridiagonal_lowest(t, k);
            finish(
                values,
                vectors,
                &ops.hamiltonian,
                ops.hamiltonian.frobenius_norm(),
            )
        }
        _ => unreachable!("hamiltonian is dense or tridiagonal"),
    }
}

/// Relative change between two eigenvalue lists, measured against the
/// oscillator energy scale when an eigenvalue passes near zero.
pub fn relative_change(a: &[f64], b: &[f64], scale: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(scale))
        .fold(0.0, f64::max)
}

/// How `converge` chooses the oscillator length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthScale {
    /// `(E_C/4E_L)^{1/4}`.
    Bare,
    /// `oscillator_length`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergeOptions {
    pub tol: f64,
    pub max_dimension: usize,
    pub start_dimension: Option<usize>,
    pub length: LengthScale,
}

impl Default for ConvergeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_dimension: MAX_DIMENSION,
            start_dimension: None,
            length: LengthScale::Auto,
        }
    }
}

impl ConvergeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// A converged solution with the operators it was computed in.
#[derive(Debug, Clone)]
pub struct Converged {
    pub solution: EigenSolution,
    pub operators: OperatorSet,
}

/// Double the basis until the lowest `k` eigenvalues change by at most `tol`.
pub fn converge(p: &CircuitParams, k: usize, tol: f64) -> Result<EigenSolution> {
    converge_with(p, k, &ConvergeOptions::with_tol(tol)).map(|c| c.solution)
}

pub fn converge_with(p: &CircuitParams, k: usize, opts: &ConvergeOptions) -> Result<Converged> {
    if !(opts.tol >= 1e-12) {
        return Err(Error::validation(format!(
            "tolerance must be >= 1e-12, got {}",
            opts.tol
        )));
    }
    let length = match opts.length {
        LengthScale::Bare => p.phi_zpf(),
        LengthScale::Auto => oscillator_length(p),
        LengthScale::Fixed(l) => l,
    };
    let mut n = opts
        .start_dimension
        .unwrap_or_else(|| starting_dimension(p, length))
        .max(2 * k)
        .max(4);
    let cap = opts.max_dimension.min(MAX_DIMENSION);
    if n > cap {
        return Err(Error::Convergence {
            dimension: n,
            last_delta: f64::INFINITY,
        });
    }
    let scale = (p.e_c() * p.e_l()).sqrt();
    let mut prev = eigensolve(&build_ho_with_length(p, n, length)?, k)?;
    loop {
        let next_n = 2 * n;
        if next_n > cap {
            return Err(Error::Convergence {
                dimension: n,
                last_delta: f64::INFINITY,
            });
        }
        let ops = build_ho_with_length(p, next_n, length)?;
        let sol = eigensolve(&ops, k)?;
        let delta = relative_change(&prev.values, &sol.values, scale);
        if delta <= opts.tol {
            return Ok(Converged {
                solution: sol,
                operators: ops,
            });
        }
        if 2 * next_n > cap {
            return Err(Error::Convergence {
                dimension: next_n,
                last_delta: delta,
            });
        }
        prev = sol;
        n = next_n;
    }
}

/// Richardson-extrapolated grid eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEstimate {
    pub values: Vec<f64>,
    pub points: usize,
    pub phi_max: f64,
}

/// Refine the grid (`points → 2·points + 1`, halving the spacing) and
/// extrapolate the second-order error away until the estimate is stable.
pub fn converge_grid(p: &CircuitParams, k: usize, tol: f64) -> Result<GridEstimate> {
    let phi_max = minimum_phi_max(p);
    let mut points = 2499;
    let solve = |pts: usize| -> Result<Vec<f64>> {
        Ok(eigensolve(&build_grid(p, pts, phi_max)?, k)?.values)
    };
    let scale = (p.e_c() * p.e_l()).sqrt();
    let mut coarse = solve(points)?;
    let mut prev_extrap: Option<Vec<f64>> = None;
    loop {
        let fine_points = 2 * points + 1;
        let fine = solve(fine_points)?;
        let extrap: Vec<f64> = fine
            .iter()
            .zip(&coarse)
            .map(|(f, c)| (4.0 * f - c) / 3.0)
            .collect();
        if let Some(prev) = &prev_extrap {
            let delta = relative_change(prev, &extrap, scale);
            if delta <= tol {
                return Ok(GridEstimate {
                    values: extrap,
                    points: fine_points,
                    phi_max,
                });
            }
            if fine_points > 1 << 20 {
                return Err(Error::Convergence {
                    dimension: fine_points,
                    last_delta: delta,
                });
            }
        }
        prev_extrap = Some(extrap);
        coarse = fine;
        points = fine_points;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn params(e_c: f64, e_l: f64, e_j: f64, theta: f64) -> CircuitParams {
        CircuitParams::new(e_c, e_l, e_j, theta).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn rejects_tiny_basis() {
        let p = params(1.0, 0.1, 0.5, 0.0);
        assert!(matches!(build_ho(&p, 3), Err(Error::Validation(_))));
        assert!(build_ho(&p, 4).is_ok());
    }

    #[test]
    fn hermite_eigenvectors_are_orthonormal() {
        for n in [4usize, 5, 33, 200] {
            let (nodes, u) = gauss_hermite_rows(n, n);
            let err = (u.transpose() * &u - DMatrix::identity(n, n)).amax();
            assert!(err < 1e-12, "n={n}: {err}");
            for w in nodes.windows(2) {
                assert!(w[0] < w[1]);
            }
            let x = SymTridiagonal::new(vec![0.0; n], (1..n).map(|i| (i as f64).sqrt()).collect());
            let xd = Operator::Tridiagonal(x).to_dense();
            let back =
                &u * DMatrix::from_diagonal(&DVector::from_vec(nodes.clone())) * u.transpose();
            assert!((back - xd).amax() < 1e-11);
        }
    }

    #[test]
    fn oscillator_limit_is_exact() {
        let p = params(1.3, 0.02, 0.0, 0.7);
        let ops = build_ho(&p, 12).unwrap();
        let sol = eigensolve(&ops, 6).unwrap();
        let w = (p.e_c() * p.e_l()).sqrt();
        for (k, v) in sol.values.iter().enumerate() {
            assert!(rel(*v, (2 * k + 1) as f64 * w) < 1e-12, "{k}");
        }
        let v0 = sol.vector(0);
        let phi2 = linalg::dot(&ops.phi().apply(v0), &ops.phi().apply(v0));
        assert!(rel(phi2, 0.5 * (p.e_c() / p.e_l()).sqrt()) < 1e-12);
    }

    #[test]
    fn hamiltonian_matches_its_assembly() {
        // products formed in a larger basis and cut back are the projections
        let p = params(1.0, 0.05, 1.7, 1.1);
        let n = 30;
        let ops = build_ho(&p, n).unwrap();
        let big = build_ho(&p, n + 2).unwrap();
        let phi = big.phi().to_dense();
        let a = big.n_op().to_dense();
        let n2 = -(&a * &a);
        let phi2 = &phi * &phi;
        let cos = ops.cos_op().to_dense();
        let h = n2.view((0, 0), (n, n)) * p.e_c() + phi2.view((0, 0), (n, n)) * p.e_l()
            - &cos * p.e_j();
        assert!((ops.hamiltonian().to_dense() - h).amax() < 1e-12);
    }

    #[test]
    fn cos_matches_a_much_finer_quadrature() {
        let p = params(1.0, 0.01, 1.0, 0.9);
        let n = 120;
        for l in [1.0, p.phi_zpf()] {
            let ops = build_ho_with_length(&p, n, l).unwrap();
            let (nodes, u) = gauss_hermite_rows(4 * n, n);
            let mut w = u.clone();
            for (j, x) in nodes.iter().enumerate() {
                w.column_mut(j).scale_mut((l * x - p.theta()).cos());
            }
            let reference = w * u.transpose();
            assert!((ops.cos_op().to_dense() - reference).amax() < 1e-13);
        }
    }

    #[test]
    fn ground_energy_is_variational_in_dimension() {
        let p = params(1.0, 1e-3, 1.0, FRAC_PI_2);
        let l = oscillator_length(&p);
        let mut prev = f64::INFINITY;
        for n in [16usize, 32, 64, 128, 256] {
            let e0 = eigensolve(&build_ho_with_length(&p, n, l).unwrap(), 1)
                .unwrap()
                .values[0];
            assert!(e0 <= prev + 1e-12, "{n}: {e0} > {prev}");
            prev = e0;
        }
    }

    #[test]
    fn no_spurious_states_at_other_flux() {
        let p = params(1.0, 1e-4, 3.0, FRAC_PI_2);
        let c = converge_with(&p, 1, &ConvergeOptions::default()).unwrap();
        let n = c.solution.basis_dimension;
        let e_ref = c.solution.values[0];
        for theta in [0.3, 1.4, 2.8, 3.1] {
            let o = c.operators.with_theta(theta);
            let s = eigensolve(&o, 1).unwrap();
            let tail: f64 = s.vector(0)[3 * n / 4..].iter().map(|x| x * x).sum();
            assert!(tail < 1e-12, "theta {theta}: tail {tail}");
            assert!((s.values[0] - e_ref).abs() < 1.0);
        }
    }

    #[test]
    fn canonical_commutator_on_inner_block() {
        let p = params(1.0, 0.01, 1.0, 0.0);
        let n = 50;
        let ops = build_ho(&p, n).unwrap();
        let phi = ops.phi().to_dense();
        let a = ops.n_op().to_dense();
        // [φ, iA] = i·I  ⇔  [φ, A] = I
        let c = &phi * &a - &a * &phi - DMatrix::identity(n, n);
        let block = c.view((0, 0), (n - 2, n - 2));
        assert!(block.amax() < 1e-8);
    }

    #[test]
    fn trig_projections_are_contractions() {
        // P e^{i(φ−θ)} P has operator norm at most one
        let p = params(1.0, 0.1, 1.0, 0.4);
        let ops = build_ho(&p, 24).unwrap();
        let c = ops.cos_op().to_dense();
        let s = ops.sin_op().to_dense();
        assert_eq!(c, c.transpose());
        assert_eq!(s, s.transpose());
        let g = &c * &c + &s * &s;
        let top = nalgebra::SymmetricEigen::new(g).eigenvalues.max();
        assert!(top <= 1.0 + 1e-12, "{top}");
    }

    #[test]
    fn retargeting_flux_equals_rebuilding() {
        let p = params(1.0, 0.04, 1.2, 0.3);
        let ops = build_ho(&p, 60).unwrap();
        let moved = ops.with_theta(2.0);
        let direct = build_ho(&p.with_theta(2.0), 60).unwrap();
        let diff = (moved.hamiltonian().to_dense() - direct.hamiltonian().to_dense()).amax();
        assert!(diff < 1e-12, "{diff}");
        let g = build_grid(&p, 100, minimum_phi_max(&p)).unwrap();
        let gm = g.with_theta(2.0);
        let gd = build_grid(&p.with_theta(2.0), 100, minimum_phi_max(&p)).unwrap();
        assert!((gm.hamiltonian().to_dense() - gd.hamiltonian().to_dense()).amax() < 1e-12);
    }

    #[test]
    fn eigensolve_limits_retained_states() {
        let p = params(1.0, 0.1, 0.5, 0.0);
        let ops = build_ho(&p, 10).unwrap();
        assert!(eigensolve(&ops, 5).is_ok());
        assert!(matches!(eigensolve(&ops, 6), Err(Error::Validation(_))));
        assert!(matches!(eigensolve(&ops, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn two_by_two_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let sol = symmetric_eigen(&m, 2).unwrap();
        assert!((sol.values[0] - 1.0).abs() < 1e-15);
        assert!((sol.values[1] - 2.0).abs() < 1e-15);
        assert_eq!(sol.basis_dimension, 2);
    }

    #[test]
    fn asymmetric_input_is_a_contract_violation() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 2.0]);
        assert!(matches!(symmetric_eigen(&m, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn sign_convention_is_applied() {
        let p = params(1.0, 0.02, 1.0, 1.0);
        let sol = eigensolve(&build_ho(&p, 80).unwrap(), 3).unwrap();
        for j in 0..3 {
            let v = sol.vector(j);
            let big = v
                .iter()
                .cloned()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn oscillator_ladder_is_evenly_spaced() {
        let p = params(0.8, 0.003, 0.0, 0.0);
        let sol = converge(&p, 3, 1e-10).unwrap();
        let gap = 2.0 * (p.e_c() * p.e_l()).sqrt();
        for w in sol.values.windows(2) {
            assert!(rel(w[1] - w[0], gap) < 1e-10);
        }
    }

    #[test]
    fn oscillator_limit_converges_at_first_doubling() {
        let p = params(1.0, 0.01, 0.0, 0.0);
        let sol = converge(&p, 3, 1e-12).unwrap();
        assert_eq!(sol.basis_dimension, 2 * starting_dimension(&p, p.phi_zpf()));
    }

    #[test]
    fn delocalized_ground_state_needs_a_large_basis() {
        // E_J/E_C = 1, E_L/E_C = 1e-4
        let p = params(1.0, 1e-4, 1.0, 0.0);
        let c = converge_with(&p, 3, &ConvergeOptions::with_tol(1e-9)).unwrap();
        assert!(
            c.solution.basis_dimension >= 128,
            "{}",
            c.solution.basis_dimension
        );
        let v0 = c.solution.vector(0);
        let phi = c.operators.phi();
        let phi_v = phi.apply(v0);
        let var = linalg::dot(&phi_v, &phi_v) - linalg::dot(v0, &phi_v).powi(2);
        assert!(var > 2.0 * PI * PI, "variance {var}");
    }

    #[test]
    fn converged_values_do_not_depend_on_start() {
        let p = params(1.0, 1e-3, 0.8, FRAC_PI_2);
        let a = converge_with(&p, 3, &ConvergeOptions::with_tol(1e-10)).unwrap();
        let b = converge_with(
            &p,
            3,
            &ConvergeOptions {
                start_dimension: Some(100),
                ..ConvergeOptions::with_tol(1e-10)
            },
        )
        .unwrap();
        let scale = (p.e_c() * p.e_l()).sqrt();
        assert!(relative_change(&a.solution.values, &b.solution.values, scale) < 1e-9);
    }

    #[test]
    fn bare_and_scaled_lengths_agree() {
        let p = params(1.0, 0.01, 1.0, FRAC_PI_2);
        let bare = converge_with(
            &p,
            3,
            &ConvergeOptions {
                length: LengthScale::Bare,
                ..ConvergeOptions::with_tol(1e-11)
            },
        )
        .unwrap();
        let auto = converge_with(&p, 3, &ConvergeOptions::with_tol(1e-11)).unwrap();
        for (a, b) in bare.solution.values.iter().zip(&auto.solution.values) {
            assert!(rel(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn tolerance_floor_is_enforced() {
        let p = params(1.0, 0.01, 1.0, 0.0);
        assert!(matches!(converge(&p, 3, 1e-13), Err(Error::Validation(_))));
    }

    #[test]
    fn cap_reports_last_delta() {
        let p = params(1.0, 1e-4, 1.0, 0.0);
        let err = converge_with(
            &p,
            3,
            &ConvergeOptions {
                max_dimension: 128,
                start_dimension: Some(16),
                length: LengthScale::Bare,
                ..ConvergeOptions::with_tol(1e-12)
            },
        )
        .unwrap_err();
        match err {
            Error::Convergence {
                dimension,
                last_delta,
            } => {
                assert_eq!(dimension, 128);
                assert!(last_delta > 1e-12 && last_delta.is_finite());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_rejects_narrow_window_and_few_points() {
        let p = params(1.0, 0.01, 1.0, 0.0);
        let min = minimum_phi_max(&p);
        assert!(build_grid(&p, 63, min).is_err());
        assert!(build_grid(&p, 200, 0.9 * min).is_err());
        assert!(build_grid(&p, 200, min).is_ok());
    }

    #[test]
    fn grid_oscillator_is_second_order() {
        let p = params(1.0, 0.01, 0.0, 0.0);
        let exact = (p.e_c() * p.e_l()).sqrt();
        let pm = minimum_phi_max(&p);
        let e = |pts| {
            eigensolve(&build_grid(&p, pts, pm).unwrap(), 1)
                .unwrap()
                .values[0]
                - exact
        };
        let (e1, e2) = (e(400), e(801));
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
        assert!(e2.abs() / exact < 1e-4);
    }

    #[test]
    fn grid_and_oscillator_agree() {
        let p = params(1.0, 0.01, 1.0, FRAC_PI_2);
        let g = converge_grid(&p, 3, 1e-9).unwrap();
        let h = converge(&p, 3, 1e-11).unwrap();
        for (a, b) in g.values.iter().zip(&h.values) {
            assert!(rel(*a, *b) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn parity_at_zero_flux() {
        let p = params(1.0, 0.01, 1.5, 0.0);
        let c = converge_with(&p, 3, &ConvergeOptions::with_tol(1e-10)).unwrap();
        for j in 0..3 {
            let v = c.solution.vector(j);
            assert!(c.operators.phi().bilinear(v, v).abs() < 1e-9);
        }
        // a well-separated spectrum; near-degenerate pairs mix at grid precision
        let p = params(1.0, 0.01, 0.5, 0.0);
        let g = build_grid(&p, 4000, minimum_phi_max(&p)).unwrap();
        let gs = eigensolve(&g, 3).unwrap();
        for j in 0..3 {
            let v = gs.vector(j);
            let m = g.phi().bilinear(v, v);
            assert!(m.abs() < 1e-9, "{j}: {m}");
        }
    }
    #[test]
    fn hermite_functions_by_hand() {
        let basis = Basis::HarmonicOscillator {
            dimension: 2,
            length: 0.7,
        };
        let b = 0.7 * SQRT_2;
        for phi in [-1.3, 0.0, 0.4, 2.2] {
            let x: f64 = phi / b;
            let g = (-0.5 * x * x).exp() / (PI.sqrt() * b).sqrt();
            assert!((basis.wavefunction(&[1.0, 0.0], phi) - g).abs() < 1e-15);
            assert!((basis.wavefunction(&[0.0, 1.0], phi) - SQRT_2 * x * g).abs() < 1e-15);
        }
    }

    #[test]
    fn wavefunction_is_normalized_far_out() {
        // high Fock states live at |x| ~ sqrt(2n); e^{-x²/2} alone underflows there
        let n = 2000;
        let basis = Basis::HarmonicOscillator {
            dimension: n + 1,
            length: 1.0,
        };
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        let (a, b, m) = (-100.0, 100.0, 200_000);
        let h = (b - a) / m as f64;
        let norm: f64 = (0..=m)
            .map(|i| basis.wavefunction(&c, a + i as f64 * h).powi(2))
            .sum::<f64>()
            * h;
        assert!((norm - 1.0).abs() < 1e-6, "{norm}");
    }

    #[test]
    fn grid_and_oscillator_ground_states_coincide() {
        let p = CircuitParams::new(1.0, 0.05, 0.8, 0.3).unwrap();
        let c = converge_with(&p, 1, &ConvergeOptions::default()).unwrap();
        let ho = c.operators.basis();
        let phi_max = minimum_phi_max(&p);
        let g = build_grid(&p, 3999, phi_max).unwrap();
        let gs = eigensolve(&g, 1).unwrap();
        let sign =
            if gs.vector(0).iter().sum::<f64>() * c.solution.vector(0).iter().sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
        for phi in [-2.0, -0.5, 0.0, 0.9, 3.0] {
            let a = ho.wavefunction(c.solution.vector(0), phi);
            let b = sign * g.basis().wavefunction(gs.vector(0), phi);
            assert!((a - b).abs() < 1e-4, "{phi}: {a} vs {b}");
        }
    }
}
