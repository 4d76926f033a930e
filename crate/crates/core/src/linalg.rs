//! Real symmetric eigensolver.
//!
//! Dense matrices are reduced to tridiagonal form by Householder reflections
//! acting on the lower triangle. The lowest eigenvalues of the tridiagonal
//! matrix are isolated by Sturm-count bisection, their eigenvectors obtained by
//! inverse iteration and mapped back through the stored reflectors. Every step
//! is deterministic.

use nalgebra::DMatrix;

/// Symmetric tridiagonal matrix: `diag[i] = T[i][i]`, `off[i] = T[i+1][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert!(
            off.len() + 1 == diag.len() || (diag.is_empty() && off.is_empty()),
            "off-diagonal length must be dim - 1"
        );
        Self { diag, off }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y: Vec<f64> = (0..n).map(|i| self.diag[i] * x[i]).collect();
        for i in 0..n.saturating_sub(1) {
            y[i] += self.off[i] * x[i + 1];
            y[i + 1] += self.off[i] * x[i];
        }
        y
    }

    /// Gershgorin interval containing the whole spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        let n = self.dim();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let mut r = 0.0;
            if i > 0 {
                r += self.off[i - 1].abs();
            }
            if i + 1 < n {
                r += self.off[i].abs();
            }
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    fn norm_bound(&self) -> f64 {
        let (lo, hi) = self.gershgorin();
        lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE)
    }

    /// Number of eigenvalues strictly below `x`.
    pub fn count_below(&self, x: f64, off_sq: &[f64], pivmin: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        if q.abs() < pivmin {
            q = -pivmin;
        }
        if q < 0.0 {
            count += 1;
        }
        for i in 1..self.dim() {
            q = self.diag[i] - x - off_sq[i - 1] / q;
            if q.abs() < pivmin {
                q = -pivmin;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// The `k` smallest eigenvalues in ascending order.
    pub fn lowest_eigenvalues(&self, k: usize) -> Vec<f64> {
        let n = self.dim();
        assert!(k <= n, "requested {k} eigenvalues of a {n}x{n} matrix");
        if k == 0 {
            return Vec::new();
        }
        let off_sq: Vec<f64> = self.off.iter().map(|e| e * e).collect();
        let max_off_sq = off_sq.iter().cloned().fold(0.0, f64::max);
        let pivmin = f64::MIN_POSITIVE * max_off_sq.max(1.0);
        let (glo, ghi) = self.gershgorin();
        let span = (ghi - glo).max(f64::MIN_POSITIVE);
        let glo = glo - 2.0 * f64::EPSILON * span - pivmin;
        let ghi = ghi + 2.0 * f64::EPSILON * span + pivmin;

        let mut values = Vec::with_capacity(k);
        let mut lower = glo;
        for j in 0..k {
            let mut lo = lower;
            let mut hi = ghi;
            for _ in 0..256 {
                let tol = 2.0 * f64::EPSILON * lo.abs().max(hi.abs()) + pivmin;
                if hi - lo <= tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if self.count_below(mid, &off_sq, pivmin) > j {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let value = 0.5 * (lo + hi);
            values.push(value);
            lower = lo;
        }
        values
    }

    /// Eigenvectors for the given (ascending, previously computed) eigenvalues
    /// by inverse iteration with re-orthogonalisation.
    pub fn eigenvectors(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let n = self.dim();
        let norm = self.norm_bound();
        let eps = f64::EPSILON;
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(values.len());
        let mut prev_shift = f64::NEG_INFINITY;
        for (j, &lambda) in values.iter().enumerate() {
            let mut shift = lambda;
            let sep = 10.0 * eps * norm;
            if shift - prev_shift < sep {
                shift = prev_shift + sep;
            }
            prev_shift = shift;
            let lu = TridiagonalLu::factor(self, shift, eps * norm);
            let mut x = start_vector(n, j);
            for _ in 0..5 {
                lu.solve_in_place(&mut x);
                for v in &vectors {
                    let d = dot(v, &x);
                    axpy(-d, v, &mut x);
                }
                let nx = dot(&x, &x).sqrt();
                if nx == 0.0 || !nx.is_finite() {
                    x = start_vector(n, j + 7);
                    continue;
                }
                x.iter_mut().for_each(|xi| *xi /= nx);
            }
            vectors.push(x);
        }
        vectors
    }
}

/// Deterministic, well-spread start vector for inverse iteration.
fn start_vector(n: usize, salt: usize) -> Vec<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15 ^ (salt as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        v.push(0.5 + (state >> 11) as f64 / (1u64 << 53) as f64);
    }
    let nv = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// LU factorisation with partial pivoting of `T - shift I`.
struct TridiagonalLu {
    // U has main diagonal u0, first superdiagonal u1, second superdiagonal u2
    u0: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    mult: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn factor(t: &SymTridiagonal, shift: f64, tiny: f64) -> Self {
        let n = t.dim();
        let tiny = tiny.max(f64::MIN_POSITIVE);
        let mut u0: Vec<f64> = t.diag.iter().map(|d| d - shift).collect();
        let mut u1: Vec<f64> = t.off.clone();
        u1.push(0.0);
        let mut u2 = vec![0.0; n];
        let mut mult = vec![0.0; n];
        let mut swapped = vec![false; n];
        // sub-diagonal entries of the current row pair
        for i in 0..n.saturating_sub(1) {
            let sub = t.off[i];
            if sub.abs() > u0[i].abs() {
                // swap rows i and i+1
                swapped[i] = true;
                let m = u0[i] / sub;
                mult[i] = m;
                let (a0, a1) = (u0[i], u1[i]);
                let next_diag = u0[i + 1];
                let next_sup = if i + 2 < n { u1[i + 1] } else { 0.0 };
                u0[i] = sub;
                u1[i] = next_diag;
                u2[i] = next_sup;
                u0[i + 1] = a1 - m * next_diag;
                u1[i + 1] = -m * next_sup;
                let _ = a0;
            } else {
                let pivot = if u0[i] == 0.0 { tiny } else { u0[i] };
                u0[i] = pivot;
                let m = sub / pivot;
                mult[i] = m;
                u0[i + 1] -= m * u1[i];
                u2[i] = 0.0;
            }
        }
        if n > 0 && u0[n - 1].abs() < tiny {
            u0[n - 1] = if u0[n - 1] < 0.0 { -tiny } else { tiny };
        }
        for p in u0.iter_mut() {
            if p.abs() < tiny {
                *p = if *p < 0.0 { -tiny } else { tiny };
            }
        }
        Self {
            u0,
            u1,
            u2,
            mult,
            swapped,
        }
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                b.swap(i, i + 1);
            }
            b[i + 1] -= self.mult[i] * b[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= self.u1[i] * b[i + 1];
            }
            if i + 2 < n {
                s -= self.u2[i] * b[i + 2];
            }
            b[i] = s / self.u0[i];
            if !b[i].is_finite() {
                b[i] = b[i].signum() * f64::MAX.sqrt();
            }
        }
        // Rescale to avoid overflow in later iterations.
        let m = b.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if m > 1e150 {
            b.iter_mut().for_each(|x| *x /= m);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Householder reduction `A = Q T Qᵀ` of a dense symmetric matrix.
pub struct Tridiagonalization {
    pub tridiagonal: SymTridiagonal,
    // reflector k acts on indices k+1..n; v[0] = 1 is stored explicitly
    reflectors: Vec<(Vec<f64>, f64)>,
}

impl Tridiagonalization {
    /// Only the lower triangle of `matrix` is read.
    pub fn new(matrix: &DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        assert_eq!(n, matrix.ncols(), "matrix must be square");
        // column-major copy; only a[i + j*n] with i >= j is referenced
        let mut a: Vec<f64> = matrix.as_slice().to_vec();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];

        for k in 0..n.saturating_sub(2) {
            let m = n - k - 1;
            let col = k * n + k + 1;
            let alpha = a[col];
            let xnorm_sq: f64 = a[col + 1..col + m].iter().map(|x| x * x).sum();
            diag[k] = a[k * n + k];
            if xnorm_sq == 0.0 {
                off[k] = alpha;
                reflectors.push((Vec::new(), 0.0));
                continue;
            }
            let beta = -alpha.signum() * (alpha * alpha + xnorm_sq).sqrt();
            let beta = if alpha == 0.0 {
                -(xnorm_sq.sqrt())
            } else {
                beta
            };
            let tau = (beta - alpha) / beta;
            let scale = 1.0 / (alpha - beta);
            let v = &mut v[..m];
            v[0] = 1.0;
            for i in 1..m {
                v[i] = a[col + i] * scale;
            }
            off[k] = beta;

            // p = tau * A22 v  using the lower triangle of A22
            let p = &mut p[..m];
            p.iter_mut().for_each(|x| *x = 0.0);
            let base = k + 1;
            for j in 0..m {
                let cj = (base + j) * n + base; // start of column base+j at row base
                let column = &a[cj + j..cj + m];
                let vj = v[j];
                p[j] += column[0] * vj;
                let mut acc = 0.0;
                for (i, aij) in column.iter().enumerate().skip(1) {
                    p[j + i] += aij * vj;
                    acc += aij * v[j + i];
                }
                p[j] += acc;
            }
            p.iter_mut().for_each(|x| *x *= tau);
            let half = 0.5 * tau * dot(p, v);
            // w = p - half v, stored in p
            for i in 0..m {
                p[i] -= half * v[i];
            }
            // A22 -= v wᵀ + w vᵀ on the lower triangle
            for j in 0..m {
                let cj = (base + j) * n + base;
                let (vj, wj) = (v[j], p[j]);
                let column = &mut a[cj + j..cj + m];
                let vs = &v[j..m];
                let ws = &p[j..m];
                for ((aij, vi), wi) in column.iter_mut().zip(vs).zip(ws) {
                    *aij -= vi * wj + wi * vj;
                }
            }
            reflectors.push((v.to_vec(), tau));
        }
        if n >= 2 {
            diag[n - 2] = a[(n - 2) * n + n - 2];
            off[n - 2] = a[(n - 2) * n + n - 1];
        }
        if n >= 1 {
            diag[n - 1] = a[(n - 1) * n + n - 1];
        }
        Self {
            tridiagonal: SymTridiagonal::new(diag, off),
            reflectors,
        }
    }

    /// Map an eigenvector of the tridiagonal matrix back to the original basis.
    pub fn back_transform(&self, y: &mut [f64]) {
        for (k, (v, tau)) in self.reflectors.iter().enumerate().rev() {
            if *tau == 0.0 {
                continue;
            }
            let seg = &mut y[k + 1..];
            let s = tau * dot(v, seg);
            axpy(-s, v, seg);
        }
    }
}

/// Fix the sign so the largest-magnitude component is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Lowest `k` eigenpairs of a real symmetric dense matrix.
pub fn dense_lowest(matrix: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let tri = Tridiagonalization::new(matrix);
    let values = tri.tridiagonal.lowest_eigenvalues(k);
    let mut vectors = tri.tridiagonal.eigenvectors(&values);
    for v in vectors.iter_mut() {
        tri.back_transform(v);
        let nv = dot(v, v).sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        fix_sign(v);
    }
    (values, vectors)
}

/// Lowest `k` eigenpairs of a symmetric tridiagonal matrix.
pub fn tridiagonal_lowest(t: &SymTridiagonal, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let values = t.lowest_eigenvalues(k);
    let mut vectors = t.eigenvectors(&values);
    for v in vectors.iter_mut() {
        fix_sign(v);
    }
    (values, vectors)
}
