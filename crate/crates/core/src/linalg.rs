//! Dense-vector helpers, factored Haar orthogonal matrices, and a symmetric
//! tridiagonal eigenvalue solver.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deterministic generator for a `(seed, stream)` pair.
///
/// Different streams of the same seed are independent, which lets one user
/// seed drive the left rotation, the right rotation, the spectrum and the
/// instance without overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().sum::<f64>() / a.len() as f64
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `N⁻¹‖a − b‖²`
pub fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// An `n × n` orthogonal matrix held as a product of Householder reflectors
/// followed by a diagonal sign matrix: `Q = H₀ H₁ ⋯ H_{n−2} D`.
///
/// Reflector `k` acts on coordinates `k..n`. Sampling draws each reflector
/// from a fresh standard Gaussian vector, which is exactly the sequence of
/// reflectors Householder QR produces on an i.i.d. Gaussian matrix; the
/// signs of the diagonal of `R` are folded into `D`, making `Q` Haar
/// distributed. Products cost `O(n²)` and storage is half a dense matrix.
#[derive(Debug, Clone)]
pub struct Orthogonal {
    n: usize,
    /// Unit reflector vectors packed back to back; reflector `k` has length `n − k`.
    reflectors: Vec<f64>,
    offsets: Vec<usize>,
    signs: Vec<f64>,
}

impl Orthogonal {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            reflectors: Vec::new(),
            offsets: vec![0],
            signs: vec![1.0; n],
        }
    }

    pub fn sample_haar<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDimension(
                "orthogonal matrix of size 0".into(),
            ));
        }
        let count = n - 1;
        let mut reflectors = Vec::with_capacity(n * (n + 1) / 2);
        let mut offsets = Vec::with_capacity(count + 1);
        let mut signs = vec![1.0; n];
        let mut g = Vec::with_capacity(n);
        for (k, sign) in signs.iter_mut().enumerate().take(count) {
            g.clear();
            g.extend((k..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let alpha = norm_sq(&g).sqrt();
            let s = if g[0] >= 0.0 { 1.0 } else { -1.0 };
            // H g = −s‖g‖e₁, so the R diagonal is −s‖g‖.
            g[0] += s * alpha;
            let vn = norm_sq(&g).sqrt();
            offsets.push(reflectors.len());
            if vn > 0.0 {
                reflectors.extend(g.iter().map(|v| v / vn));
            } else {
                reflectors.extend(std::iter::repeat_n(0.0, g.len()));
            }
            *sign = -s;
        }
        offsets.push(reflectors.len());
        let last: f64 = rng.sample(StandardNormal);
        signs[n - 1] = if last >= 0.0 { 1.0 } else { -1.0 };
        Ok(Self {
            n,
            reflectors,
            offsets,
            signs,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn reflector(&self, k: usize) -> &[f64] {
        &self.reflectors[self.offsets[k]..self.offsets[k + 1]]
    }

    fn num_reflectors(&self) -> usize {
        self.offsets.len() - 1
    }

    fn reflect(&self, k: usize, x: &mut [f64]) {
        let v = self.reflector(k);
        if v.is_empty() {
            return;
        }
        let tail = &mut x[k..];
        let c = 2.0 * dot(v, tail);
        axpy(-c, v, tail);
    }

    /// `Q x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "orthogonal apply: length mismatch");
        let mut y: Vec<f64> = x.iter().zip(&self.signs).map(|(a, s)| a * s).collect();
        for k in (0..self.num_reflectors()).rev() {
            self.reflect(k, &mut y);
        }
        y
    }

    /// `Qᵀ x`
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "orthogonal apply: length mismatch");
        let mut y = x.to_vec();
        for k in 0..self.num_reflectors() {
            self.reflect(k, &mut y);
        }
        for (a, s) in y.iter_mut().zip(&self.signs) {
            *a *= s;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n, self.n);
        let mut e = vec![0.0; self.n];
        for j in 0..self.n {
            e[j] = 1.0;
            let col = self.apply(&e);
            q.set_column(j, &nalgebra::DVector::from_vec(col));
            e[j] = 0.0;
        }
        q
    }
}

/// Eigenvalues of a symmetric tridiagonal matrix by the implicit QL method.
///
/// `diag` has length `n`; `off[i]` couples rows `i` and `i + 1` (length
/// `n − 1`). Returns eigenvalues sorted descending.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if off.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            what: "tridiagonal off-diagonal",
            expected: n - 1,
            got: off.len(),
        });
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::NumericalFailure(
                    "tridiagonal QL did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(|a, b| b.total_cmp(a));
    Ok(d)
}
