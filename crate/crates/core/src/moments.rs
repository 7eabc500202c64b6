//! Marčhenko–Pastur machinery: the η-transform of `AᵀA`, its moment
//! sequence, and Gauss quadrature rules recovered from moments.
//!
//! Throughout, `δ = M/N` and the entries of `A` have variance `1/M`, so the
//! eigenvalue law of `AᵀA` has `μ₀ = μ₁ = 1` and `μ₂ = 1 + 1/δ`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Num, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest order for which the moment recursion runs in exact arithmetic.
pub const EXACT_MAX_ORDER: usize = 32;

/// Atom cap for the floating-point moment-to-Jacobi conversion.
pub const MAX_FLOAT_ATOMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AnalyticMp,
    EmpiricalTrace,
    UserSupplied,
}

/// Moments `μ_k = N⁻¹ Tr(Λᵏ)`, `k = 0..=K`, of the eigenvalue law of `AᵀA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSequence {
    pub delta: f64,
    pub mu: Vec<f64>,
    pub provenance: Provenance,
}

impl MomentSequence {
    pub fn new(delta: f64, mu: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if mu.is_empty() {
            return Err(Error::InvalidInput("empty moment sequence".into()));
        }
        if (mu[0] - 1.0).abs() > 1e-12 {
            return Err(Error::MomentSequenceInvalid(format!(
                "mu_0 must be 1, got {}",
                mu[0]
            )));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::MomentSequenceInvalid("non-finite moment".into()));
        }
        Ok(Self {
            delta,
            mu,
            provenance,
        })
    }

    /// Highest available order `K`.
    pub fn max_order(&self) -> usize {
        self.mu.len() - 1
    }

    /// Smallest eigenvalue of the largest square Hankel matrix `[μ_{i+j}]`
    /// the sequence supports.
    pub fn hankel_min_eigenvalue(&self) -> f64 {
        let size = self.max_order() / 2 + 1;
        let h = DMatrix::from_fn(size, size, |i, j| self.mu[i + j]);
        SymmetricEigen::new(h)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether the Hankel test admits a spectral measure, at the given tolerance.
    pub fn is_positive_semidefinite(&self, tol: f64) -> bool {
        self.hankel_min_eigenvalue() >= -tol
    }
}

/// η-transform of the Marčhenko–Pastur law of `AᵀA`: the positive root of
/// `x η² + (δ + x(δ − 1)) η − δ = 0`.
pub fn mp_eta(x: f64, delta: f64) -> Result<f64> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "eta argument must be >= 0, got {x}"
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let b = delta + x * (delta - 1.0);
    let disc = b * b + 4.0 * x * delta;
    let root = disc.sqrt();
    // Pick the form that avoids subtracting nearly equal numbers.
    let eta = if b >= 0.0 {
        2.0 * delta / (b + root)
    } else {
        (root - b) / (2.0 * x)
    };
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::NumericalFailure(format!(
            "no positive eta root at x={x}, delta={delta}"
        )));
    }
    Ok(eta)
}

/// Residual of the fixed-point equation `η(δ + x(η + δ − 1)) − δ`.
pub fn mp_eta_residual(eta: f64, x: f64, delta: f64) -> f64 {
    eta * (delta + x * (eta + delta - 1.0)) - delta
}

/// Power-series coefficients of the η-transform, via
/// `δ μ_k = Σ_{i+j=k−1} μ_i μ_j + (δ − 1) μ_{k−1}`, `μ₀ = 1`.
pub fn mp_moment_recursion<T: Num + Clone>(delta: &T, max_order: usize) -> Vec<T> {
    let mut mu = Vec::with_capacity(max_order + 1);
    mu.push(T::one());
    let shift = delta.clone() - T::one();
    for k in 1..=max_order {
        let mut acc = shift.clone() * mu[k - 1].clone();
        for i in 0..k {
            acc = acc + mu[i].clone() * mu[k - 1 - i].clone();
        }
        mu.push(acc / delta.clone());
    }
    mu
}

/// Exact Marčhenko–Pastur moments for a rational `δ`.
pub fn mp_moments_exact(delta: &BigRational, max_order: usize) -> Result<Vec<BigRational>> {
    if !delta.is_positive() {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok(mp_moment_recursion(delta, max_order))
}

/// Recovers a small-denominator rational equal to `v` as an `f64`, if any.
pub fn rational_from_f64(v: f64) -> Option<BigRational> {
    if !v.is_finite() {
        return None;
    }
    let r = Ratio::<i64>::approximate_float(v)?;
    if r.denom().abs() > 1_000_000 || (*r.numer() as f64 / *r.denom() as f64) != v {
        return None;
    }
    Some(BigRational::new(
        BigInt::from(*r.numer()),
        BigInt::from(*r.denom()),
    ))
}

/// Parses `"0.5"`, `"2"` or `"1/3"` into an exact rational.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num: BigInt = num.trim().parse().ok()?;
        let den: BigInt = den.trim().parse().ok()?;
        if den.is_zero() {
            return None;
        }
        return Some(BigRational::new(num, den));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let neg = int.starts_with('-');
        let digits = format!("{}{}", int.trim_start_matches(['-', '+']), frac);
        let num: BigInt = if digits.is_empty() {
            return None;
        } else {
            digits.parse().ok()?
        };
        let den = num_traits::pow(BigInt::from(10), frac.len());
        let r = BigRational::new(num, den);
        return Some(if neg { -r } else { r });
    }
    let n: BigInt = s.parse().ok()?;
    Some(BigRational::from_integer(n))
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Marčhenko–Pastur moments `μ₀..=μ_maxOrder`.
///
/// Runs the recursion in exact arithmetic when `δ` is a small-denominator
/// rational and the order is at most [`EXACT_MAX_ORDER`]; otherwise in `f64`.
pub fn mp_moments(delta: f64, max_order: usize) -> Result<MomentSequence> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let mu = match rational_from_f64(delta) {
        Some(d) if max_order <= EXACT_MAX_ORDER => mp_moment_recursion(&d, max_order)
            .iter()
            .map(rational_to_f64)
            .collect(),
        _ => mp_moment_recursion(&delta, max_order),
    };
    MomentSequence::new(delta, mu, Provenance::AnalyticMp)
}

/// Support `[(1 − δ^{-1/2})², (1 + δ^{-1/2})²]` of the non-zero part of the law.
pub fn mp_support(delta: f64) -> (f64, f64) {
    let c = delta.recip().sqrt();
    ((1.0 - c).powi(2), (1.0 + c).powi(2))
}

/// Recurrence coefficients `(α_k, β_k)`, `k < n`, of the monic orthogonal
/// polynomials of the measure with moments `mu`, by the classical Chebyshev
/// algorithm. `β₀` is the total mass.
pub fn chebyshev_recurrence<T>(mu: &[T], n: usize) -> Result<(Vec<T>, Vec<T>)>
where
    T: Num + Clone + PartialOrd,
{
    if n == 0 {
        return Err(Error::InvalidParameter("at least one atom required".into()));
    }
    if mu.len() < 2 * n {
        return Err(Error::InsufficientMoments {
            required: 2 * n - 1,
            available: mu.len().saturating_sub(1),
        });
    }
    if !(mu[0] > T::zero()) {
        return Err(Error::MomentSequenceInvalid("mu_0 must be positive".into()));
    }
    let len = 2 * n;
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut prev: Vec<T> = vec![T::zero(); len];
    let mut cur: Vec<T> = mu[..len].to_vec();
    alpha.push(mu[1].clone() / mu[0].clone());
    beta.push(mu[0].clone());
    for k in 1..n {
        let mut next = vec![T::zero(); len];
        for l in k..(len - k) {
            next[l] = cur[l + 1].clone()
                - alpha[k - 1].clone() * cur[l].clone()
                - beta[k - 1].clone() * prev[l].clone();
        }
        if !(next[k] > T::zero()) {
            return Err(Error::MomentSequenceInvalid(format!(
                "Hankel matrix of order {} is not positive definite",
                k + 1
            )));
        }
        alpha.push(next[k + 1].clone() / next[k].clone() - cur[k].clone() / cur[k - 1].clone());
        beta.push(next[k].clone() / cur[k - 1].clone());
        prev = cur;
        cur = next;
    }
    Ok((alpha, beta))
}

/// Gauss rule from a Jacobi matrix: nodes are eigenvalues, weights are
/// `β₀` times squared first eigenvector components. Sorted by node.
pub fn gauss_from_recurrence(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = alpha.len();
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[j].sqrt()
        } else if j + 1 == i {
            beta[i].sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                eig.eigenvalues[i],
                beta[0] * eig.eigenvectors[(0, i)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `n_atoms`-point discrete measure reproducing `μ₀..μ_{2n−1}` of `ms`.
pub fn quadrature_from_moments(
    ms: &MomentSequence,
    n_atoms: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_atoms > MAX_FLOAT_ATOMS {
        return Err(Error::InvalidParameter(format!(
            "floating-point moment inversion is capped at {MAX_FLOAT_ATOMS} atoms; use exact moments"
        )));
    }
    let (alpha, beta) = chebyshev_recurrence(&ms.mu, n_atoms)?;
    Ok(gauss_from_recurrence(&alpha, &beta))
}

/// As [`quadrature_from_moments`] with the recurrence run in exact arithmetic.
pub fn quadrature_from_exact_moments(
    mu: &[BigRational],
    n_atoms: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (alpha, beta) = chebyshev_recurrence(mu, n_atoms)?;
    let alpha: Vec<f64> = alpha.iter().map(rational_to_f64).collect();
    let beta: Vec<f64> = beta.iter().map(rational_to_f64).collect();
    Ok(gauss_from_recurrence(&alpha, &beta))
}

/// `Σ_i w_i v_iᵏ` for `k = 0..=max_order`.
pub fn discrete_moments(values: &[f64], weights: &[f64], max_order: usize) -> Vec<f64> {
    (0..=max_order)
        .map(|k| {
            values
                .iter()
                .zip(weights)
                .map(|(v, w)| w * v.powi(k as i32))
                .sum()
        })
        .collect()
}

pub fn one_rational() -> BigRational {
    BigRational::one()
}
