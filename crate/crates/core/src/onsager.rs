//! Analytic Onsager-coefficient engine for AMP's error model.
//!
//! `g_{τ',τ}^{(k)} = ⟨Λᵏ ∂_{τ'} φ_τ⟩` for the AMP history function. After the
//! ξ-normalisation the table is stationary, `g_{τ',τ}^{(k)} = (a_τ/a_{τ'})
//! g_{τ−τ'}^{(k)}`, and the one-index sequence obeys
//!
//! ```text
//! g_0^{(k)} = μ_k − μ_{k+1}
//! g_1^{(k)} = −μ_{k+1}/δ + g_0^{(k)} − g_0^{(k+1)}
//! g_τ^{(k)} = (1 + 1/δ) g_{τ−1}^{(k)} − g_{τ−1}^{(k+1)} − g_{τ−2}^{(k)}/δ
//! ```
//!
//! AMP's error model sits inside the general long-memory model for `T`
//! iterations exactly when `g_τ^{(0)}` vanishes for `τ ≤ T`, which holds when
//! the moments agree with Marčhenko–Pastur far enough.

use num_rational::BigRational;
use num_traits::{Num, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{self, MomentSequence};

/// Rows `g_τ^{(k)}` for `τ = 0..=t_max`. Row `τ` holds every entry the
/// moments determine, `k = 0..=K−1−τ` where `K` is the highest moment order.
pub fn g_rows<T: Num + Clone>(mu: &[T], delta: &T, t_max: usize) -> Result<Vec<Vec<T>>> {
    let order = mu.len().saturating_sub(1);
    if order < t_max + 1 {
        return Err(Error::InsufficientMoments {
            required: t_max + 1,
            available: order,
        });
    }
    let inv = T::one() / delta.clone();
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(t_max + 1);
    rows.push(
        (0..order)
            .map(|k| mu[k].clone() - mu[k + 1].clone())
            .collect(),
    );
    if t_max >= 1 {
        let g0 = &rows[0];
        let row = (0..order - 1)
            .map(|k| {
                T::zero() - mu[k + 1].clone() * inv.clone() + g0[k].clone() - g0[k + 1].clone()
            })
            .collect();
        rows.push(row);
    }
    let coef = T::one() + inv.clone();
    for tau in 2..=t_max {
        let (prev, prev2) = (&rows[tau - 1], &rows[tau - 2]);
        let row = (0..order - tau)
            .map(|k| {
                coef.clone() * prev[k].clone()
                    - prev[k + 1].clone()
                    - prev2[k].clone() * inv.clone()
            })
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

/// Two-index table `g_{τ',τ}^{(k)}` with explicit ξ weights, indexed
/// `[τ][τ'][k]` for `τ' ≤ τ ≤ t_max`. `xi[s]` is `ξ_s`; `xi ≡ 1` gives the
/// normalised table `g̃`.
pub fn g_two_index<T: Num + Clone>(
    mu: &[T],
    delta: &T,
    xi: &[T],
    t_max: usize,
) -> Result<Vec<Vec<Vec<T>>>> {
    let order = mu.len().saturating_sub(1);
    if order < t_max + 1 {
        return Err(Error::InsufficientMoments {
            required: t_max + 1,
            available: order,
        });
    }
    if t_max > 0 && xi.len() < t_max {
        return Err(Error::InvalidState(format!(
            "{} xi values supplied, {} needed",
            xi.len(),
            t_max
        )));
    }
    let inv = T::one() / delta.clone();
    let coef = T::one() + inv.clone();
    let mut table: Vec<Vec<Vec<T>>> = Vec::with_capacity(t_max + 1);
    for tau in 0..=t_max {
        let mut by_prime: Vec<Vec<T>> = Vec::with_capacity(tau + 1);
        for tp in 0..=tau {
            let len = order - (tau - tp);
            let entry: Vec<T> = if tp == tau {
                (0..len)
                    .map(|k| mu[k].clone() - mu[k + 1].clone())
                    .collect()
            } else if tp + 1 == tau {
                let diag = &table[tau - 1][tau - 1];
                (0..len)
                    .map(|k| {
                        xi[tau - 1].clone()
                            * (T::zero() - mu[k + 1].clone() * inv.clone() + diag[k].clone()
                                - diag[k + 1].clone())
                    })
                    .collect()
            } else {
                let (p1, p2) = (&table[tau - 1][tp], &table[tau - 2][tp]);
                (0..len)
                    .map(|k| {
                        xi[tau - 1].clone()
                            * (coef.clone() * p1[k].clone()
                                - p1[k + 1].clone()
                                - xi[tau - 2].clone() * inv.clone() * p2[k].clone())
                    })
                    .collect()
            };
            by_prime.push(entry);
        }
        table.push(by_prime);
    }
    Ok(table)
}

/// Triangular g-table over floating-point moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTable {
    pub delta: f64,
    pub rows: Vec<Vec<f64>>,
    pub source: MomentSequence,
}

impl GTable {
    pub fn t_max(&self) -> usize {
        self.rows.len() - 1
    }

    /// `g_τ^{(0)}` for every row.
    pub fn leading(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }
}

fn check_order(available: usize, t_max: usize) -> Result<()> {
    if t_max == 0 {
        return Err(Error::InvalidParameter(
            "iteration count T must be >= 1".into(),
        ));
    }
    if available < 2 * t_max {
        return Err(Error::InsufficientMoments {
            required: 2 * t_max,
            available,
        });
    }
    Ok(())
}

/// The g-table through row `T` from `μ₀..μ_{2T}` (or more).
pub fn g_table(ms: &MomentSequence, t_max: usize) -> Result<GTable> {
    check_order(ms.max_order(), t_max)?;
    let rows = g_rows(&ms.mu, &ms.delta, t_max)?;
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite g-table entry".into()));
    }
    Ok(GTable {
        delta: ms.delta,
        rows,
        source: ms.clone(),
    })
}

/// The g-table in exact rational arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGTable {
    pub delta: BigRational,
    pub rows: Vec<Vec<BigRational>>,
}

impl ExactGTable {
    pub fn leading(&self) -> Vec<BigRational> {
        self.rows.iter().map(|r| r[0].clone()).collect()
    }

    pub fn leading_f64(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| moments::rational_to_f64(&r[0]))
            .collect()
    }
}

pub fn g_table_exact(mu: &[BigRational], delta: &BigRational, t_max: usize) -> Result<ExactGTable> {
    check_order(mu.len().saturating_sub(1), t_max)?;
    if !delta.is_positive() {
        return Err(Error::InvalidParameter("delta must be positive".into()));
    }
    Ok(ExactGTable {
        delta: delta.clone(),
        rows: g_rows(mu, delta, t_max)?,
    })
}

/// Exact Marčhenko–Pastur g-table for a rational `δ`.
pub fn mp_g_table_exact(delta: &BigRational, t_max: usize) -> Result<ExactGTable> {
    let mu = moments::mp_moments_exact(delta, 2 * t_max)?;
    g_table_exact(&mu, delta, t_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// Every `|g_τ^{(0)}|`, `τ ≤ T`, is within tolerance.
    MpMatchedThrough { t: usize },
    /// First `τ` whose `|g_τ^{(0)}|` exceeds tolerance.
    DeviatesAt { tau: usize, magnitude: f64 },
}

impl Verdict {
    pub fn is_matched(&self) -> bool {
        matches!(self, Verdict::MpMatchedThrough { .. })
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::MpMatchedThrough { t } => write!(f, "MPMatchedThrough({t})"),
            Verdict::DeviatesAt { tau, magnitude } => write!(f, "DeviatesAt({tau}, {magnitude:?})"),
        }
    }
}

/// Verdict over the leading column `g_0^{(0)}, …, g_T^{(0)}`.
pub fn verdict_from_leading(leading: &[f64], tol: f64) -> Verdict {
    for (tau, g) in leading.iter().enumerate() {
        if !(g.abs() <= tol) {
            return Verdict::DeviatesAt {
                tau,
                magnitude: g.abs(),
            };
        }
    }
    Verdict::MpMatchedThrough {
        t: leading.len().saturating_sub(1),
    }
}

pub fn amp_convergence_verdict(ms: &MomentSequence, t_max: usize, tol: f64) -> Result<Verdict> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be >= 0, got {tol}"
        )));
    }
    Ok(verdict_from_leading(&g_table(ms, t_max)?.leading(), tol))
}

/// Exact verdict: magnitudes are compared as rationals before conversion.
pub fn exact_verdict(table: &ExactGTable, tol: f64) -> Verdict {
    for (tau, g) in table.leading().iter().enumerate() {
        let mag = g.abs();
        let exceeds = if tol == 0.0 {
            !mag.is_zero()
        } else {
            moments::rational_to_f64(&mag) > tol
        };
        if exceeds {
            return Verdict::DeviatesAt {
                tau,
                magnitude: moments::rational_to_f64(&mag),
            };
        }
    }
    Verdict::MpMatchedThrough {
        t: table.rows.len() - 1,
    }
}

/// Default verdict tolerance for moments estimated at dimension `n`.
pub fn empirical_tolerance(n: usize) -> f64 {
    10.0 / (n as f64).sqrt()
}

/// Branch of the η-transform continuous with `η(0) = 1`, for arguments
/// where the discriminant stays non-negative (including small negatives).
pub fn eta_principal(s: f64, delta: f64) -> Result<f64> {
    let b = delta + s * (delta - 1.0);
    let disc = b * b + 4.0 * s * delta;
    if disc < 0.0 || b <= 0.0 && s <= 0.0 {
        return Err(Error::NumericalFailure(format!(
            "eta has no real principal value at {s}"
        )));
    }
    if s >= 0.0 {
        return moments::mp_eta(s, delta);
    }
    Ok(2.0 * delta / (b + disc.sqrt()))
}

/// `P(x, y) = (δx − δ − xy) η̃(−x) + δ`
pub fn p_poly(x: f64, y: f64, delta: f64) -> Result<f64> {
    Ok((delta * x - delta - x * y) * eta_principal(-x, delta)? + delta)
}

/// `Q(x, y) = δy + (y − δ)(y − 1)x`
pub fn q_poly(x: f64, y: f64, delta: f64) -> f64 {
    delta * y + (y - delta) * (y - 1.0) * x
}

/// Positive root `x* = δy / ((y − δ)(y − 1))` of `Q(−x, y)`.
pub fn x_star(y: f64, delta: f64) -> f64 {
    delta * y / ((y - delta) * (y - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub y: f64,
    pub x_star: f64,
    pub q_residual: f64,
    pub p_residual: f64,
    pub eta_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub y: f64,
    pub series: f64,
    pub closed_form: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratingFunctionCheck {
    pub delta: f64,
    pub points: Vec<GridPoint>,
    pub series: Vec<SeriesPoint>,
    /// `G_0(0) = μ₀ − μ₁`.
    pub g0_at_origin: f64,
}

impl GeneratingFunctionCheck {
    pub fn max_eta_residual(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.eta_residual)
            .fold(0.0, f64::max)
    }

    pub fn max_p_residual(&self) -> f64 {
        self.points.iter().map(|p| p.p_residual).fold(0.0, f64::max)
    }

    pub fn max_series_error(&self) -> f64 {
        self.series.iter().map(|p| p.abs_error).fold(0.0, f64::max)
    }
}

/// Point at which the double series is compared with `P/Q`.
pub const SERIES_CHECK_X: f64 = 0.01;

/// Evenly spaced interior grid of `count` points in `(0, min{1, δ})`.
pub fn y_grid(delta: f64, count: usize) -> Vec<f64> {
    let hi = delta.min(1.0);
    (1..=count)
        .map(|i| hi * i as f64 / (count + 1) as f64)
        .collect()
}

/// Checks the generating-function identities on `y_grid`, and compares the
/// truncated double series `Σ_τ Σ_k g_τ^{(k)} xᵏ yᵗ` built from exact
/// Marčhenko–Pastur g-rows (`τ, k ≤ series_order`) against `P/Q` at
/// `x = SERIES_CHECK_X`.
pub fn generating_function_check(
    delta: f64,
    y_grid: &[f64],
    series_order: usize,
) -> Result<GeneratingFunctionCheck> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if series_order < 4 {
        return Err(Error::InvalidParameter("series order must be >= 4".into()));
    }
    let hi = delta.min(1.0);
    if let Some(y) = y_grid.iter().find(|y| !(**y > 0.0 && **y < hi)) {
        return Err(Error::InvalidParameter(format!(
            "y = {y} outside (0, {hi})"
        )));
    }
    let mut points = Vec::with_capacity(y_grid.len());
    for &y in y_grid {
        let xs = x_star(y, delta);
        let eta = moments::mp_eta(xs, delta)?;
        points.push(GridPoint {
            y,
            x_star: xs,
            q_residual: q_poly(-xs, y, delta).abs(),
            p_residual: p_poly(-xs, y, delta)?.abs(),
            eta_residual: (eta - (1.0 - y)).abs(),
        });
    }

    // Rows τ ≤ L need moments through L + L + 1.
    let exact_delta = moments::rational_from_f64(delta);
    let rows: Vec<Vec<f64>> = match &exact_delta {
        Some(d) => {
            let mu = moments::mp_moments_exact(d, 2 * series_order + 1)?;
            g_rows(&mu, d, series_order)?
                .iter()
                .map(|r| r.iter().map(moments::rational_to_f64).collect())
                .collect()
        }
        None => {
            let mu = moments::mp_moment_recursion(&delta, 2 * series_order + 1);
            g_rows(&mu, &delta, series_order)?
        }
    };
    let x = SERIES_CHECK_X;
    let g_tau = |tau: usize| -> f64 {
        let row = &rows[tau];
        let body: f64 = row
            .iter()
            .take(series_order + 1)
            .enumerate()
            .map(|(k, g)| g * x.powi(k as i32))
            .sum();
        let prev = if tau == 0 { 0.0 } else { rows[tau - 1][0] };
        body - prev / x
    };
    let mut series = Vec::with_capacity(y_grid.len());
    for &y in y_grid {
        let value: f64 = (0..=series_order)
            .map(|tau| g_tau(tau) * y.powi(tau as i32))
            .sum();
        let closed = p_poly(x, y, delta)? / q_poly(x, y, delta);
        series.push(SeriesPoint {
            x,
            y,
            series: value,
            closed_form: closed,
            abs_error: (value - closed).abs(),
        });
    }
    Ok(GeneratingFunctionCheck {
        delta,
        points,
        series,
        g0_at_origin: rows[0][0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{parse_rational, Provenance};
    use num_traits::One;

    fn q(s: &str) -> BigRational {
        parse_rational(s).unwrap()
    }

    #[test]
    fn first_two_rows_vanish_for_mp() {
        for d in [0.3, 0.5, 1.0, 2.5] {
            let t = g_table(&moments::mp_moments(d, 4).unwrap(), 2).unwrap();
            assert!(t.rows[0][0].abs() < 1e-14);
            assert!(t.rows[1][0].abs() < 1e-13);
        }
    }

    #[test]
    fn exact_mp_rows_vanish() {
        let table = mp_g_table_exact(&q("0.5"), 6).unwrap();
        assert!(table.leading().iter().all(|g| g.is_zero()));
        assert_eq!(
            exact_verdict(&table, 0.0),
            Verdict::MpMatchedThrough { t: 6 }
        );
    }

    #[test]
    fn perturbed_second_moment_shows_in_row_one() {
        let d = q("0.5");
        let eps = q("1/1000");
        let mut mu = moments::mp_moments_exact(&d, 4).unwrap();
        mu[2] = mu[2].clone() + eps.clone();
        let table = g_table_exact(&mu, &d, 2).unwrap();
        assert!(table.rows[0][0].is_zero());
        assert_eq!(table.rows[1][0], eps);
    }

    #[test]
    fn point_mass_deviates_at_one() {
        let ms = MomentSequence::new(1.0, vec![1.0; 5], Provenance::UserSupplied).unwrap();
        let t = g_table(&ms, 2).unwrap();
        assert_eq!(t.rows[0][0], 0.0);
        assert_eq!(t.rows[1][0], -1.0);
        assert_eq!(
            amp_convergence_verdict(&ms, 2, 1e-9).unwrap(),
            Verdict::DeviatesAt {
                tau: 1,
                magnitude: 1.0
            }
        );
    }

    #[test]
    fn insufficient_moments_named() {
        let ms = moments::mp_moments(0.5, 5).unwrap();
        match g_table(&ms, 3) {
            Err(Error::InsufficientMoments {
                required,
                available,
            }) => {
                assert_eq!((required, available), (6, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stationarity_of_normalised_table() {
        for d in ["1/2", "2", "3/7"] {
            let d = q(d);
            let mu = moments::mp_moments_exact(&d, 14).unwrap();
            // Perturb to make the table non-trivial.
            let mut mu_p = mu.clone();
            mu_p[3] = mu_p[3].clone() + q("1/10");
            let ones = vec![BigRational::one(); 6];
            let two = g_two_index(&mu_p, &d, &ones, 6).unwrap();
            let one = g_rows(&mu_p, &d, 6).unwrap();
            for tau in 0..=6 {
                for tp in 0..=tau {
                    let a = &two[tau][tp];
                    let b = &one[tau - tp];
                    for k in 0..a.len().min(b.len()) {
                        assert_eq!(a[k], b[k], "tau={tau} tp={tp} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn xi_scaling_of_two_index_table() {
        let d = q("1/2");
        let mut mu = moments::mp_moments_exact(&d, 14).unwrap();
        mu[4] = mu[4].clone() + q("3/10");
        let xi: Vec<BigRational> = ["7/10", "1/5", "13/10", "9/20", "9/10", "3/5"]
            .iter()
            .map(|s| q(s))
            .collect();
        let weighted = g_two_index(&mu, &d, &xi, 6).unwrap();
        let plain = g_two_index(&mu, &d, &vec![BigRational::one(); 6], 6).unwrap();
        let mut a = vec![BigRational::one()];
        for x in &xi {
            let next = a.last().unwrap() * x;
            a.push(next);
        }
        for tau in 0..=6 {
            for tp in 0..=tau {
                for k in 0..weighted[tau][tp].len() {
                    let expect = &a[tau] / &a[tp] * &plain[tau][tp][k];
                    assert_eq!(weighted[tau][tp][k], expect, "tau={tau} tp={tp} k={k}");
                }
            }
        }
    }

    #[test]
    fn truncation_soundness() {
        let d = q("1/2");
        let mut mu = moments::mp_moments_exact(&d, 12).unwrap();
        mu[5] = mu[5].clone() + q("1/3");
        let short = g_table_exact(&mu[..9], &d, 4).unwrap();
        let long = g_table_exact(&mu[..11], &d, 4).unwrap();
        assert_eq!(short.rows[4][0], long.rows[4][0]);
    }

    #[test]
    fn generating_function_at_known_point() {
        let xs = x_star(0.3, 0.5);
        assert!((xs - 1.071_428_571_428_571_4).abs() < 1e-14);
        let check = generating_function_check(0.5, &[0.3], 8).unwrap();
        assert!(check.points[0].eta_residual < 1e-12);
        assert!(check.points[0].p_residual < 1e-10);
        assert_eq!(check.g0_at_origin, 0.0);
    }

    #[test]
    fn generating_function_rejects_outside_grid() {
        assert!(generating_function_check(0.5, &[0.5], 8).is_err());
        assert!(generating_function_check(2.0, &[1.0], 8).is_err());
        assert!(generating_function_check(2.0, &[0.5], 3).is_err());
    }

    #[test]
    fn principal_branch_continues_series() {
        let d = 0.5;
        let mu = moments::mp_moments(d, 30).unwrap().mu;
        let s: f64 = mu
            .iter()
            .enumerate()
            .map(|(k, m)| 0.01f64.powi(k as i32) * m)
            .sum();
        assert!((eta_principal(-0.01, d).unwrap() - s).abs() < 1e-13);
    }
}
