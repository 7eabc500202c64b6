//! Orthogonally invariant sensing operators `A = U Σ Vᵀ` with controlled
//! singular-value spectra.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::ChiSquared;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, seeded_rng, Orthogonal};
use crate::moments::{self, MomentSequence, Provenance};

pub(crate) const STREAM_U: u64 = 1;
pub(crate) const STREAM_V: u64 = 2;
pub(crate) const STREAM_SPECTRUM: u64 = 3;

/// How the singular values of an operator are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumKind {
    /// Singular values of an i.i.d. Gaussian matrix with entry variance `1/M`.
    MarchenkoPasturSampled,
    /// Eigenvalues of `AᵀA` restricted to its `min(M, N)` singular modes,
    /// placed with multiplicities proportional to `weights`.
    DiscreteAtoms { values: Vec<f64>, weights: Vec<f64> },
    /// Singular values spaced geometrically with `σ_max/σ_min = condition_number`,
    /// scaled so that `N⁻¹ Tr(Λ) = 1`.
    Geometric { condition_number: f64 },
    /// Deterministic atoms whose moments agree with Marčhenko–Pastur through `order`.
    MomentMatched { order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    #[serde(flatten)]
    pub kind: SpectrumKind,
    pub delta: f64,
}

impl SpectrumSpec {
    pub fn marchenko_pastur(delta: f64) -> Self {
        Self {
            kind: SpectrumKind::MarchenkoPasturSampled,
            delta,
        }
    }

    pub fn geometric(condition_number: f64, delta: f64) -> Self {
        Self {
            kind: SpectrumKind::Geometric { condition_number },
            delta,
        }
    }

    pub fn discrete(values: Vec<f64>, weights: Vec<f64>, delta: f64) -> Self {
        Self {
            kind: SpectrumKind::DiscreteAtoms { values, weights },
            delta,
        }
    }

    pub fn moment_matched(order: usize, delta: f64) -> Self {
        Self {
            kind: SpectrumKind::MomentMatched { order },
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        match &self.kind {
            SpectrumKind::MarchenkoPasturSampled => Ok(()),
            SpectrumKind::DiscreteAtoms { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(Error::InvalidSpectrum(
                        "atoms need equally many values and weights".into(),
                    ));
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::InvalidSpectrum(
                        "atom values must be finite and >= 0".into(),
                    ));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::InvalidSpectrum("atom weights must be >= 0".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidSpectrum(format!(
                        "atom weights sum to {total}, not 1"
                    )));
                }
                Ok(())
            }
            SpectrumKind::Geometric { condition_number } => {
                if !(*condition_number >= 1.0 && condition_number.is_finite()) {
                    return Err(Error::InvalidSpectrum(format!(
                        "condition number must be >= 1, got {condition_number}"
                    )));
                }
                Ok(())
            }
            SpectrumKind::MomentMatched { order } => {
                if *order == 0 {
                    return Err(Error::InvalidSpectrum(
                        "moment-matched order must be >= 1".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Nearest-integer `δ·n`, ties rounding up.
pub fn measurement_count(delta: f64, n: usize) -> usize {
    (delta * n as f64 + 0.5).floor() as usize
}

/// An `M × N` sensing matrix kept in SVD form.
#[derive(Debug, Clone)]
pub struct SensingOperator {
    n: usize,
    m: usize,
    u: Orthogonal,
    v: Orthogonal,
    /// `min(M, N)` singular values, descending.
    sigma: Vec<f64>,
    /// Diagonal of `Λ = ΣᵀΣ`, length `N`, zero padded.
    lambda: Vec<f64>,
    delta: f64,
}

impl SensingOperator {
    /// Assembles an operator from its factors. `sigma` is sorted descending.
    pub fn from_parts(u: Orthogonal, v: Orthogonal, mut sigma: Vec<f64>) -> Result<Self> {
        let (m, n) = (u.dim(), v.dim());
        if sigma.len() != m.min(n) {
            return Err(Error::DimensionMismatch {
                what: "singular values",
                expected: m.min(n),
                got: sigma.len(),
            });
        }
        if sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidSpectrum(
                "singular values must be finite and >= 0".into(),
            ));
        }
        sigma.sort_by(|a, b| b.total_cmp(a));
        let mut lambda = vec![0.0; n];
        for (l, s) in lambda.iter_mut().zip(&sigma) {
            *l = s * s;
        }
        Ok(Self {
            n,
            m,
            u,
            v,
            sigma,
            lambda,
            delta: m as f64 / n as f64,
        })
    }

    /// The `n × n` identity (row-orthogonal, all singular values 1).
    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDimension("operator with N = 0".into()));
        }
        Self::from_parts(
            Orthogonal::identity(n),
            Orthogonal::identity(n),
            vec![1.0; n],
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn u(&self) -> &Orthogonal {
        &self.u
    }

    pub fn v(&self) -> &Orthogonal {
        &self.v
    }

    /// `Σ t` for `t ∈ ℝᴺ`, giving a length-`M` vector.
    pub fn sigma_apply(&self, t: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for ((o, s), ti) in out.iter_mut().zip(&self.sigma).zip(t) {
            *o = s * ti;
        }
        out
    }

    /// `Σᵀ s` for `s ∈ ℝᴹ`, giving a length-`N` vector.
    pub fn sigma_transpose_apply(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for ((o, sg), si) in out.iter_mut().zip(&self.sigma).zip(s) {
            *o = sg * si;
        }
        out
    }

    /// `A x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "operator apply: length mismatch");
        self.u.apply(&self.sigma_apply(&self.v.apply_transpose(x)))
    }

    /// `Aᵀ z`
    pub fn apply_transpose(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.m, "operator apply: length mismatch");
        self.v
            .apply(&self.sigma_transpose_apply(&self.u.apply_transpose(z)))
    }

    /// Dense `A`, for small sizes.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let u = self.u.to_dense();
        let v = self.v.to_dense();
        let mut s = DMatrix::zeros(self.m, self.n);
        for (i, sg) in self.sigma.iter().enumerate() {
            s[(i, i)] = *sg;
        }
        u * s * v.transpose()
    }
}

/// Haar-distributed `n × n` orthogonal matrix, as a dense matrix.
pub fn sample_haar_orthogonal(n: usize, seed: u64) -> Result<DMatrix<f64>> {
    Ok(Orthogonal::sample_haar(n, &mut seeded_rng(seed, 0))?.to_dense())
}

/// Splits `total` items into groups proportional to `weights` by the
/// largest-remainder rule (ties go to the lower index).
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn atoms_to_sigma(values: &[f64], weights: &[f64], r: usize) -> Vec<f64> {
    let counts = apportion(weights, r);
    let mut sigma = Vec::with_capacity(r);
    for (v, c) in values.iter().zip(counts) {
        sigma.extend(std::iter::repeat_n(v.max(0.0).sqrt(), c));
    }
    sigma
}

/// Singular values of an `m × n` matrix of i.i.d. `N(0, 1/m)` entries.
///
/// Uses the Householder bidiagonal form of a Gaussian matrix, whose entries
/// are independent chi variables, so only an `O(r²)` tridiagonal
/// eigenproblem is solved.
pub fn sample_gaussian_singular_values<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (r, s) = (m.min(n), m.max(n));
    let chi = |k: usize, rng: &mut R| -> f64 {
        if k == 0 {
            return 0.0;
        }
        rng.sample(ChiSquared::new(k as f64).expect("positive degrees of freedom"))
            .sqrt()
    };
    let d: Vec<f64> = (0..r).map(|i| chi(s - i, rng)).collect();
    let e: Vec<f64> = (1..r).map(|i| chi(r - i, rng)).collect();
    // B lower bidiagonal; eigenvalues of B Bᵀ.
    let diag: Vec<f64> = (0..r)
        .map(|i| d[i] * d[i] + if i > 0 { e[i - 1] * e[i - 1] } else { 0.0 })
        .collect();
    let off: Vec<f64> = (0..r.saturating_sub(1)).map(|i| d[i] * e[i]).collect();
    let eig = linalg::tridiagonal_eigenvalues(&diag, &off)?;
    let scale = (m as f64).recip();
    Ok(eig
        .into_iter()
        .map(|l| (l.max(0.0) * scale).sqrt())
        .collect())
}

fn mix_seeds(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds of one trial: left rotation, right rotation and problem instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub u: u64,
    pub v: u64,
    pub instance: u64,
}

/// Derives a trial's seeds from a user seed and the dimension, so sweeps over
/// `N` with the same user seed draw unrelated randomness.
pub fn trial_seeds(seed: u64, n: usize) -> TrialSeeds {
    let base = mix_seeds(seed, n as u64);
    TrialSeeds {
        u: mix_seeds(base, 1),
        v: mix_seeds(base, 2),
        instance: mix_seeds(base, 3),
    }
}

/// Atoms and weights of the non-zero part of a moment-matched spectrum with
/// `r` singular modes out of `n`.
fn moment_matched_atoms(
    order: usize,
    delta: f64,
    n: usize,
    r: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_atoms = order / 2 + 1;
    let max_order = 2 * n_atoms - 1;
    // ν_k = (N/r) μ_k for k ≥ 1 describes the r possibly non-zero eigenvalues.
    if let Some(d) =
        moments::rational_from_f64(delta).filter(|_| max_order <= moments::EXACT_MAX_ORDER)
    {
        let ratio = num_rational::BigRational::new(n.into(), r.into());
        let mut nu = moments::mp_moments_exact(&d, max_order)?;
        for v in nu.iter_mut().skip(1) {
            *v = v.clone() * ratio.clone();
        }
        moments::quadrature_from_exact_moments(&nu, n_atoms)
    } else {
        let mut ms = moments::mp_moments(delta, max_order)?;
        let ratio = n as f64 / r as f64;
        for v in ms.mu.iter_mut().skip(1) {
            *v *= ratio;
        }
        let nu = MomentSequence::new(delta, ms.mu, Provenance::UserSupplied)?;
        moments::quadrature_from_moments(&nu, n_atoms)
    }
}

fn singular_values(
    spec: &SpectrumSpec,
    n: usize,
    seed_u: u64,
    seed_v: u64,
) -> Result<(usize, Vec<f64>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidDimension("signal dimension N = 0".into()));
    }
    let m = measurement_count(spec.delta, n);
    if m == 0 {
        return Err(Error::InvalidDimension(format!(
            "round(delta * n) = 0 for delta={}, n={n}",
            spec.delta
        )));
    }
    let r = m.min(n);
    let sigma = match &spec.kind {
        SpectrumKind::MarchenkoPasturSampled => {
            let mut rng = seeded_rng(mix_seeds(seed_u, seed_v), STREAM_SPECTRUM);
            sample_gaussian_singular_values(m, n, &mut rng)?
        }
        SpectrumKind::DiscreteAtoms { values, weights } => atoms_to_sigma(values, weights, r),
        SpectrumKind::Geometric { condition_number } => {
            let mut sigma: Vec<f64> = if r == 1 {
                vec![1.0]
            } else {
                (0..r)
                    .map(|i| condition_number.powf(-(i as f64) / (r - 1) as f64))
                    .collect()
            };
            let trace: f64 = sigma.iter().map(|s| s * s).sum::<f64>() / n as f64;
            let scale = trace.sqrt().recip();
            sigma.iter_mut().for_each(|s| *s *= scale);
            sigma
        }
        SpectrumKind::MomentMatched { order } => {
            let (values, weights) = moment_matched_atoms(*order, spec.delta, n, r)?;
            if values.iter().any(|v| *v < -1e-12) {
                return Err(Error::InvalidSpectrum(
                    "moment matching produced a negative atom".into(),
                ));
            }
            atoms_to_sigma(&values, &weights, r)
        }
    };
    Ok((m, sigma))
}

pub fn build_operator(
    spec: &SpectrumSpec,
    n: usize,
    seed_u: u64,
    seed_v: u64,
) -> Result<SensingOperator> {
    let (m, sigma) = singular_values(spec, n, seed_u, seed_v)?;
    let u = Orthogonal::sample_haar(m, &mut seeded_rng(seed_u, STREAM_U))?;
    let v = Orthogonal::sample_haar(n, &mut seeded_rng(seed_v, STREAM_V))?;
    SensingOperator::from_parts(u, v, sigma)
}

/// The length-`N` eigenvalue vector of `AᵀA` that [`build_operator`] would
/// produce with the same arguments, without sampling the rotations.
pub fn spectrum_eigenvalues(
    spec: &SpectrumSpec,
    n: usize,
    seed_u: u64,
    seed_v: u64,
) -> Result<Vec<f64>> {
    let (_, mut sigma) = singular_values(spec, n, seed_u, seed_v)?;
    sigma.sort_by(|a, b| b.total_cmp(a));
    let mut lambda: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    lambda.resize(n, 0.0);
    Ok(lambda)
}

/// `μ_k = N⁻¹ Σ_i λ_iᵏ` over all `N` eigenvalues of `AᵀA` (zeros included).
pub fn empirical_moments(op: &SensingOperator, max_order: usize) -> Result<MomentSequence> {
    if max_order == 0 {
        return Err(Error::InvalidParameter("max order must be >= 1".into()));
    }
    let n = op.n() as f64;
    let mut mu = vec![1.0];
    let mut powers: Vec<f64> = op.sigma().iter().map(|s| s * s).collect();
    for _ in 1..=max_order {
        mu.push(powers.iter().sum::<f64>() / n);
        for (p, s) in powers.iter_mut().zip(op.sigma()) {
            *p *= s * s;
        }
    }
    MomentSequence::new(op.delta(), mu, Provenance::EmpiricalTrace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_orthogonality_error(q: &DMatrix<f64>) -> f64 {
        let g = q.transpose() * q;
        let n = g.nrows();
        (g - DMatrix::<f64>::identity(n, n)).abs().max()
    }

    #[test]
    fn haar_is_orthogonal() {
        let q = sample_haar_orthogonal(64, 7).unwrap();
        assert!(max_orthogonality_error(&q) < 1e-10);
        let one = sample_haar_orthogonal(1, 99).unwrap();
        assert_eq!(one[(0, 0)].abs(), 1.0);
        assert!(sample_haar_orthogonal(0, 1).is_err());
    }

    #[test]
    fn measurement_rounding() {
        assert_eq!(measurement_count(0.5, 1024), 512);
        assert_eq!(measurement_count(0.5, 3), 2);
        assert_eq!(measurement_count(0.1, 4), 0);
    }

    #[test]
    fn discrete_unit_spectrum_is_row_orthogonal() {
        let spec = SpectrumSpec::discrete(vec![1.0], vec![1.0], 1.0);
        let op = build_operator(&spec, 32, 1, 2).unwrap();
        assert!(op.sigma().iter().all(|s| *s == 1.0));
        let a = op.to_dense();
        let g = &a * a.transpose();
        assert!((g - DMatrix::<f64>::identity(32, 32)).abs().max() < 1e-10);
    }

    #[test]
    fn factored_apply_matches_dense() {
        let op = build_operator(&SpectrumSpec::geometric(10.0, 0.6), 20, 3, 4).unwrap();
        let a = op.to_dense();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).cos()).collect();
        let z: Vec<f64> = (0..op.m()).map(|i| (i as f64 * 0.7).sin()).collect();
        let ax = op.apply(&x);
        let atz = op.apply_transpose(&z);
        let dax = &a * nalgebra::DVector::from_vec(x);
        let datz = a.transpose() * nalgebra::DVector::from_vec(z);
        let scale = dax.norm();
        for i in 0..op.m() {
            assert!((ax[i] - dax[i]).abs() < 1e-10 * scale);
        }
        for i in 0..20 {
            assert!((atz[i] - datz[i]).abs() < 1e-10 * datz.norm());
        }
        assert!(max_orthogonality_error(&op.u().to_dense()) < 1e-10);
        assert!(max_orthogonality_error(&op.v().to_dense()) < 1e-10);
    }

    #[test]
    fn geometric_normalization_and_condition() {
        let op = build_operator(&SpectrumSpec::geometric(100.0, 0.5), 200, 0, 0).unwrap();
        let mu = empirical_moments(&op, 1).unwrap();
        assert!((mu.mu[1] - 1.0).abs() < 1e-12);
        let s = op.sigma();
        assert!((s[0] / s[s.len() - 1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            build_operator(&SpectrumSpec::marchenko_pastur(0.1), 4, 0, 0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(matches!(
            build_operator(&SpectrumSpec::discrete(vec![-1.0], vec![1.0], 1.0), 4, 0, 0),
            Err(Error::InvalidSpectrum(_))
        ));
        assert!(build_operator(
            &SpectrumSpec::discrete(vec![1.0, 2.0], vec![0.5, 0.6], 1.0),
            4,
            0,
            0
        )
        .is_err());
        assert!(build_operator(&SpectrumSpec::geometric(0.5, 1.0), 4, 0, 0).is_err());
        assert!(build_operator(&SpectrumSpec::moment_matched(0, 1.0), 4, 0, 0).is_err());
    }

    #[test]
    fn trace_arithmetic() {
        let op = SensingOperator::from_parts(
            Orthogonal::identity(2),
            Orthogonal::identity(2),
            vec![1.0, 2.0],
        )
        .unwrap();
        let mu = empirical_moments(&op, 2).unwrap();
        assert_eq!(mu.mu, vec![1.0, 2.5, 8.5]);
        let op = SensingOperator::identity(5).unwrap();
        assert_eq!(empirical_moments(&op, 4).unwrap().mu, vec![1.0; 5]);
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(apportion(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn deterministic_spectra_ignore_seeds() {
        for spec in [
            SpectrumSpec::geometric(30.0, 0.5),
            SpectrumSpec::moment_matched(4, 0.5),
        ] {
            let a = build_operator(&spec, 64, 1, 2).unwrap();
            let b = build_operator(&spec, 64, 10, 20).unwrap();
            assert_eq!(
                empirical_moments(&a, 6).unwrap().mu,
                empirical_moments(&b, 6).unwrap().mu
            );
        }
    }

    #[test]
    fn eigenvalues_without_rotations() {
        for spec in [
            SpectrumSpec::marchenko_pastur(0.5),
            SpectrumSpec::geometric(30.0, 2.0),
        ] {
            let op = build_operator(&spec, 48, 3, 4).unwrap();
            assert_eq!(spectrum_eigenvalues(&spec, 48, 3, 4).unwrap(), op.lambda());
        }
    }

    #[test]
    fn json_shape() {
        let spec: SpectrumSpec = serde_json::from_str(
            r#"{"kind": "geometric", "condition_number": 100.0, "delta": 0.5}"#,
        )
        .unwrap();
        assert_eq!(spec, SpectrumSpec::geometric(100.0, 0.5));
        let back = serde_json::to_value(&spec).unwrap();
        assert_eq!(back["kind"], "geometric");
        let mm: SpectrumSpec =
            serde_json::from_str(r#"{"kind": "moment_matched", "order": 8, "delta": 0.5}"#)
                .unwrap();
        assert_eq!(mm, SpectrumSpec::moment_matched(8, 0.5));
    }
}
