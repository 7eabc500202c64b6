//! Scalar state evolution for AMP and memory-1 OAMP.
//!
//! Expectations over `X + τZ` are taken per prior mixture component. A point
//! mass at `a` integrates `z ↦ (θ(a + τz) − a)²`; a Gaussian component of
//! variance `v` integrates over the observation `r = √(v + τ²) z` using the
//! closed-form posterior `X | r ~ N(kr, kτ²)`, `k = v/(v + τ²)`, so no
//! quadrature is spent on the signal itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Component, Denoiser, DenoiserSchedule, NoiseModel, Prior};
use crate::moments::{self, gauss_from_recurrence};

pub const DEFAULT_NODES: usize = 61;

/// Standard-normal integrals are truncated to `|z| ≤ Z_MAX`.
const Z_MAX: f64 = 12.0;
const MAX_PANELS: usize = 4096;
const VARIANCE_FLOOR: f64 = 1e-12;
const ALPHA_CEILING: f64 = 1.0 - 1e-12;

/// Gauss–Hermite rule for `E[f(Z)]`, `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let alpha = vec![0.0; n];
    let beta: Vec<f64> = (0..n)
        .map(|k| if k == 0 { 1.0 } else { k as f64 })
        .collect();
    gauss_from_recurrence(&alpha, &beta)
}

/// Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let alpha = vec![0.0; n];
    let beta: Vec<f64> = (0..n)
        .map(|k| {
            if k == 0 {
                2.0
            } else {
                let k = k as f64;
                k * k / (4.0 * k * k - 1.0)
            }
        })
        .collect();
    gauss_from_recurrence(&alpha, &beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// A single Gauss–Hermite rule. Exact for smooth integrands, but blind to
    /// features narrower than its node spacing.
    GaussHermite,
    /// Globally adaptive composite Gauss–Legendre on `[−Z_MAX, Z_MAX]` with
    /// the denoiser's kinks as panel boundaries.
    AdaptiveLegendre,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub rule: Rule,
    /// Nodes per rule (per panel when adaptive).
    pub nodes: usize,
    /// Relative tolerance of the adaptive rule.
    pub tol: f64,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            rule: Rule::AdaptiveLegendre,
            nodes: DEFAULT_NODES,
            tol: 1e-13,
        }
    }
}

impl Quadrature {
    pub fn gauss_hermite(nodes: usize) -> Self {
        Self {
            rule: Rule::GaussHermite,
            nodes,
            tol: 0.0,
        }
    }

    pub fn with_nodes(self, nodes: usize) -> Self {
        Self { nodes, ..self }
    }
}

/// Prepared rule: nodes and weights reused across calls.
struct Integrator {
    quad: Quadrature,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Integrator {
    fn new(quad: Quadrature) -> Result<Self> {
        if quad.nodes < 2 {
            return Err(Error::InvalidParameter(
                "quadrature needs at least 2 nodes".into(),
            ));
        }
        let (nodes, weights) = match quad.rule {
            Rule::GaussHermite => gauss_hermite(quad.nodes),
            Rule::AdaptiveLegendre => gauss_legendre(quad.nodes),
        };
        Ok(Self {
            quad,
            nodes,
            weights,
        })
    }

    fn panel<F: Fn(f64) -> [f64; 2]>(&self, f: &F, a: f64, b: f64) -> [f64; 2] {
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        let mut acc = [0.0; 2];
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let z = c + h * x;
            let v = f(z);
            let wt = w * h * std_normal_pdf(z);
            acc[0] += wt * v[0];
            acc[1] += wt * v[1];
        }
        acc
    }

    /// `E[f(Z)]` for a two-output integrand; `breaks` are kinks in `z`.
    fn expect<F: Fn(f64) -> [f64; 2]>(&self, f: F, breaks: &[f64]) -> Result<[f64; 2]> {
        if self.quad.rule == Rule::GaussHermite {
            let mut acc = [0.0; 2];
            for (z, w) in self.nodes.iter().zip(&self.weights) {
                let v = f(*z);
                acc[0] += w * v[0];
                acc[1] += w * v[1];
            }
            return Ok(acc);
        }
        let mut cuts = vec![-Z_MAX, 0.0, Z_MAX];
        cuts.extend(
            breaks
                .iter()
                .copied()
                .filter(|b| b.abs() < Z_MAX && *b != 0.0),
        );
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        // Global adaptivity: keep panels with their coarse and refined estimates
        // and split the worst until the summed error estimate is small enough.
        struct Panel {
            a: f64,
            b: f64,
            fine: [f64; 2],
            err: f64,
        }
        let make = |a: f64, b: f64| {
            let m = 0.5 * (a + b);
            let coarse = self.panel(&f, a, b);
            let l = self.panel(&f, a, m);
            let r = self.panel(&f, m, b);
            let fine = [l[0] + r[0], l[1] + r[1]];
            let err = (coarse[0] - fine[0]).abs().max((coarse[1] - fine[1]).abs());
            Panel { a, b, fine, err }
        };
        let mut panels: Vec<Panel> = cuts.windows(2).map(|w| make(w[0], w[1])).collect();
        loop {
            let total = panels
                .iter()
                .fold([0.0, 0.0], |s, p| [s[0] + p.fine[0], s[1] + p.fine[1]]);
            if !(total[0].is_finite() && total[1].is_finite()) {
                return Err(Error::NumericalFailure(
                    "non-finite integrand in state evolution".into(),
                ));
            }
            let err: f64 = panels.iter().map(|p| p.err).sum();
            let scale = total[0].abs().max(total[1].abs()).max(f64::MIN_POSITIVE);
            if err <= self.quad.tol * scale || err == 0.0 {
                return Ok(total);
            }
            if panels.len() >= MAX_PANELS {
                return Err(Error::NumericalFailure(format!(
                    "quadrature did not converge: error estimate {err:e} against {scale:e}"
                )));
            }
            let worst = panels
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let p = panels.swap_remove(worst);
            let m = 0.5 * (p.a + p.b);
            if m <= p.a || m >= p.b {
                return Err(Error::NumericalFailure("quadrature panel collapsed".into()));
            }
            panels.push(make(p.a, m));
            panels.push(make(m, p.b));
        }
    }
}

/// Denoiser error and divergence at effective noise `τ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    /// `E[(θ(X + τZ) − X)²]`
    pub mse: f64,
    /// `E[θ'(X + τZ)]`
    pub mean_deriv: f64,
}

fn stats_with(
    prior: &Prior,
    den: &Denoiser,
    tau_sq: f64,
    integ: &Integrator,
) -> Result<ScalarStats> {
    if !(tau_sq >= 0.0 && tau_sq.is_finite()) {
        return Err(Error::NumericalFailure(format!(
            "effective variance {tau_sq} is not a finite nonnegative value"
        )));
    }
    if matches!(den, Denoiser::BernoulliGaussianMmse { .. }) && tau_sq <= 0.0 {
        return Err(Error::InvalidParameter(
            "effective noise variance must be positive".into(),
        ));
    }
    let tau = tau_sq.sqrt();
    let kinks = den.breakpoints();
    let mut mse = 0.0;
    let mut deriv = 0.0;
    for (weight, comp) in prior.components() {
        let [m, d] = match comp {
            Component::Point(a) => {
                if tau == 0.0 {
                    let (v, dv) = den.eval(a, tau_sq);
                    [(v - a) * (v - a), dv]
                } else {
                    let breaks: Vec<f64> = kinks.iter().map(|k| (k - a) / tau).collect();
                    integ.expect(
                        |z| {
                            let (v, dv) = den.eval(a + tau * z, tau_sq);
                            [(v - a) * (v - a), dv]
                        },
                        &breaks,
                    )?
                }
            }
            Component::Gaussian(var) => {
                let s = (var + tau_sq).sqrt();
                let k = var / (var + tau_sq);
                let breaks: Vec<f64> = kinks.iter().map(|b| b / s).collect();
                integ.expect(
                    |z| {
                        let r = s * z;
                        let (v, dv) = den.eval(r, tau_sq);
                        [(v - k * r) * (v - k * r) + k * tau_sq, dv]
                    },
                    &breaks,
                )?
            }
        };
        mse += weight * m;
        deriv += weight * d;
    }
    if !(mse.is_finite() && deriv.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite state-evolution expectation".into(),
        ));
    }
    Ok(ScalarStats {
        mse,
        mean_deriv: deriv,
    })
}

pub fn denoiser_stats(
    prior: &Prior,
    den: &Denoiser,
    tau_sq: f64,
    quad: Quadrature,
) -> Result<ScalarStats> {
    stats_with(prior, den, tau_sq, &Integrator::new(quad)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    Amp,
    Oamp,
}

/// Spectrum information consumed by OAMP state evolution, through
/// `η̃(x) = ⟨(1 + xλ)⁻¹⟩` over the length-`N` eigenvalue vector of `AᵀA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectralTransform {
    MarchenkoPastur {
        delta: f64,
    },
    /// An explicit eigenvalue vector (e.g. `SensingOperator::lambda`).
    Empirical {
        lambda: Vec<f64>,
    },
    /// Eigenvalue atoms with weights summing to one.
    Atoms {
        values: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl SpectralTransform {
    fn validate(&self) -> Result<()> {
        match self {
            SpectralTransform::MarchenkoPastur { delta }
                if !(*delta > 0.0 && delta.is_finite()) =>
            {
                Err(Error::InvalidParameter(format!(
                    "delta must be positive, got {delta}"
                )))
            }
            SpectralTransform::Empirical { lambda }
                if lambda.is_empty() || lambda.iter().any(|l| !(*l >= 0.0)) =>
            {
                Err(Error::InvalidSpectrum(
                    "eigenvalues must be a nonempty nonnegative vector".into(),
                ))
            }
            SpectralTransform::Atoms { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(Error::InvalidSpectrum(
                        "atoms and weights must be nonempty and of equal length".into(),
                    ));
                }
                if values.iter().any(|v| !(*v >= 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::InvalidSpectrum(
                        "atoms and weights must be nonnegative".into(),
                    ));
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidSpectrum("weights must sum to one".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Mean LMMSE transfer `⟨f⟩ = ⟨v λ / (σ² + v λ)⟩` at prior variance `v`,
    /// with the per-mode denominator floored as in the runner.
    pub fn mean_transfer(&self, v: f64, noise_var: f64) -> Result<f64> {
        let term = |l: f64| v * l / (noise_var + v * l).max(VARIANCE_FLOOR);
        Ok(match self {
            SpectralTransform::MarchenkoPastur { delta } => {
                if noise_var > 0.0 {
                    1.0 - moments::mp_eta(v / noise_var, *delta)?
                } else {
                    delta.min(1.0)
                }
            }
            SpectralTransform::Empirical { lambda } => {
                lambda.iter().map(|&l| term(l)).sum::<f64>() / lambda.len() as f64
            }
            SpectralTransform::Atoms { values, weights } => {
                values.iter().zip(weights).map(|(&l, w)| w * term(l)).sum()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeCurve {
    pub kind: SeKind,
    pub prior: Prior,
    pub noise_variance: f64,
    /// `δ` for AMP; `None` when OAMP is driven by an explicit spectrum.
    pub delta: Option<f64>,
    pub schedule: DenoiserSchedule,
    pub iterations: usize,
    /// Denoiser input variance per iteration (`τ_t²` for AMP, `v_B` for OAMP).
    pub tau_sq: Vec<f64>,
    pub mse: Vec<f64>,
    /// Mean denoiser derivative per iteration.
    pub xi: Vec<f64>,
}

impl SeCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,tau_sq,mse\n");
        for (t, (a, b)) in self.tau_sq.iter().zip(&self.mse).enumerate() {
            out.push_str(&format!("{t},{a:.16e},{b:.16e}\n"));
        }
        out
    }
}

fn check_common(prior: &Prior, schedule: &DenoiserSchedule, iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(Error::InvalidParameter(
            "iteration count T must be >= 1".into(),
        ));
    }
    prior.validate()?;
    schedule.validate(iterations)
}

/// AMP state evolution: `τ₀² = σ² + E[X²]/δ`, `τ_{t+1}² = σ² + mse_t/δ`.
pub fn amp_se(
    prior: &Prior,
    noise: &NoiseModel,
    delta: f64,
    schedule: &DenoiserSchedule,
    iterations: usize,
    quad: Quadrature,
) -> Result<SeCurve> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    check_common(prior, schedule, iterations)?;
    let integ = Integrator::new(quad)?;
    let sigma2 = noise.variance;
    let mut tau_sq = Vec::with_capacity(iterations);
    let mut mse = Vec::with_capacity(iterations);
    let mut xi = Vec::with_capacity(iterations);
    let mut tau2 = sigma2 + prior.second_moment() / delta;
    for t in 0..iterations {
        let s = stats_with(prior, schedule.at(t)?, tau2, &integ)?;
        tau_sq.push(tau2);
        mse.push(s.mse);
        xi.push(s.mean_deriv);
        tau2 = sigma2 + s.mse / delta;
    }
    Ok(SeCurve {
        kind: SeKind::Amp,
        prior: *prior,
        noise_variance: sigma2,
        delta: Some(delta),
        schedule: schedule.clone(),
        iterations,
        tau_sq,
        mse,
        xi,
    })
}

/// Memory-1 OAMP (LMMSE filter) state evolution. With `v_A` the linear
/// module's prior variance (`E[X²]` initially):
///
/// ```text
/// ⟨f⟩  = 1 − η̃(v_A/σ²)
/// v_B  = v_A (1 − ⟨f⟩)/⟨f⟩
/// mse, α = E[(θ − X)²], E[θ'] at v_B
/// v_A ← v_B α/(1 − α)
/// ```
pub fn oamp_se(
    prior: &Prior,
    noise: &NoiseModel,
    spectrum: &SpectralTransform,
    schedule: &DenoiserSchedule,
    iterations: usize,
    quad: Quadrature,
) -> Result<SeCurve> {
    spectrum.validate()?;
    check_common(prior, schedule, iterations)?;
    let integ = Integrator::new(quad)?;
    let sigma2 = noise.variance;
    let mut tau_sq = Vec::with_capacity(iterations);
    let mut mse = Vec::with_capacity(iterations);
    let mut xi = Vec::with_capacity(iterations);
    let mut v_a = prior.second_moment();
    for t in 0..iterations {
        let f = spectrum.mean_transfer(v_a, sigma2)?.max(VARIANCE_FLOOR);
        let v_b = (v_a * (1.0 - f) / f).max(VARIANCE_FLOOR);
        let s = stats_with(prior, schedule.at(t)?, v_b, &integ)?;
        let alpha = s.mean_deriv.min(ALPHA_CEILING);
        tau_sq.push(v_b);
        mse.push(s.mse);
        xi.push(alpha);
        v_a = (v_b * alpha / (1.0 - alpha)).max(VARIANCE_FLOOR);
    }
    let delta = match spectrum {
        SpectralTransform::MarchenkoPastur { delta } => Some(*delta),
        _ => None,
    };
    Ok(SeCurve {
        kind: SeKind::Oamp,
        prior: *prior,
        noise_variance: sigma2,
        delta,
        schedule: schedule.clone(),
        iterations,
        tau_sq,
        mse,
        xi,
    })
}

/// Iterates AMP state evolution with a fixed denoiser until successive
/// `τ²` differ by less than `tol`, returning the converged curve.
pub fn amp_se_fixed_point(
    prior: &Prior,
    noise: &NoiseModel,
    delta: f64,
    denoiser: &Denoiser,
    tol: f64,
    max_iterations: usize,
    quad: Quadrature,
) -> Result<SeCurve> {
    let schedule = DenoiserSchedule::Fixed(*denoiser);
    let full = amp_se(prior, noise, delta, &schedule, max_iterations, quad)?;
    let stop = full
        .tau_sq
        .windows(2)
        .position(|w| (w[1] - w[0]).abs() < tol)
        .ok_or_else(|| {
            Error::NumericalFailure(format!("no fixed point within {max_iterations} iterations"))
        })?;
    let keep = stop + 2;
    Ok(SeCurve {
        iterations: keep,
        tau_sq: full.tau_sq[..keep].to_vec(),
        mse: full.mse[..keep].to_vec(),
        xi: full.xi[..keep].to_vec(),
        ..full
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg() -> Prior {
        Prior::BernoulliGaussian {
            sparsity: 0.1,
            variance: 1.0,
        }
    }

    fn bg_mmse() -> DenoiserSchedule {
        Denoiser::mmse_for(&bg()).unwrap().into()
    }

    #[test]
    fn hermite_integrates_polynomials() {
        let integ = Integrator::new(Quadrature::gauss_hermite(10)).unwrap();
        let [m2, m4] = integ.expect(|z| [z * z, z.powi(4)], &[]).unwrap();
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_matches_closed_form_soft_threshold_moment() {
        // E[(|Z| − 1)_+] = 2(φ(1) − (1 − Φ(1)))
        let integ = Integrator::new(Quadrature::default()).unwrap();
        let [v, _] = integ
            .expect(|z| [(z.abs() - 1.0).max(0.0), 0.0], &[-1.0, 1.0])
            .unwrap();
        let tail = 0.158_655_253_931_457_05;
        let expect = 2.0 * (std_normal_pdf(1.0) - tail);
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn initial_variance() {
        let prior = Prior::Gaussian { variance: 1.0 };
        let noise = NoiseModel::new(0.1).unwrap();
        let c = amp_se(
            &prior,
            &noise,
            0.5,
            &Denoiser::Linear { c: 0.5 }.into(),
            3,
            Quadrature::default(),
        )
        .unwrap();
        assert!((c.tau_sq[0] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn identity_denoiser_grows_geometrically() {
        let noise = NoiseModel::new(0.1).unwrap();
        let c = amp_se(
            &bg(),
            &noise,
            0.5,
            &Denoiser::Identity.into(),
            6,
            Quadrature::default(),
        )
        .unwrap();
        for t in 0..6 {
            assert!((c.mse[t] - c.tau_sq[t]).abs() <= 1e-12 * c.tau_sq[t]);
            if t > 0 {
                let expect = 0.1 + c.tau_sq[t - 1] / 0.5;
                assert!((c.tau_sq[t] - expect).abs() <= 1e-12 * expect);
            }
        }
    }

    #[test]
    fn gaussian_wiener_closed_form() {
        let prior = Prior::Gaussian { variance: 1.0 };
        let den = Denoiser::mmse_for(&prior).unwrap();
        for tau2 in [0.01, 0.3, 2.0] {
            let s = denoiser_stats(&prior, &den, tau2, Quadrature::default()).unwrap();
            assert!((s.mse - tau2 / (1.0 + tau2)).abs() < 1e-13);
            assert!((s.mean_deriv - 1.0 / (1.0 + tau2)).abs() < 1e-13);
        }
    }

    #[test]
    fn doubling_nodes_is_invisible() {
        let noise = NoiseModel::new(1e-4).unwrap();
        let a = amp_se(&bg(), &noise, 0.5, &bg_mmse(), 15, Quadrature::default()).unwrap();
        let b = amp_se(
            &bg(),
            &noise,
            0.5,
            &bg_mmse(),
            15,
            Quadrature::default().with_nodes(121),
        )
        .unwrap();
        for (x, y) in a.tau_sq.iter().zip(&b.tau_sq) {
            assert!((x - y).abs() < 1e-8 * y, "{x} vs {y}");
        }
    }

    #[test]
    fn monotone_in_noise() {
        let curves: Vec<SeCurve> = [1e-4, 1e-3, 1e-2]
            .iter()
            .map(|&s| {
                amp_se(
                    &bg(),
                    &NoiseModel::new(s).unwrap(),
                    0.5,
                    &bg_mmse(),
                    12,
                    Quadrature::default(),
                )
                .unwrap()
            })
            .collect();
        for w in curves.windows(2) {
            for t in 0..12 {
                assert!(w[0].tau_sq[t] < w[1].tau_sq[t]);
            }
        }
    }

    #[test]
    fn fixed_point_stays_flat() {
        let noise = NoiseModel::new(1e-3).unwrap();
        let den = Denoiser::mmse_for(&bg()).unwrap();
        let fp = amp_se_fixed_point(&bg(), &noise, 0.5, &den, 1e-12, 200, Quadrature::default())
            .unwrap();
        let longer = amp_se(
            &bg(),
            &noise,
            0.5,
            &den.into(),
            fp.iterations + 20,
            Quadrature::default(),
        )
        .unwrap();
        let last = *fp.tau_sq.last().unwrap();
        for v in &longer.tau_sq[fp.iterations..] {
            assert!((v - last).abs() < 1e-11);
        }
    }

    #[test]
    fn oamp_with_no_information() {
        let noise = NoiseModel::new(1e9).unwrap();
        let spec = SpectralTransform::MarchenkoPastur { delta: 0.5 };
        let c = oamp_se(&bg(), &noise, &spec, &bg_mmse(), 1, Quadrature::default()).unwrap();
        assert!((c.mse[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn unit_spectrum_linear_module_returns_noise_variance() {
        let noise = NoiseModel::new(0.05).unwrap();
        let unit = SpectralTransform::Atoms {
            values: vec![1.0],
            weights: vec![1.0],
        };
        let c = oamp_se(&bg(), &noise, &unit, &bg_mmse(), 5, Quadrature::default()).unwrap();
        for v in &c.tau_sq {
            assert!((v - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_transform_matches_atoms() {
        let lambda = vec![0.0, 0.0, 1.0, 3.0];
        let e = SpectralTransform::Empirical { lambda };
        let a = SpectralTransform::Atoms {
            values: vec![0.0, 1.0, 3.0],
            weights: vec![0.5, 0.25, 0.25],
        };
        let x = e.mean_transfer(0.7, 0.1).unwrap();
        let y = a.mean_transfer(0.7, 0.1).unwrap();
        assert!((x - y).abs() < 1e-15);
        assert!((x - 0.25 * (0.7 / 0.8 + 2.1 / 2.2)).abs() < 1e-15);
    }

    #[test]
    fn oamp_and_amp_share_fixed_point_on_mp() {
        let noise = NoiseModel::new(1e-4).unwrap();
        let amp = amp_se(&bg(), &noise, 0.5, &bg_mmse(), 60, Quadrature::default()).unwrap();
        let mp = SpectralTransform::MarchenkoPastur { delta: 0.5 };
        let oamp = oamp_se(&bg(), &noise, &mp, &bg_mmse(), 60, Quadrature::default()).unwrap();
        let (a, o) = (amp.mse.last().unwrap(), oamp.mse.last().unwrap());
        assert!((a - o).abs() < 1e-6 * a.max(1e-12) + 1e-12, "{a} vs {o}");
    }

    #[test]
    fn bad_inputs() {
        let noise = NoiseModel::new(0.1).unwrap();
        assert!(amp_se(&bg(), &noise, 0.0, &bg_mmse(), 3, Quadrature::default()).is_err());
        assert!(amp_se(&bg(), &noise, 0.5, &bg_mmse(), 0, Quadrature::default()).is_err());
        let short = DenoiserSchedule::PerIteration(vec![Denoiser::Identity]);
        assert!(amp_se(&bg(), &noise, 0.5, &short, 3, Quadrature::default()).is_err());
    }

    #[test]
    fn csv_shape() {
        let noise = NoiseModel::new(0.1).unwrap();
        let c = amp_se(&bg(), &noise, 0.5, &bg_mmse(), 2, Quadrature::default()).unwrap();
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,tau_sq,mse");
        assert_eq!(lines.len(), 3);
        let v: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, c.tau_sq[0]);
    }
}
