//! Signal priors, measurement noise, problem instances and separable
//! denoisers.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensembles::SensingOperator;
use crate::error::{Error, Result};
use crate::linalg::seeded_rng;

pub(crate) const STREAM_SIGNAL: u64 = 4;
pub(crate) const STREAM_NOISE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// Zero with probability `1 − sparsity`, otherwise `N(0, variance)`.
    BernoulliGaussian {
        sparsity: f64,
        variance: f64,
    },
    Gaussian {
        variance: f64,
    },
    /// `±1` with equal probability.
    Rademacher,
}

/// One mixture component of a prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Component {
    Point(f64),
    Gaussian(f64),
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::BernoulliGaussian { sparsity, variance } => {
                if !(sparsity > 0.0 && sparsity <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "sparsity must be in (0, 1], got {sparsity}"
                    )));
                }
                if !(variance > 0.0 && variance.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "variance must be positive, got {variance}"
                    )));
                }
            }
            Prior::Gaussian { variance } => {
                if !(variance > 0.0 && variance.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "variance must be positive, got {variance}"
                    )));
                }
            }
            Prior::Rademacher => {}
        }
        Ok(())
    }

    /// `E[X²]`
    pub fn second_moment(&self) -> f64 {
        match *self {
            Prior::BernoulliGaussian { sparsity, variance } => sparsity * variance,
            Prior::Gaussian { variance } => variance,
            Prior::Rademacher => 1.0,
        }
    }

    /// Weighted mixture components.
    pub fn components(&self) -> Vec<(f64, Component)> {
        match *self {
            Prior::BernoulliGaussian { sparsity, variance } if sparsity < 1.0 => {
                vec![
                    (1.0 - sparsity, Component::Point(0.0)),
                    (sparsity, Component::Gaussian(variance)),
                ]
            }
            Prior::BernoulliGaussian { variance, .. } | Prior::Gaussian { variance } => {
                vec![(1.0, Component::Gaussian(variance))]
            }
            Prior::Rademacher => vec![(0.5, Component::Point(1.0)), (0.5, Component::Point(-1.0))],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n)
            .map(|_| match *self {
                Prior::BernoulliGaussian { sparsity, variance } => {
                    let active = rng.random::<f64>() < sparsity;
                    let g: f64 = rng.sample(StandardNormal);
                    if active {
                        g * variance.sqrt()
                    } else {
                        0.0
                    }
                }
                Prior::Gaussian { variance } => {
                    rng.sample::<f64, _>(StandardNormal) * variance.sqrt()
                }
                Prior::Rademacher => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            })
            .collect()
    }
}

/// i.i.d. Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub variance: f64,
}

impl NoiseModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be >= 0, got {variance}"
            )));
        }
        Ok(Self { variance })
    }
}

/// A measurement `y = A x + w` together with its ground truth.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub op: Arc<SensingOperator>,
    pub seed: u64,
}

impl Instance {
    pub fn from_parts(op: Arc<SensingOperator>, x: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if x.len() != op.n() {
            return Err(Error::DimensionMismatch {
                what: "signal",
                expected: op.n(),
                got: x.len(),
            });
        }
        if w.len() != op.m() {
            return Err(Error::DimensionMismatch {
                what: "noise",
                expected: op.m(),
                got: w.len(),
            });
        }
        let mut y = op.apply(&x);
        for (yi, wi) in y.iter_mut().zip(&w) {
            *yi += wi;
        }
        Ok(Self {
            x,
            w,
            y,
            op,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }
}

pub fn sample_instance(
    prior: &Prior,
    noise: &NoiseModel,
    op: Arc<SensingOperator>,
    seed: u64,
) -> Result<Instance> {
    prior.validate()?;
    NoiseModel::new(noise.variance)?;
    let x = prior.sample(op.n(), &mut seeded_rng(seed, STREAM_SIGNAL));
    let sd = noise.variance.sqrt();
    let mut rng = seeded_rng(seed, STREAM_NOISE);
    let w: Vec<f64> = (0..op.m())
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut inst = Instance::from_parts(op, x, w)?;
    inst.seed = seed;
    Ok(inst)
}

/// Separable scalar estimators applied element-wise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Denoiser {
    SoftThreshold {
        lambda: f64,
    },
    /// Posterior mean under a Bernoulli–Gaussian prior in Gaussian noise of
    /// variance `τ²`. `sparsity = 1` gives the Gaussian (Wiener) estimator.
    BernoulliGaussianMmse {
        sparsity: f64,
        variance: f64,
    },
    Linear {
        c: f64,
    },
    Identity,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Denoiser {
    /// The Bayes estimator for `prior`, when one is available in closed form.
    pub fn mmse_for(prior: &Prior) -> Option<Self> {
        match *prior {
            Prior::BernoulliGaussian { sparsity, variance } => {
                Some(Denoiser::BernoulliGaussianMmse { sparsity, variance })
            }
            Prior::Gaussian { variance } => Some(Denoiser::BernoulliGaussianMmse {
                sparsity: 1.0,
                variance,
            }),
            Prior::Rademacher => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Denoiser::SoftThreshold { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => Err(
                Error::InvalidParameter(format!("threshold must be >= 0, got {lambda}")),
            ),
            Denoiser::BernoulliGaussianMmse { sparsity, variance } => {
                Prior::BernoulliGaussian { sparsity, variance }.validate()
            }
            Denoiser::Linear { c } if !c.is_finite() => {
                Err(Error::InvalidParameter("non-finite gain".into()))
            }
            _ => Ok(()),
        }
    }

    fn check_tau(&self, tau_sq: f64) -> Result<()> {
        if matches!(self, Denoiser::BernoulliGaussianMmse { .. })
            && !(tau_sq > 0.0 && tau_sq.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "effective noise variance must be positive, got {tau_sq}"
            )));
        }
        Ok(())
    }

    /// Value and derivative at a single point. The caller guarantees a valid
    /// `tau_sq` for the MMSE kind.
    pub fn eval(&self, r: f64, tau_sq: f64) -> (f64, f64) {
        match *self {
            Denoiser::SoftThreshold { lambda } => {
                if r > lambda {
                    (r - lambda, 1.0)
                } else if r < -lambda {
                    (r + lambda, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Denoiser::BernoulliGaussianMmse { sparsity, variance } => {
                let total = variance + tau_sq;
                let gain = variance / total;
                let curvature = variance / (tau_sq * total);
                let (pi, one_minus_pi) = if sparsity >= 1.0 {
                    (1.0, 0.0)
                } else {
                    let logit = (sparsity / (1.0 - sparsity)).ln()
                        + 0.5 * (tau_sq / total).ln()
                        + 0.5 * r * r * curvature;
                    (sigmoid(logit), sigmoid(-logit))
                };
                let value = pi * gain * r;
                let deriv = gain * pi * (1.0 + one_minus_pi * r * r * curvature);
                (value, deriv)
            }
            Denoiser::Linear { c } => (c * r, c),
            Denoiser::Identity => (r, 1.0),
        }
    }

    /// Points in `r` where the map is not smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            Denoiser::SoftThreshold { lambda } if lambda > 0.0 => vec![-lambda, lambda],
            _ => Vec::new(),
        }
    }

    /// Element-wise values and derivatives.
    pub fn denoise(&self, r: &[f64], tau_sq: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_tau(tau_sq)?;
        Ok(r.iter().map(|&v| self.eval(v, tau_sq)).unzip())
    }
}

/// One denoiser reused every iteration, or one per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserSchedule {
    Fixed(Denoiser),
    PerIteration(Vec<Denoiser>),
}

impl DenoiserSchedule {
    pub fn at(&self, t: usize) -> Result<&Denoiser> {
        match self {
            DenoiserSchedule::Fixed(d) => Ok(d),
            DenoiserSchedule::PerIteration(list) => list.get(t).ok_or_else(|| {
                Error::InvalidParameter(format!("no denoiser scheduled for iteration {t}"))
            }),
        }
    }

    pub fn validate(&self, iterations: usize) -> Result<()> {
        match self {
            DenoiserSchedule::Fixed(d) => d.validate(),
            DenoiserSchedule::PerIteration(list) => {
                if list.len() < iterations {
                    return Err(Error::InvalidParameter(format!(
                        "schedule has {} denoisers for {iterations} iterations",
                        list.len()
                    )));
                }
                list.iter().try_for_each(Denoiser::validate)
            }
        }
    }
}

impl From<Denoiser> for DenoiserSchedule {
    fn from(d: Denoiser) -> Self {
        DenoiserSchedule::Fixed(d)
    }
}

/// Arithmetic mean of a derivative vector.
pub fn onsager_coefficient(derivatives: &[f64]) -> Result<f64> {
    if derivatives.is_empty() {
        return Err(Error::InvalidInput("empty derivative vector".into()));
    }
    Ok(derivatives.iter().sum::<f64>() / derivatives.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{build_operator, SpectrumSpec};
    use crate::linalg::seeded_rng;

    #[test]
    fn soft_threshold_values() {
        let d = Denoiser::SoftThreshold { lambda: 1.0 };
        let (v, g) = d.denoise(&[2.0, -0.5, 3.0], 1.0).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 2.0]);
        assert_eq!(g, vec![1.0, 0.0, 1.0]);
        // kink
        assert_eq!(d.eval(1.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn gaussian_posterior_mean_is_wiener() {
        let d = Denoiser::BernoulliGaussianMmse {
            sparsity: 1.0,
            variance: 1.0,
        };
        for (r, tau) in [(0.3, 0.5), (-2.0, 0.1), (5.0, 3.0)] {
            let (v, g) = d.eval(r, tau);
            assert!((v - r / (1.0 + tau)).abs() < 1e-15);
            assert!((g - 1.0 / (1.0 + tau)).abs() < 1e-15);
        }
    }

    #[test]
    fn mmse_requires_positive_tau() {
        let d = Denoiser::BernoulliGaussianMmse {
            sparsity: 0.1,
            variance: 1.0,
        };
        assert!(matches!(
            d.denoise(&[1.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(d.denoise(&[1.0], -1.0).is_err());
    }

    #[test]
    fn mmse_limits() {
        let d = Denoiser::BernoulliGaussianMmse {
            sparsity: 0.1,
            variance: 1.0,
        };
        for r in [-3.0, -1.0, -0.5, -0.2, -0.1, 0.1, 0.2, 0.5, 1.0, 3.0] {
            assert!((d.eval(r, 1e-8).0 - r).abs() < 1e-3);
            assert!(d.eval(r, 1e12).0.abs() < 1e-6);
        }
    }

    #[test]
    fn onsager_mean() {
        assert!((onsager_coefficient(&[1.0, 0.0, 1.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(onsager_coefficient(&[0.0; 5]).unwrap(), 0.0);
        assert!(matches!(
            onsager_coefficient(&[]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn noiseless_instance() {
        let op = Arc::new(build_operator(&SpectrumSpec::marchenko_pastur(0.5), 64, 1, 2).unwrap());
        let prior = Prior::Gaussian { variance: 1.0 };
        let inst = sample_instance(&prior, &NoiseModel::new(0.0).unwrap(), op.clone(), 3).unwrap();
        let ax = op.apply(&inst.x);
        for (a, b) in ax.iter().zip(&inst.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_sample_statistics() {
        let x = Prior::Gaussian { variance: 1.0 }.sample(4096, &mut seeded_rng(1, 0));
        let p = x.iter().map(|v| v * v).sum::<f64>() / 4096.0;
        assert!((0.9..=1.1).contains(&p));
        let x = Prior::BernoulliGaussian {
            sparsity: 0.1,
            variance: 1.0,
        }
        .sample(8192, &mut seeded_rng(2, 0));
        let frac = x.iter().filter(|v| **v != 0.0).count() as f64 / 8192.0;
        assert!((0.08..=0.12).contains(&frac));
        let x = Prior::Rademacher.sample(100, &mut seeded_rng(3, 0));
        assert!(x.iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn json_tags() {
        let p: Prior =
            serde_json::from_str(r#"{"kind":"bernoulli_gaussian","sparsity":0.1,"variance":1.0}"#)
                .unwrap();
        assert_eq!(
            p,
            Prior::BernoulliGaussian {
                sparsity: 0.1,
                variance: 1.0
            }
        );
        let d: Denoiser =
            serde_json::from_str(r#"{"kind":"soft_threshold","lambda":1.5}"#).unwrap();
        assert_eq!(d, Denoiser::SoftThreshold { lambda: 1.5 });
        let d: Denoiser = serde_json::from_str(r#"{"kind":"identity"}"#).unwrap();
        assert_eq!(d, Denoiser::Identity);
    }
}
