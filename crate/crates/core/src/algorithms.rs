//! AMP and memory-1 OAMP recovery loops.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, mean, mean_sq_diff, norm_sq, sub};
use crate::models::{onsager_coefficient, DenoiserSchedule, Instance, NoiseModel, Prior};

/// Floor on the LMMSE per-mode denominator and on tracked variances.
pub const REGULARIZATION_FLOOR: f64 = 1e-12;
const ALPHA_CEILING: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Diverged,
}

impl RecordStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordStatus::Ok => "ok",
            RecordStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// `N⁻¹‖x̂_t − x‖²` of the iteration's denoiser output.
    pub mse: f64,
    /// Onsager coefficient (mean denoiser derivative).
    pub xi: f64,
    /// `M⁻¹‖z_t‖²` (AMP) or `M⁻¹‖y − A x_A‖²` (OAMP).
    pub residual_norm: f64,
    pub status: RecordStatus,
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize, reason: String },
}

impl RunStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub iterations: usize,
    pub schedule: DenoiserSchedule,
    /// A run is flagged diverged once its MSE exceeds this.
    pub divergence_threshold: f64,
    /// `E[X²]`, initialising OAMP's prior variance.
    pub prior_second_moment: f64,
    /// Noise variance assumed by OAMP's LMMSE filter.
    pub noise_variance: f64,
    /// AMP's `(ξ_{t−1}/δ) z_{t−1}` term; disable only for ablations.
    #[serde(default = "default_true")]
    pub onsager: bool,
    /// Keep per-iteration error vectors for cross-checks.
    #[serde(default)]
    pub record_internals: bool,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(
        iterations: usize,
        schedule: DenoiserSchedule,
        prior: &Prior,
        noise: &NoiseModel,
    ) -> Self {
        Self {
            iterations,
            schedule,
            divergence_threshold: 1e6 * prior.second_moment(),
            prior_second_moment: prior.second_moment(),
            noise_variance: noise.variance,
            onsager: true,
            record_internals: false,
        }
    }

    pub fn with_internals(mut self) -> Self {
        self.record_internals = true;
        self
    }

    pub fn without_onsager(mut self) -> Self {
        self.onsager = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "iteration count T must be >= 1".into(),
            ));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "divergence threshold must be positive".into(),
            ));
        }
        if !(self.prior_second_moment > 0.0 && self.prior_second_moment.is_finite()) {
            return Err(Error::InvalidParameter(
                "prior second moment must be positive".into(),
            ));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise variance must be >= 0".into(),
            ));
        }
        self.schedule.validate(self.iterations)
    }
}

/// Per-iteration AMP quantities, kept when `record_internals` is set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AmpInternals {
    /// `x_t + Aᵀz_t − x`
    pub h: Vec<Vec<f64>>,
    /// `τ_t² = M⁻¹‖z_t‖²` passed to the denoiser.
    pub tau_sq: Vec<f64>,
}

/// Per-iteration OAMP quantities, kept when `record_internals` is set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OampInternals {
    pub v_a: Vec<f64>,
    pub v_b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub mean_transfer: Vec<f64>,
    /// Denoiser input error `r_B − x`.
    pub h: Vec<Vec<f64>>,
    /// Denoiser output error `x̂ − x`.
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome<I> {
    pub trace: Vec<TraceRecord>,
    pub status: RunStatus,
    /// Last finite estimate.
    pub estimate: Vec<f64>,
    pub warnings: Vec<String>,
    pub internals: Option<I>,
}

impl<I> RunOutcome<I> {
    pub fn final_mse(&self) -> Option<f64> {
        self.trace.last().map(|r| r.mse)
    }

    pub fn mse_curve(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.mse).collect()
    }
}

fn check_instance(inst: &Instance) -> Result<()> {
    let op = &inst.op;
    if inst.x.len() != op.n() {
        return Err(Error::DimensionMismatch {
            what: "signal",
            expected: op.n(),
            got: inst.x.len(),
        });
    }
    if inst.y.len() != op.m() {
        return Err(Error::DimensionMismatch {
            what: "measurement",
            expected: op.m(),
            got: inst.y.len(),
        });
    }
    Ok(())
}

/// AMP with `x₀ = 0`, `z₋₁ = 0`:
///
/// ```text
/// z_t     = y − A x_t + (ξ_{t−1}/δ) z_{t−1}
/// x_{t+1} = θ_t(x_t + Aᵀ z_t),   ξ_t = ⟨θ'_t⟩
/// ```
///
/// `θ_t` receives `τ_t² = M⁻¹‖z_t‖²`.
pub fn run_amp(inst: &Instance, cfg: &RunConfig) -> Result<RunOutcome<AmpInternals>> {
    check_instance(inst)?;
    cfg.validate()?;
    let op = &inst.op;
    let (n, m) = (op.n(), op.m());
    let delta = op.delta();
    let mut x_t = vec![0.0; n];
    let mut z_prev = vec![0.0; m];
    let mut xi_prev = 0.0;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut internals = cfg.record_internals.then(AmpInternals::default);
    let mut status = RunStatus::Completed;
    for t in 0..cfg.iterations {
        let ax = op.apply(&x_t);
        let mut z = sub(&inst.y, &ax);
        if cfg.onsager && t > 0 {
            axpy(xi_prev / delta, &z_prev, &mut z);
        }
        let tau_sq = norm_sq(&z) / m as f64;
        let mut r = op.apply_transpose(&z);
        axpy(1.0, &x_t, &mut r);
        if !(all_finite(&r) && tau_sq.is_finite()) {
            status = RunStatus::Diverged {
                iteration: t,
                reason: "non-finite denoiser input".into(),
            };
            break;
        }
        let (x_next, deriv) = match cfg.schedule.at(t)?.denoise(&r, tau_sq) {
            Ok(v) => v,
            Err(e) => {
                status = RunStatus::Diverged {
                    iteration: t,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let xi = onsager_coefficient(&deriv)?;
        let mse = mean_sq_diff(&x_next, &inst.x);
        if !(all_finite(&x_next) && mse.is_finite() && xi.is_finite()) {
            status = RunStatus::Diverged {
                iteration: t,
                reason: "non-finite estimate".into(),
            };
            break;
        }
        if let Some(int) = internals.as_mut() {
            int.h.push(sub(&r, &inst.x));
            int.tau_sq.push(tau_sq);
        }
        let blown = mse > cfg.divergence_threshold;
        trace.push(TraceRecord {
            t,
            mse,
            xi,
            residual_norm: tau_sq,
            status: if blown {
                RecordStatus::Diverged
            } else {
                RecordStatus::Ok
            },
            extra: BTreeMap::new(),
        });
        x_t = x_next;
        z_prev = z;
        xi_prev = xi;
        if blown {
            status = RunStatus::Diverged {
                iteration: t,
                reason: format!("mse {mse:e} exceeds threshold"),
            };
            break;
        }
    }
    Ok(RunOutcome {
        trace,
        status,
        estimate: x_t,
        warnings: Vec::new(),
        internals,
    })
}

/// Memory-1 OAMP with the LMMSE filter. With prior variance `v_A` on the
/// linear-module input `x_A` (`x_A = 0`, `v_A = E[X²]` initially):
///
/// ```text
/// c_n    = v_A / (σ² + v_A λ_n),   f_n = c_n λ_n
/// x_post = x_A + V diag(c σ) Uᵀ (y − A x_A)
/// r_B    = (x_post − (1 − ⟨f⟩) x_A) / ⟨f⟩,   v_B = v_A (1 − ⟨f⟩)/⟨f⟩
/// x̂      = θ(r_B; v_B),   α = ⟨θ'⟩
/// x_A    = (x̂ − α r_B)/(1 − α),   v_A = v_B α/(1 − α)
/// ```
///
/// Both updates subtract the divergence-weighted input, so the errors
/// `r_B − x` and `x_A − x` follow the general error model with memory one.
pub fn run_oamp(inst: &Instance, cfg: &RunConfig) -> Result<RunOutcome<OampInternals>> {
    check_instance(inst)?;
    cfg.validate()?;
    let op = &inst.op;
    let (n, m) = (op.n(), op.m());
    let lambda = op.lambda();
    let sigma2 = cfg.noise_variance;
    let y_rot = op.u().apply_transpose(&inst.y);
    let sty = op.sigma_transpose_apply(&y_rot);

    let mut x_a = vec![0.0; n];
    let mut v_a = cfg.prior_second_moment;
    let mut estimate = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut internals = cfg.record_internals.then(OampInternals::default);
    let mut warnings: Vec<String> = Vec::new();
    let mut regularized = false;
    let mut status = RunStatus::Completed;

    for t in 0..cfg.iterations {
        let a = op.v().apply_transpose(&x_a);
        let resid: f64 = {
            let sa = op.sigma_apply(&a);
            y_rot
                .iter()
                .zip(&sa)
                .map(|(y, s)| (y - s) * (y - s))
                .sum::<f64>()
                / m as f64
        };
        let mut mean_f = 0.0;
        let mut post = a.clone();
        for i in 0..n {
            let den = sigma2 + v_a * lambda[i];
            let den = if den < REGULARIZATION_FLOOR {
                regularized = true;
                REGULARIZATION_FLOOR
            } else {
                den
            };
            let c = v_a / den;
            mean_f += c * lambda[i];
            post[i] += c * (sty[i] - lambda[i] * a[i]);
        }
        mean_f /= n as f64;
        if mean_f < REGULARIZATION_FLOOR {
            regularized = true;
            mean_f = REGULARIZATION_FLOOR;
        }
        let x_post = op.v().apply(&post);
        let mut r_b: Vec<f64> = x_post
            .iter()
            .zip(&x_a)
            .map(|(p, xa)| (p - (1.0 - mean_f) * xa) / mean_f)
            .collect();
        let mut v_b = v_a * (1.0 - mean_f) / mean_f;
        if v_b < REGULARIZATION_FLOOR {
            regularized = true;
            v_b = REGULARIZATION_FLOOR;
        }
        if !all_finite(&r_b) {
            status = RunStatus::Diverged {
                iteration: t,
                reason: "non-finite denoiser input".into(),
            };
            break;
        }
        let (x_hat, deriv) = match cfg.schedule.at(t)?.denoise(&r_b, v_b) {
            Ok(v) => v,
            Err(e) => {
                status = RunStatus::Diverged {
                    iteration: t,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let mut alpha = mean(&deriv);
        if alpha > ALPHA_CEILING {
            regularized = true;
            alpha = ALPHA_CEILING;
        }
        let mse = mean_sq_diff(&x_hat, &inst.x);
        if !(all_finite(&x_hat) && mse.is_finite() && alpha.is_finite()) {
            status = RunStatus::Diverged {
                iteration: t,
                reason: "non-finite estimate".into(),
            };
            break;
        }
        if let Some(int) = internals.as_mut() {
            int.v_a.push(v_a);
            int.v_b.push(v_b);
            int.alpha.push(alpha);
            int.mean_transfer.push(mean_f);
            int.h.push(sub(&r_b, &inst.x));
            int.q.push(sub(&x_hat, &inst.x));
        }
        let blown = mse > cfg.divergence_threshold;
        let mut extra = BTreeMap::new();
        extra.insert("v_a".to_string(), v_a);
        extra.insert("v_b".to_string(), v_b);
        trace.push(TraceRecord {
            t,
            mse,
            xi: alpha,
            residual_norm: resid,
            status: if blown {
                RecordStatus::Diverged
            } else {
                RecordStatus::Ok
            },
            extra,
        });
        if blown {
            status = RunStatus::Diverged {
                iteration: t,
                reason: format!("mse {mse:e} exceeds threshold"),
            };
            estimate = x_hat;
            break;
        }
        // Extrinsic update of the linear-module input.
        for (xa, (xh, rb)) in x_a.iter_mut().zip(x_hat.iter().zip(r_b.iter_mut())) {
            *xa = (xh - alpha * *rb) / (1.0 - alpha);
        }
        v_a = v_b * alpha / (1.0 - alpha);
        if v_a < REGULARIZATION_FLOOR {
            regularized = true;
            v_a = REGULARIZATION_FLOOR;
        }
        estimate = x_hat;
    }
    if regularized {
        warnings.push("regularized: variance or divergence floor applied".into());
    }
    Ok(RunOutcome {
        trace,
        status,
        estimate,
        warnings,
        internals,
    })
}

/// Trace as CSV with columns `t,mse,xi,residual_norm,status`.
pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("t,mse,xi,residual_norm,status\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{}\n",
            r.t,
            r.mse,
            r.xi,
            r.residual_norm,
            r.status.as_str()
        ));
    }
    out
}

/// Non-increasing within a relative rounding slack of `1e-12`, over the
/// first `len` records.
pub fn is_monotone_decreasing(mse: &[f64], len: usize) -> bool {
    mse.len() >= len && mse[..len].windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
}
