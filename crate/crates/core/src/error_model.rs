//! The general long-memory error model
//!
//! ```text
//! q̃_t = q_t − Σ_{t'<t} ⟨∂_{t'}ψ_{t−1}⟩ h_{t'},      b_t = Vᵀ q̃_t
//! m_t = φ_t(b_0, …, b_t, w̃)
//! m̃_t = m_t − Σ_{t'≤t} ⟨∂_{t'}φ_t⟩ b_{t'},          h_t = V m̃_t
//! q_{t+1} = ψ_t(h_0, …, h_t, x)
//! ```
//!
//! with `q_0 = q̃_0 = −x`, simulated on a concrete operator, together with
//! the memory-1 OAMP and the AMP instances of it and finite-`N` probes of
//! the orthogonality properties the model guarantees asymptotically.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{run_amp, AmpInternals, RunConfig, REGULARIZATION_FLOOR};
use crate::ensembles::{
    build_operator, empirical_moments, trial_seeds, SensingOperator, SpectrumSpec,
};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, mean, sub};
use crate::models::{sample_instance, DenoiserSchedule, Instance, NoiseModel, Prior};
use crate::onsager;

const ALPHA_CEILING: f64 = 1.0 - 1e-12;
/// Histories whose Gram matrix has an eigenvalue below this times `N` are
/// flagged degenerate.
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

/// Inputs of one history-function call.
pub struct HistoryInput<'a> {
    /// `b_0..b_t` for `φ_t`, `h_0..h_t` for `ψ_t`.
    pub history: &'a [Vec<f64>],
    /// `Σᵀw̃` for `φ_t`, `x` for `ψ_t`.
    pub side: &'a [f64],
    /// Diagonal of `Λ`.
    pub lambda: &'a [f64],
    pub delta: f64,
    /// `⟨∂_{t'}ψ_s⟩` for every completed `s`, indexed `[s][t']`.
    pub psi_divergence: &'a [Vec<f64>],
}

/// Value and element-wise partial derivatives of a separable history function.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: Vec<f64>,
    /// `partials[t']` is `∂_{t'}` evaluated element-wise; an empty vector
    /// stands for an identically zero partial.
    pub partials: Vec<Vec<f64>>,
}

impl Evaluation {
    /// `⟨∂_{t'}⟩` for every history input.
    pub fn divergences(&self, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| match self.partials.get(i) {
                Some(p) if !p.is_empty() => mean(p),
                _ => 0.0,
            })
            .collect()
    }
}

pub trait HistoryFunction {
    fn evaluate(&mut self, t: usize, input: HistoryInput<'_>) -> Result<Evaluation>;
}

/// `φ ≡ 0` or `ψ ≡ 0`.
pub struct Zero;

impl HistoryFunction for Zero {
    fn evaluate(&mut self, _t: usize, input: HistoryInput<'_>) -> Result<Evaluation> {
        Ok(Evaluation {
            value: vec![0.0; input.side.len()],
            partials: Vec::new(),
        })
    }
}

/// State of the error model after `t` completed iterations.
#[derive(Debug, Clone)]
pub struct ErrorState {
    pub op: Arc<SensingOperator>,
    pub x: Vec<f64>,
    /// `w̃ = Uᵀw`
    pub w_tilde: Vec<f64>,
    /// `Σᵀw̃`
    pub sigma_w: Vec<f64>,
    pub t: usize,
    pub b: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub m_tilde: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    /// `q_0..q_t`
    pub q: Vec<Vec<f64>>,
    /// `q̃_0..q̃_t`
    pub q_tilde: Vec<Vec<f64>>,
    /// `⟨∂_{t'}φ_s⟩`, indexed `[s][t']`.
    pub phi_divergence: Vec<Vec<f64>>,
    /// `⟨∂_{t'}ψ_s⟩`, indexed `[s][t']`.
    pub psi_divergence: Vec<Vec<f64>>,
}

impl ErrorState {
    pub fn new(inst: &Instance) -> Self {
        let op = inst.op.clone();
        let w_tilde = op.u().apply_transpose(&inst.w);
        let sigma_w = op.sigma_transpose_apply(&w_tilde);
        let q0: Vec<f64> = inst.x.iter().map(|v| -v).collect();
        Self {
            op,
            x: inst.x.clone(),
            w_tilde,
            sigma_w,
            t: 0,
            b: Vec::new(),
            m: Vec::new(),
            m_tilde: Vec::new(),
            h: Vec::new(),
            q: vec![q0.clone()],
            q_tilde: vec![q0],
            phi_divergence: Vec::new(),
            psi_divergence: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
}

fn diverged(t: usize, what: &str) -> Error {
    Error::SimulationDiverged {
        iteration: t,
        reason: format!("non-finite {what}"),
    }
}

fn check_len(v: &[f64], n: usize, what: &'static str) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            what,
            expected: n,
            got: v.len(),
        });
    }
    Ok(())
}

/// One iteration of the general model. On error the state keeps whatever
/// was completed before the failure.
pub fn step_general(
    state: &mut ErrorState,
    phi: &mut dyn HistoryFunction,
    psi: &mut dyn HistoryFunction,
) -> Result<()> {
    let t = state.t;
    let n = state.n();
    let op = state.op.clone();

    let b_t = op.v().apply_transpose(&state.q_tilde[t]);
    state.b.push(b_t);

    let eval = phi.evaluate(
        t,
        HistoryInput {
            history: &state.b,
            side: &state.sigma_w,
            lambda: op.lambda(),
            delta: op.delta(),
            psi_divergence: &state.psi_divergence,
        },
    )?;
    check_len(&eval.value, n, "phi output")?;
    let div = eval.divergences(t + 1);
    let mut m_tilde = eval.value.clone();
    for (d, b) in div.iter().zip(&state.b) {
        axpy(-d, b, &mut m_tilde);
    }
    if !(all_finite(&m_tilde) && div.iter().all(|d| d.is_finite())) {
        return Err(diverged(t, "m"));
    }
    let h_t = op.v().apply(&m_tilde);
    state.m.push(eval.value);
    state.m_tilde.push(m_tilde);
    state.h.push(h_t);
    state.phi_divergence.push(div);

    let eval = psi.evaluate(
        t,
        HistoryInput {
            history: &state.h,
            side: &state.x,
            lambda: op.lambda(),
            delta: op.delta(),
            psi_divergence: &state.psi_divergence,
        },
    )?;
    check_len(&eval.value, n, "psi output")?;
    let div = eval.divergences(t + 1);
    let mut q_tilde = eval.value.clone();
    for (d, h) in div.iter().zip(&state.h) {
        axpy(-d, h, &mut q_tilde);
    }
    if !(all_finite(&q_tilde) && div.iter().all(|d| d.is_finite())) {
        return Err(diverged(t, "q"));
    }
    state.q.push(eval.value);
    state.q_tilde.push(q_tilde);
    state.psi_divergence.push(div);
    state.t += 1;
    Ok(())
}

/// Variance bookkeeping shared by the OAMP pair.
#[derive(Debug, Clone, Default)]
pub struct OampVariances {
    pub v_a: f64,
    pub v_b: f64,
    pub alpha_prev: f64,
    pub regularized: bool,
}

/// Linear module of memory-1 OAMP with the LMMSE filter:
/// `φ_t(b, w̃) = [(1 − f)⊙b_t/(1 − α_{t−1}) + c⊙Σᵀw̃] / ⟨f⟩`.
pub struct OampPhi {
    noise_variance: f64,
    shared: Rc<RefCell<OampVariances>>,
}

/// Nonlinear module: `ψ_t(h, x) = θ_t(x + h_t; v_B) − x`.
pub struct OampPsi {
    schedule: DenoiserSchedule,
    shared: Rc<RefCell<OampVariances>>,
}

/// The OAMP history functions, matching [`run_oamp`] step for step.
pub fn oamp_history_functions(cfg: &RunConfig) -> (OampPhi, OampPsi, Rc<RefCell<OampVariances>>) {
    let shared = Rc::new(RefCell::new(OampVariances {
        v_a: cfg.prior_second_moment,
        ..Default::default()
    }));
    (
        OampPhi {
            noise_variance: cfg.noise_variance,
            shared: shared.clone(),
        },
        OampPsi {
            schedule: cfg.schedule.clone(),
            shared: shared.clone(),
        },
        shared,
    )
}

impl HistoryFunction for OampPhi {
    fn evaluate(&mut self, t: usize, input: HistoryInput<'_>) -> Result<Evaluation> {
        let mut s = self.shared.borrow_mut();
        let b = &input.history[t];
        let n = b.len();
        let v_a = s.v_a;
        let mut c = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        for &l in input.lambda {
            let mut den = self.noise_variance + v_a * l;
            if den < REGULARIZATION_FLOOR {
                s.regularized = true;
                den = REGULARIZATION_FLOOR;
            }
            c.push(v_a / den);
            f.push(v_a / den * l);
        }
        let mut mean_f = mean(&f);
        if mean_f < REGULARIZATION_FLOOR {
            s.regularized = true;
            mean_f = REGULARIZATION_FLOOR;
        }
        let scale = 1.0 / (1.0 - s.alpha_prev);
        let value: Vec<f64> = (0..n)
            .map(|i| ((1.0 - f[i]) * b[i] * scale + c[i] * input.side[i]) / mean_f)
            .collect();
        let partial: Vec<f64> = f.iter().map(|fi| (1.0 - fi) * scale / mean_f).collect();
        let mut v_b = v_a * (1.0 - mean_f) / mean_f;
        if v_b < REGULARIZATION_FLOOR {
            s.regularized = true;
            v_b = REGULARIZATION_FLOOR;
        }
        s.v_b = v_b;
        let mut partials = vec![Vec::new(); t + 1];
        partials[t] = partial;
        Ok(Evaluation { value, partials })
    }
}

impl HistoryFunction for OampPsi {
    fn evaluate(&mut self, t: usize, input: HistoryInput<'_>) -> Result<Evaluation> {
        let mut s = self.shared.borrow_mut();
        let h = &input.history[t];
        let r: Vec<f64> = h.iter().zip(input.side).map(|(a, x)| a + x).collect();
        let (x_hat, deriv) = self.schedule.at(t)?.denoise(&r, s.v_b)?;
        let mut alpha = mean(&deriv);
        if alpha > ALPHA_CEILING {
            s.regularized = true;
            alpha = ALPHA_CEILING;
        }
        let mut v_a = s.v_b * alpha / (1.0 - alpha);
        if v_a < REGULARIZATION_FLOOR {
            s.regularized = true;
            v_a = REGULARIZATION_FLOOR;
        }
        s.v_a = v_a;
        s.alpha_prev = alpha;
        let value = sub(&x_hat, input.side);
        let mut partials = vec![Vec::new(); t + 1];
        partials[t] = deriv;
        Ok(Evaluation { value, partials })
    }
}

/// Runs `iterations` steps of the general model with the OAMP pair.
pub fn simulate_oamp(inst: &Instance, cfg: &RunConfig) -> Result<ErrorState> {
    cfg.validate()?;
    let (mut phi, mut psi, _) = oamp_history_functions(cfg);
    let mut state = ErrorState::new(inst);
    for _ in 0..cfg.iterations {
        step_general(&mut state, &mut phi, &mut psi)?;
    }
    Ok(state)
}

/// AMP's history function
///
/// ```text
/// m_t = (I − Λ) b_t − (ξ_{t−1}/δ) b_{t−1} + Σᵀw̃
///       + ξ_{t−1} [(1 + 1/δ) I − Λ] m_{t−1} − (ξ_{t−1} ξ_{t−2}/δ) m_{t−2}
/// ```
///
/// with `b_t = m_t = 0` for `t < 0`. Being linear in the `b` history, its
/// partials are the diagonals `D_{t',t}` of matrix polynomials in `Λ`.
pub struct AmpPhi {
    xi: Vec<f64>,
    m_raw: Vec<Vec<f64>>,
    /// `d[t][t']` is the diagonal of `D_{t',t}`.
    d: Vec<Vec<Vec<f64>>>,
}

impl AmpPhi {
    /// `xi[s]` is `ξ_s` from the AMP run being embedded.
    pub fn new(xi: Vec<f64>) -> Self {
        Self {
            xi,
            m_raw: Vec::new(),
            d: Vec::new(),
        }
    }

    /// `⟨Λᵏ D_{t',t}⟩`, indexed `[t][t']`.
    pub fn weighted_divergence(&self, lambda: &[f64], k: usize) -> Vec<Vec<f64>> {
        self.d
            .iter()
            .map(|row| {
                row.iter()
                    .map(|d| {
                        mean(
                            &d.iter()
                                .zip(lambda)
                                .map(|(a, l)| a * l.powi(k as i32))
                                .collect::<Vec<_>>(),
                        )
                    })
                    .collect()
            })
            .collect()
    }
}

impl HistoryFunction for AmpPhi {
    fn evaluate(&mut self, t: usize, input: HistoryInput<'_>) -> Result<Evaluation> {
        if t > 0 && self.xi.len() < t {
            return Err(Error::InvalidState(format!(
                "xi history has {} entries, iteration {t} needs {t}",
                self.xi.len()
            )));
        }
        if self.m_raw.len() != t {
            return Err(Error::InvalidState(
                "AMP phi must be evaluated in iteration order".into(),
            ));
        }
        let lambda = input.lambda;
        let delta = input.delta;
        let n = lambda.len();
        let b_t = &input.history[t];
        let mut value: Vec<f64> = (0..n)
            .map(|i| (1.0 - lambda[i]) * b_t[i] + input.side[i])
            .collect();
        let mut row: Vec<Vec<f64>> = Vec::with_capacity(t + 1);
        if t >= 1 {
            let xi1 = self.xi[t - 1];
            let b_prev = &input.history[t - 1];
            let m_prev = &self.m_raw[t - 1];
            for i in 0..n {
                value[i] +=
                    -(xi1 / delta) * b_prev[i] + xi1 * (1.0 + 1.0 / delta - lambda[i]) * m_prev[i];
            }
            let xi2 = if t >= 2 { self.xi[t - 2] } else { 0.0 };
            if t >= 2 {
                let m_prev2 = &self.m_raw[t - 2];
                for i in 0..n {
                    value[i] -= xi1 * xi2 / delta * m_prev2[i];
                }
            }
            for tp in 0..t {
                let prev = &self.d[t - 1][tp];
                let d: Vec<f64> = if tp + 1 == t {
                    (0..n)
                        .map(|i| -xi1 / delta + xi1 * (1.0 + 1.0 / delta - lambda[i]) * prev[i])
                        .collect()
                } else {
                    let prev2 = &self.d[t - 2][tp];
                    (0..n)
                        .map(|i| {
                            xi1 * (1.0 + 1.0 / delta - lambda[i]) * prev[i]
                                - xi1 * xi2 / delta * prev2[i]
                        })
                        .collect()
                };
                row.push(d);
            }
        }
        row.push(lambda.iter().map(|l| 1.0 - l).collect());
        self.m_raw.push(value.clone());
        self.d.push(row.clone());
        Ok(Evaluation {
            value,
            partials: row,
        })
    }
}

/// The AMP run rewritten in the error model's coordinates.
pub struct AmpEmbedding {
    pub state: ErrorState,
    pub phi: AmpPhi,
    /// `ξ_t` recomputed from the embedded denoiser outputs.
    pub xi_embedded: Vec<f64>,
}

/// Replays an AMP run through `φ` above: `h_t = V m_t`, `q_{t+1} = θ_t(x + h_t) − x`
/// and `q̃_{t+1} = q_{t+1} − ξ_t h_t`, using the `τ_t²` and `ξ_t` that the run
/// produced. The state also records `m̃_t = m_t − Σ ⟨D_{t',t}⟩ b_{t'}`, the
/// general model's corrected vector, whose difference from `m_t` vanishes
/// when the spectrum is Marčhenko–Pastur.
pub fn simulate_amp_embedding(
    inst: &Instance,
    schedule: &DenoiserSchedule,
    internals: &AmpInternals,
    xi: &[f64],
) -> Result<AmpEmbedding> {
    let steps = internals.tau_sq.len();
    if xi.len() < steps {
        return Err(Error::InvalidState(
            "xi history shorter than the run".into(),
        ));
    }
    let mut state = ErrorState::new(inst);
    let mut phi = AmpPhi::new(xi.to_vec());
    let op = state.op.clone();
    let mut xi_embedded = Vec::with_capacity(steps);
    for t in 0..steps {
        let b_t = op.v().apply_transpose(&state.q_tilde[t]);
        state.b.push(b_t);
        let eval = phi.evaluate(
            t,
            HistoryInput {
                history: &state.b,
                side: &state.sigma_w,
                lambda: op.lambda(),
                delta: op.delta(),
                psi_divergence: &state.psi_divergence,
            },
        )?;
        let div = eval.divergences(t + 1);
        let mut m_tilde = eval.value.clone();
        for (d, b) in div.iter().zip(&state.b) {
            axpy(-d, b, &mut m_tilde);
        }
        let h_t = op.v().apply(&eval.value);
        let r: Vec<f64> = h_t.iter().zip(&state.x).map(|(h, x)| h + x).collect();
        let (x_next, deriv) = schedule.at(t)?.denoise(&r, internals.tau_sq[t])?;
        let q_next = sub(&x_next, &state.x);
        let mut q_tilde = q_next.clone();
        axpy(-xi[t], &h_t, &mut q_tilde);
        if !(all_finite(&h_t) && all_finite(&q_tilde)) {
            return Err(diverged(t, "embedded AMP error"));
        }
        xi_embedded.push(mean(&deriv));
        state.m.push(eval.value);
        state.m_tilde.push(m_tilde);
        state.h.push(h_t);
        state.phi_divergence.push(div);
        let mut psi_row = vec![0.0; t + 1];
        psi_row[t] = xi[t];
        state.psi_divergence.push(psi_row);
        state.q.push(q_next);
        state.q_tilde.push(q_tilde);
        state.t += 1;
    }
    Ok(AmpEmbedding {
        state,
        phi,
        xi_embedded,
    })
}

/// Four statistics for one `(τ', τ)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    /// `N⁻¹ b_{τ'}ᵀ m̃_τ`
    pub b_m: f64,
    /// `N⁻¹ h_{τ'}ᵀ q̃_{τ+1}`
    pub h_q: f64,
    /// `N⁻¹ b_{τ'}ᵀ b_τ − N⁻¹ q̃_{τ'}ᵀ q̃_τ`
    pub bb_gap: f64,
    /// `N⁻¹ h_{τ'}ᵀ h_τ − N⁻¹ m̃_{τ'}ᵀ m̃_τ`
    pub hh_gap: f64,
}

impl PairStats {
    pub const NAMES: [&'static str; 4] = ["b_m", "h_q", "bb_gap", "hh_gap"];

    pub fn values(&self) -> [f64; 4] {
        [self.b_m, self.h_q, self.bb_gap, self.hh_gap]
    }
}

pub fn pair_key(tau_prime: usize, tau: usize) -> String {
    format!("{tau_prime},{tau}")
}

/// Statistics for all `τ', τ < t` of a state after `t` iterations.
pub fn orthogonality_statistics(state: &ErrorState) -> BTreeMap<String, PairStats> {
    let n = state.n() as f64;
    let t = state.t;
    let mut out = BTreeMap::new();
    for tp in 0..t {
        for tau in 0..t {
            out.insert(
                pair_key(tp, tau),
                PairStats {
                    b_m: dot(&state.b[tp], &state.m_tilde[tau]) / n,
                    h_q: dot(&state.h[tp], &state.q_tilde[tau + 1]) / n,
                    bb_gap: (dot(&state.b[tp], &state.b[tau])
                        - dot(&state.q_tilde[tp], &state.q_tilde[tau]))
                        / n,
                    hh_gap: (dot(&state.h[tp], &state.h[tau])
                        - dot(&state.m_tilde[tp], &state.m_tilde[tau]))
                        / n,
                },
            );
        }
    }
    out
}

/// Smallest eigenvalue of the Gram matrix of `cols`.
pub fn min_gram_eigenvalue(cols: &[Vec<f64>]) -> f64 {
    let k = cols.len();
    if k == 0 {
        return f64::INFINITY;
    }
    let gram = DMatrix::from_fn(k, k, |i, j| dot(&cols[i], &cols[j]));
    SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeAlgorithm {
    Oamp,
    Amp,
}

/// Onsager-coefficient consistency of the AMP embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsagerConsistency {
    /// `max_{t'≤t} |⟨∂_{t'}φ_t⟩|`
    pub max_abs_divergence: f64,
    /// Largest difference between the empirical `⟨∂_{t'}φ_t⟩` and the
    /// two-index g-table on the operator's empirical moments.
    pub max_table_mismatch: f64,
    /// Largest `‖h_t − (x_t + Aᵀz_t − x)‖ / ‖h_t‖` against the direct run.
    pub max_embedding_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub algorithm: ProbeAlgorithm,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Keyed by `"tau_prime,tau"`.
    pub statistics: BTreeMap<String, PairStats>,
    pub min_gram_q: f64,
    pub min_gram_m: f64,
    pub degenerate: bool,
    pub onsager: Option<OnsagerConsistency>,
}

impl OrthogonalityReport {
    /// `(key, statistic name, value)` rows.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut out = Vec::new();
        for (k, s) in &self.statistics {
            for (name, v) in PairStats::NAMES.iter().zip(s.values()) {
                out.push((k.clone(), *name, v));
            }
        }
        out
    }
}

/// One trial's report from a completed state.
pub fn report_from_state(
    state: &ErrorState,
    algorithm: ProbeAlgorithm,
    seed: u64,
) -> OrthogonalityReport {
    let n = state.n();
    let min_q = min_gram_eigenvalue(&state.q_tilde);
    let min_m = min_gram_eigenvalue(&state.m_tilde);
    let floor = DEGENERACY_TOLERANCE * n as f64;
    OrthogonalityReport {
        algorithm,
        n,
        m: state.op.m(),
        seed,
        iterations: state.t,
        statistics: orthogonality_statistics(state),
        min_gram_q: min_q,
        min_gram_m: min_m,
        degenerate: min_q < floor || min_m < floor,
        onsager: None,
    }
}

/// Compares an embedding's `⟨∂_{t'}φ_t⟩` with the analytic two-index
/// table on the operator's empirical moments and `h_t` with the direct run.
pub fn onsager_consistency(
    emb: &AmpEmbedding,
    run: &AmpInternals,
    xi: &[f64],
) -> Result<OnsagerConsistency> {
    let state = &emb.state;
    let t_max = state.t.saturating_sub(1);
    let ms = empirical_moments(&state.op, t_max + 2)?;
    let table = onsager::g_two_index(&ms.mu, &ms.delta, xi, t_max)?;
    let mut max_abs: f64 = 0.0;
    let mut mismatch: f64 = 0.0;
    for (t, row) in state.phi_divergence.iter().enumerate() {
        for (tp, d) in row.iter().enumerate() {
            max_abs = max_abs.max(d.abs());
            mismatch = mismatch.max((d - table[t][tp][0]).abs());
        }
    }
    let mut emb_err: f64 = 0.0;
    for (h, direct) in state.h.iter().zip(&run.h) {
        let diff = sub(h, direct);
        emb_err = emb_err.max((dot(&diff, &diff) / dot(h, h).max(f64::MIN_POSITIVE)).sqrt());
    }
    Ok(OnsagerConsistency {
        max_abs_divergence: max_abs,
        max_table_mismatch: mismatch,
        max_embedding_error: emb_err,
    })
}

/// A sweep over dimensions and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub algorithm: ProbeAlgorithm,
    pub spectrum: SpectrumSpec,
    pub prior: Prior,
    pub noise: NoiseModel,
    pub schedule: DenoiserSchedule,
    pub iterations: usize,
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "iteration count T must be >= 1".into(),
            ));
        }
        if self.dims.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidParameter(
                "dimension and seed lists must be nonempty".into(),
            ));
        }
        if let Some(n) = self.dims.iter().find(|n| **n < 2 * self.iterations) {
            return Err(Error::InvalidDimension(format!(
                "N = {n} is below 2T = {}",
                2 * self.iterations
            )));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidParameter("seeds must be distinct".into()));
        }
        self.spectrum.validate()?;
        self.prior.validate()?;
        self.schedule.validate(self.iterations)
    }
}

/// One `(N, seed)` trial of a probe.
pub fn probe_trial(cfg: &ProbeConfig, n: usize, seed: u64) -> Result<OrthogonalityReport> {
    let seeds = trial_seeds(seed, n);
    let op = Arc::new(build_operator(&cfg.spectrum, n, seeds.u, seeds.v)?);
    let inst = sample_instance(&cfg.prior, &cfg.noise, op, seeds.instance)?;
    let run_cfg = RunConfig::new(cfg.iterations, cfg.schedule.clone(), &cfg.prior, &cfg.noise)
        .with_internals();
    match cfg.algorithm {
        ProbeAlgorithm::Oamp => {
            let state = simulate_oamp(&inst, &run_cfg)?;
            Ok(report_from_state(&state, ProbeAlgorithm::Oamp, seed))
        }
        ProbeAlgorithm::Amp => {
            let run = run_amp(&inst, &run_cfg)?;
            if let crate::algorithms::RunStatus::Diverged { iteration, reason } = &run.status {
                return Err(Error::SimulationDiverged {
                    iteration: *iteration,
                    reason: reason.clone(),
                });
            }
            let internals = run.internals.unwrap_or_default();
            let xi: Vec<f64> = run.trace.iter().map(|r| r.xi).collect();
            let emb = simulate_amp_embedding(&inst, &cfg.schedule, &internals, &xi)?;
            let mut report = report_from_state(&emb.state, ProbeAlgorithm::Amp, seed);
            report.onsager = Some(onsager_consistency(&emb, &internals, &xi)?);
            Ok(report)
        }
    }
}

/// Runs every `(N, seed)` trial, in parallel on the current rayon pool.
/// Reports come back ordered by `dims`, then `seeds`.
pub fn probe_orthogonality(cfg: &ProbeConfig) -> Result<Vec<OrthogonalityReport>> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = cfg
        .dims
        .iter()
        .flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s)))
        .collect();
    jobs.par_iter()
        .map(|&(n, s)| probe_trial(cfg, n, s))
        .collect()
}

/// Sweep summary as CSV with columns `N,seed,statistic,value`; the
/// statistic name is `<kind>[tau_prime,tau]`.
pub fn reports_to_csv(reports: &[OrthogonalityReport]) -> String {
    let mut out = String::from("N,seed,statistic,value\n");
    for r in reports {
        for (key, name, v) in r.rows() {
            out.push_str(&format!(
                "{},{},{}[{}],{:.16e}\n",
                r.n,
                r.seed,
                name,
                key.replace(',', ";"),
                v
            ));
        }
    }
    out
}

/// Decay of the orthogonality statistics between two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub n_small: usize,
    pub n_large: usize,
    /// Median over all `(seed, statistic)` pairs of `|s(N_large)| / |s(N_small)|`.
    pub pooled_median_ratio: f64,
    /// Per-statistic median over seeds.
    pub per_statistic: BTreeMap<String, f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Pairs reports by seed across `n_small` and `n_large` and summarises the
/// magnitude ratios of the orthogonality statistics (`b_m`, `h_q`). The norm
/// gaps are exact zeros up to rounding for the general model and are left out.
pub fn decay_summary(
    reports: &[OrthogonalityReport],
    n_small: usize,
    n_large: usize,
) -> Result<DecaySummary> {
    let small: BTreeMap<u64, &OrthogonalityReport> = reports
        .iter()
        .filter(|r| r.n == n_small)
        .map(|r| (r.seed, r))
        .collect();
    let large: BTreeMap<u64, &OrthogonalityReport> = reports
        .iter()
        .filter(|r| r.n == n_large)
        .map(|r| (r.seed, r))
        .collect();
    let mut pooled = Vec::new();
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (seed, rs) in &small {
        let Some(rl) = large.get(seed) else { continue };
        for (key, ss) in &rs.statistics {
            let Some(sl) = rl.statistics.get(key) else {
                continue;
            };
            for (name, a, b) in [("b_m", ss.b_m, sl.b_m), ("h_q", ss.h_q, sl.h_q)] {
                if a != 0.0 {
                    let ratio = b.abs() / a.abs();
                    pooled.push(ratio);
                    per.entry(format!("{name}[{key}]")).or_default().push(ratio);
                }
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no seeds shared between N = {n_small} and N = {n_large}"
        )));
    }
    Ok(DecaySummary {
        n_small,
        n_large,
        pooled_median_ratio: median(&mut pooled),
        per_statistic: per
            .into_iter()
            .map(|(k, mut v)| (k, median(&mut v)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::run_oamp;
    use crate::models::Denoiser;

    fn bg() -> Prior {
        Prior::BernoulliGaussian {
            sparsity: 0.1,
            variance: 1.0,
        }
    }

    fn instance(n: usize, seed: u64) -> Instance {
        let op = Arc::new(
            build_operator(&SpectrumSpec::marchenko_pastur(0.5), n, seed, seed + 1).unwrap(),
        );
        sample_instance(&bg(), &NoiseModel::new(1e-3).unwrap(), op, seed + 2).unwrap()
    }

    #[test]
    fn zero_functions_give_zero_errors() {
        let inst = instance(64, 1);
        let mut state = ErrorState::new(&inst);
        assert_eq!(state.q_tilde[0], state.q[0]);
        assert!(state.q[0].iter().zip(&inst.x).all(|(q, x)| *q == -x));
        for _ in 0..3 {
            step_general(&mut state, &mut Zero, &mut Zero).unwrap();
        }
        for t in 1..=3 {
            assert!(state.q_tilde[t].iter().all(|v| *v == 0.0));
            assert!(state.h[t - 1].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn oamp_model_matches_runner() {
        let inst = instance(256, 7);
        let noise = NoiseModel::new(1e-3).unwrap();
        let cfg = RunConfig::new(6, Denoiser::mmse_for(&bg()).unwrap().into(), &bg(), &noise)
            .with_internals();
        let run = run_oamp(&inst, &cfg).unwrap();
        let int = run.internals.unwrap();
        let state = simulate_oamp(&inst, &cfg).unwrap();
        for t in 0..6 {
            let scale = dot(&int.h[t], &int.h[t]).sqrt();
            let err = sub(&state.h[t], &int.h[t]);
            assert!(dot(&err, &err).sqrt() <= 1e-10 * scale, "h at t={t}");
            let qerr = sub(&state.q[t + 1], &int.q[t]);
            assert!(dot(&qerr, &qerr).sqrt() <= 1e-10 * dot(&int.q[t], &int.q[t]).sqrt());
        }
    }

    #[test]
    fn amp_phi_at_origin() {
        let inst = instance(128, 3);
        let mut state = ErrorState::new(&inst);
        let op = state.op.clone();
        state.b.push(op.v().apply_transpose(&state.q_tilde[0]));
        let mut phi = AmpPhi::new(Vec::new());
        let eval = phi
            .evaluate(
                0,
                HistoryInput {
                    history: &state.b,
                    side: &state.sigma_w,
                    lambda: op.lambda(),
                    delta: op.delta(),
                    psi_divergence: &[],
                },
            )
            .unwrap();
        for i in 0..128 {
            let expect = (1.0 - op.lambda()[i]) * state.b[0][i] + state.sigma_w[i];
            assert!((eval.value[i] - expect).abs() < 1e-15);
        }
        let ms = empirical_moments(&op, 1).unwrap();
        let d0 = eval.divergences(1)[0];
        assert!((d0 - (ms.mu[0] - ms.mu[1])).abs() < 1e-14);
        assert!(phi
            .evaluate(
                1,
                HistoryInput {
                    history: &state.b,
                    side: &state.sigma_w,
                    lambda: op.lambda(),
                    delta: 0.5,
                    psi_divergence: &[]
                }
            )
            .is_err());
    }

    #[test]
    fn amp_embedding_reproduces_run() {
        let inst = instance(512, 11);
        let noise = NoiseModel::new(1e-3).unwrap();
        let schedule: DenoiserSchedule = Denoiser::mmse_for(&bg()).unwrap().into();
        let cfg = RunConfig::new(5, schedule.clone(), &bg(), &noise).with_internals();
        let run = run_amp(&inst, &cfg).unwrap();
        let int = run.internals.unwrap();
        let xi: Vec<f64> = run.trace.iter().map(|r| r.xi).collect();
        let emb = simulate_amp_embedding(&inst, &schedule, &int, &xi).unwrap();
        let c = onsager_consistency(&emb, &int, &xi).unwrap();
        assert!(c.max_embedding_error < 1e-9, "{c:?}");
        assert!(c.max_table_mismatch < 1e-9, "{c:?}");
        for (a, b) in emb.xi_embedded.iter().zip(&xi) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_divergence_matches_two_index_table() {
        let inst = instance(256, 5);
        let noise = NoiseModel::new(1e-3).unwrap();
        let schedule: DenoiserSchedule = Denoiser::mmse_for(&bg()).unwrap().into();
        let cfg = RunConfig::new(4, schedule.clone(), &bg(), &noise).with_internals();
        let run = run_amp(&inst, &cfg).unwrap();
        let int = run.internals.unwrap();
        let xi: Vec<f64> = run.trace.iter().map(|r| r.xi).collect();
        let emb = simulate_amp_embedding(&inst, &schedule, &int, &xi).unwrap();
        let ms = empirical_moments(&inst.op, 8).unwrap();
        let table = onsager::g_two_index(&ms.mu, &ms.delta, &xi, 3).unwrap();
        for k in 0..3 {
            let w = emb.phi.weighted_divergence(inst.op.lambda(), k);
            for t in 0..4 {
                for tp in 0..=t {
                    assert!(
                        (w[t][tp] - table[t][tp][k]).abs() < 1e-9 * table[t][tp][k].abs().max(1.0)
                    );
                }
            }
        }
    }

    #[test]
    fn norm_gaps_vanish_for_general_model() {
        let inst = instance(256, 9);
        let cfg = RunConfig::new(
            4,
            Denoiser::mmse_for(&bg()).unwrap().into(),
            &bg(),
            &NoiseModel::new(1e-3).unwrap(),
        );
        let state = simulate_oamp(&inst, &cfg).unwrap();
        for (k, s) in orthogonality_statistics(&state) {
            let scale = 1.0;
            assert!(s.bb_gap.abs() < 1e-12 * scale, "{k}: {}", s.bb_gap);
            assert!(s.hh_gap.abs() < 1e-12 * scale, "{k}: {}", s.hh_gap);
        }
    }

    #[test]
    fn degenerate_history_flagged() {
        let inst = instance(64, 2);
        let mut state = ErrorState::new(&inst);
        for _ in 0..3 {
            step_general(&mut state, &mut Zero, &mut Zero).unwrap();
        }
        assert!(report_from_state(&state, ProbeAlgorithm::Oamp, 0).degenerate);
    }

    #[test]
    fn probe_config_validation() {
        let mut cfg = ProbeConfig {
            algorithm: ProbeAlgorithm::Oamp,
            spectrum: SpectrumSpec::marchenko_pastur(0.5),
            prior: bg(),
            noise: NoiseModel::new(1e-3).unwrap(),
            schedule: Denoiser::mmse_for(&bg()).unwrap().into(),
            iterations: 3,
            dims: vec![64],
            seeds: vec![1, 2],
        };
        assert!(cfg.validate().is_ok());
        cfg.dims = vec![5];
        assert!(cfg.validate().is_err());
        cfg.dims = vec![64];
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn probe_sweep_is_ordered_and_summarised() {
        let cfg = ProbeConfig {
            algorithm: ProbeAlgorithm::Oamp,
            spectrum: SpectrumSpec::marchenko_pastur(0.5),
            prior: bg(),
            noise: NoiseModel::new(1e-3).unwrap(),
            schedule: Denoiser::mmse_for(&bg()).unwrap().into(),
            iterations: 2,
            dims: vec![64, 256],
            seeds: vec![3, 4, 5],
        };
        let reports = probe_orthogonality(&cfg).unwrap();
        let order: Vec<(usize, u64)> = reports.iter().map(|r| (r.n, r.seed)).collect();
        assert_eq!(
            order,
            vec![(64, 3), (64, 4), (64, 5), (256, 3), (256, 4), (256, 5)]
        );
        let d = decay_summary(&reports, 64, 256).unwrap();
        assert!(d.pooled_median_ratio.is_finite());
        let csv = reports_to_csv(&reports);
        assert_eq!(csv.lines().count(), 1 + 6 * 4 * 4);
        let json = serde_json::to_value(&reports[0]).unwrap();
        assert!(json["statistics"]["0,1"]["b_m"].is_number());
    }
}
