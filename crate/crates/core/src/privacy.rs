//! Gaussian mechanism noise, Renyi-divergence accounting for
//! Poisson-subsampled Gaussian mechanisms, conversion to (epsilon, delta),
//! and noise calibration against a target budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian, DenseVector, StreamKey};

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("AccountingOverflow: divergence not finite at order {order} (q = {q}, sigma = {sigma})")]
    AccountingOverflow { order: u32, q: f64, sigma: f64 },
    #[error("NoFiniteOrder: every tracked order has an infinite divergence")]
    NoFiniteOrder,
    #[error("CalibrationOutOfRange: target epsilon {target} unreachable with sigma in [{lo}, {hi}]")]
    CalibrationOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
}

/// A privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if !(epsilon > 0.0) {
            return Err(PrivacyError::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PrivacyError::InvalidParameter(format!("delta must be in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }
}

/// `count` applications of a Poisson-subsampled Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismEvent {
    /// Sampling rate in (0, 1].
    pub q: f64,
    /// Noise multiplier (noise stddev divided by sensitivity).
    pub sigma: f64,
    /// Number of steps.
    pub count: u64,
}

/// Default integer order grid for the accountant.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([80, 128, 256, 512]).collect()
}

/// Per-order Renyi divergence ledger.
///
/// Divergences only grow under composition; orders that overflow are kept
/// at infinity and skipped during conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<u32>,
    pub divergences: Vec<f64>,
    pub steps_composed: u64,
}

impl AccountantState {
    pub fn new(orders: Vec<u32>) -> Self {
        let divergences = vec![0.0; orders.len()];
        Self { orders, divergences, steps_composed: 0 }
    }
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new(default_orders())
    }
}

/// Add iid N(0, (sigma * C)^2) to every coordinate; `sigma = 0` is the identity.
pub fn add_gradient_noise(
    sum_grads: &[f64],
    sigma: f64,
    c: f64,
    key: StreamKey,
) -> Result<DenseVector, PrivacyError> {
    if !(sigma >= 0.0) || !(c > 0.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "need sigma >= 0 and C > 0, got sigma = {sigma}, C = {c}"
        )));
    }
    let mut out = sum_grads.to_vec();
    if sigma > 0.0 {
        let noise = gaussian(key, out.len(), sigma * c)
            .map_err(|e| PrivacyError::InvalidParameter(e.to_string()))?;
        for (o, n) in out.iter_mut().zip(noise) {
            *o += n;
        }
    }
    Ok(out)
}

/// log(exp(a) + exp(b)) without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Renyi divergence of one Poisson-subsampled Gaussian step at integer
/// order `alpha`.
///
/// For q = 1 this is alpha / (2 sigma^2). For q < 1 it is the binomial
/// expansion
///   (1/(alpha-1)) * log sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
///                                          * exp(k (k-1) / (2 sigma^2)),
/// evaluated in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64, PrivacyError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PrivacyError::InvalidParameter(format!("q must be in (0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(PrivacyError::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    if alpha < 2 {
        return Err(PrivacyError::InvalidParameter(format!("alpha must be >= 2, got {alpha}")));
    }
    let a = f64::from(alpha);
    if q == 1.0 {
        let v = a / (2.0 * sigma * sigma);
        return check_finite(v, alpha, q, sigma);
    }

    // log binomial coefficients via a running log-factorial
    let n = alpha as usize;
    let mut log_fact = vec![0.0; n + 1];
    for k in 1..=n {
        log_fact[k] = log_fact[k - 1] + (k as f64).ln();
    }
    let log_q = q.ln();
    let log_1mq = (1.0 - q).ln();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);

    let mut log_sum = f64::NEG_INFINITY;
    for k in 0..=n {
        let kf = k as f64;
        let log_binom = log_fact[n] - log_fact[k] - log_fact[n - k];
        let term = log_binom + (a - kf) * log_1mq + kf * log_q + kf * (kf - 1.0) * inv_2s2;
        log_sum = log_add_exp(log_sum, term);
    }
    check_finite(log_sum / (a - 1.0), alpha, q, sigma)
}

fn check_finite(v: f64, order: u32, q: f64, sigma: f64) -> Result<f64, PrivacyError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PrivacyError::AccountingOverflow { order, q, sigma })
    }
}

/// Compose `event` into the ledger: each order's divergence grows by
/// `count` times the single-step divergence. Orders that overflow (or a
/// zero noise multiplier) pin that order at infinity rather than failing.
pub fn compose(state: &AccountantState, event: &MechanismEvent) -> AccountantState {
    let mut next = state.clone();
    for (order, div) in next.orders.iter().zip(next.divergences.iter_mut()) {
        if !div.is_finite() {
            continue;
        }
        let step = if event.sigma > 0.0 {
            rdp_subsampled_gaussian(event.q, event.sigma, *order).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        *div += event.count as f64 * step;
    }
    next.steps_composed += event.count;
    next
}

/// Convert the ledger to (epsilon, best order) at a given delta:
/// epsilon = min over orders of rdp(alpha) + log(1/delta) / (alpha - 1).
pub fn to_epsilon(state: &AccountantState, delta: f64) -> Result<(f64, u32), PrivacyError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!("delta must be in (0, 1), got {delta}")));
    }
    let log_inv_delta = -delta.ln();
    let mut best: Option<(f64, u32)> = None;
    for (&order, &div) in state.orders.iter().zip(&state.divergences) {
        if !div.is_finite() {
            continue;
        }
        let eps = div + log_inv_delta / (f64::from(order) - 1.0);
        if best.is_none_or(|(b, _)| eps < b) {
            best = Some((eps, order));
        }
    }
    best.ok_or(PrivacyError::NoFiniteOrder)
}

const SIGMA_LO: f64 = 0.3;
const SIGMA_HI: f64 = 100.0;
const CALIBRATION_SLACK: f64 = 1e-3;

fn composed_epsilon(
    sigma: f64,
    q: f64,
    steps: u64,
    extra: Option<&MechanismEvent>,
    orders: &[u32],
    delta: f64,
) -> Result<f64, PrivacyError> {
    let mut state = AccountantState::new(orders.to_vec());
    state = compose(&state, &MechanismEvent { q, sigma, count: steps });
    if let Some(event) = extra {
        state = compose(&state, event);
    }
    to_epsilon(&state, delta).map(|(eps, _)| eps)
}

/// Bisect the gradient noise multiplier so that `steps` compositions land
/// within `1e-3` below the target epsilon and never above it.
///
/// `extra` composes an additional per-step mechanism (the noisy unclipped
/// count of adaptive runs) alongside the gradient mechanism while the
/// gradient multiplier is searched.
pub fn calibrate_sigma(
    target: PrivacyParams,
    q: f64,
    steps: u64,
    extra: Option<MechanismEvent>,
    orders: &[u32],
) -> Result<f64, PrivacyError> {
    if steps == 0 {
        return Err(PrivacyError::InvalidParameter("steps must be >= 1".into()));
    }
    let eps_at = |sigma: f64| composed_epsilon(sigma, q, steps, extra.as_ref(), orders, target.delta);

    let out_of_range = || PrivacyError::CalibrationOutOfRange {
        target: target.epsilon,
        lo: SIGMA_LO,
        hi: SIGMA_HI,
    };

    let eps_lo = eps_at(SIGMA_LO);
    if let Ok(e) = eps_lo {
        if e <= target.epsilon {
            // already at least as private as requested at the noisiest
            // end of the bracket; accept only if within the slack
            return if e >= target.epsilon - CALIBRATION_SLACK {
                Ok(SIGMA_LO)
            } else {
                Err(out_of_range())
            };
        }
    }
    let eps_hi = eps_at(SIGMA_HI).map_err(|_| out_of_range())?;
    if eps_hi > target.epsilon {
        return Err(out_of_range());
    }

    let mut lo = SIGMA_LO; // eps(lo) > target (or non-finite)
    let mut hi = SIGMA_HI; // eps(hi) <= target
    for _ in 0..200 {
        let eps_hi = eps_at(hi).map_err(|_| out_of_range())?;
        if target.epsilon - eps_hi <= CALIBRATION_SLACK {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        match eps_at(mid) {
            Ok(e) if e <= target.epsilon => hi = mid,
            _ => lo = mid,
        }
    }
    Err(out_of_range())
}
