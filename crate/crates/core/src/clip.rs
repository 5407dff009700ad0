//! Per-sample gradient clipping strategies and the adaptive threshold
//! controller.
//!
//! Four strategies are supported: hard clipping at a fixed bound, smooth
//! tanh clipping at a fixed bound, hard clipping with a quantile-tracking
//! bound, and smooth clipping with a quantile-tracking bound. All of them
//! scale a gradient by a nonnegative factor, so direction is preserved and
//! the contributed norm never exceeds the bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{l2_norm, Stream, StreamKey};

#[derive(Debug, Error, PartialEq)]
pub enum ClipError {
    #[error("InvalidBound: clipping bound and division constant must be positive (C = {c}, eps = {eps})")]
    InvalidBound { c: f64, eps: f64 },
    #[error("EmptyBatch: cannot estimate the unclipped fraction of an empty batch")]
    EmptyBatch,
    #[error("NotAdaptive: threshold update called on a non-adaptive clip state")]
    NotAdaptive,
    #[error("NonFiniteGradient: gradient contains a non-finite entry")]
    NonFiniteGradient,
}

/// Which clipping rule a training run applies per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipStrategy {
    /// Fixed bound, scale by min(1, C/||g||).
    Hard,
    /// Fixed bound, scale by tanh(C/(||g|| + eps)).
    SoftFixed,
    /// Quantile-tracking bound, hard scaling.
    AdaptiveHard,
    /// Quantile-tracking bound, tanh scaling.
    #[serde(rename = "softadaclip")]
    SoftAdaClip,
}

impl ClipStrategy {
    pub fn is_adaptive(self) -> bool {
        matches!(self, ClipStrategy::AdaptiveHard | ClipStrategy::SoftAdaClip)
    }

    pub fn is_soft(self) -> bool {
        matches!(self, ClipStrategy::SoftFixed | ClipStrategy::SoftAdaClip)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClipStrategy::Hard => "hard",
            ClipStrategy::SoftFixed => "soft-fixed",
            ClipStrategy::AdaptiveHard => "adaptive-hard",
            ClipStrategy::SoftAdaClip => "softadaclip",
        }
    }
}

/// One example's gradient together with everything clipping derived from it.
#[derive(Debug, Clone)]
pub struct PerSampleGradient {
    /// Raw flattened gradient.
    pub raw: Vec<f64>,
    /// Euclidean norm of `raw`.
    pub norm: f64,
    /// Scaling factor applied to `raw`.
    pub scale: f64,
    /// `scale * raw`; its norm never exceeds the bound that produced it.
    pub clipped: Vec<f64>,
    /// 1 iff the raw norm was at or below the bound.
    pub unclipped: bool,
}

/// The evolving clipping bound and its controller parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipState {
    /// Current bound C; stays positive under any update sequence.
    pub bound: f64,
    /// Target unclipped fraction (e.g. 0.5 tracks the median norm).
    pub target_quantile: f64,
    /// Multiplicative learning rate for the bound.
    pub bound_lr: f64,
    /// Stddev of the noise added to the unclipped count.
    pub fraction_noise: f64,
    /// Whether the bound is updated at all.
    pub adaptive: bool,
}

impl ClipState {
    pub fn fixed(bound: f64) -> Self {
        Self { bound, target_quantile: 0.5, bound_lr: 0.2, fraction_noise: 0.0, adaptive: false }
    }

    pub fn adaptive(bound: f64, target_quantile: f64, bound_lr: f64, fraction_noise: f64) -> Self {
        Self { bound, target_quantile, bound_lr, fraction_noise, adaptive: true }
    }
}

fn check_bound(c: f64, eps: f64) -> Result<(), ClipError> {
    if c > 0.0 && eps > 0.0 {
        Ok(())
    } else {
        Err(ClipError::InvalidBound { c, eps })
    }
}

/// Scale `g` by min(1, C/||g||); over-threshold gradients all land on norm C.
pub fn hard_clip(g: Vec<f64>, c: f64) -> Result<PerSampleGradient, ClipError> {
    check_bound(c, 1.0)?;
    let norm = l2_norm(&g).map_err(|_| ClipError::NonFiniteGradient)?;
    let scale = if norm <= c { 1.0 } else { c / norm };
    let clipped = if scale == 1.0 { g.clone() } else { g.iter().map(|x| scale * x).collect() };
    Ok(PerSampleGradient { norm, scale, clipped, unclipped: norm <= c, raw: g })
}

/// Scale `g` by tanh(C/(||g|| + eps_div)).
///
/// The scaled norm stays strictly below C while distinct raw norms keep
/// distinct clipped norms.
pub fn soft_clip(g: Vec<f64>, c: f64, eps_div: f64) -> Result<PerSampleGradient, ClipError> {
    check_bound(c, eps_div)?;
    let norm = l2_norm(&g).map_err(|_| ClipError::NonFiniteGradient)?;
    let scale = (c / (norm + eps_div)).tanh();
    let clipped = g.iter().map(|x| scale * x).collect();
    Ok(PerSampleGradient { norm, scale, clipped, unclipped: norm <= c, raw: g })
}

/// 1 if the raw norm is at or below the bound (boundary inclusive).
pub fn unclipped_indicator(g: &[f64], c: f64) -> Result<bool, ClipError> {
    check_bound(c, 1.0)?;
    let norm = l2_norm(g).map_err(|_| ClipError::NonFiniteGradient)?;
    Ok(norm <= c)
}

/// Noisy estimate of the unclipped fraction: (sum of bits + N(0, sigma_b^2)) / |B|.
///
/// The result is not clamped and may fall outside [0, 1].
pub fn noisy_unclipped_fraction(
    bits: &[bool],
    fraction_noise: f64,
    key: StreamKey,
) -> Result<f64, ClipError> {
    if bits.is_empty() {
        return Err(ClipError::EmptyBatch);
    }
    let sum = bits.iter().filter(|&&b| b).count() as f64;
    let noise =
        if fraction_noise > 0.0 { fraction_noise * Stream::new(key).next_gaussian() } else { 0.0 };
    Ok((sum + noise) / bits.len() as f64)
}

/// Multiplicative quantile-tracking update: C <- C * exp(-eta_C * (b - gamma)).
pub fn update_threshold(state: &ClipState, noisy_fraction: f64) -> Result<ClipState, ClipError> {
    if !state.adaptive {
        return Err(ClipError::NotAdaptive);
    }
    let mut next = *state;
    next.bound = state.bound * (-state.bound_lr * (noisy_fraction - state.target_quantile)).exp();
    Ok(next)
}

/// Apply `strategy` to one raw gradient under the current bound.
pub fn apply_strategy(
    strategy: ClipStrategy,
    g: Vec<f64>,
    c: f64,
    eps_div: f64,
) -> Result<PerSampleGradient, ClipError> {
    if strategy.is_soft() {
        soft_clip(g, c, eps_div)
    } else {
        hard_clip(g, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    fn vector_with_norm(dim: usize, norm: f64, key_index: u64) -> Vec<f64> {
        let v = gaussian(StreamKey::new(77, "clipvec", 0, key_index), dim, 1.0).unwrap();
        let n = l2_norm(&v).unwrap();
        v.iter().map(|x| x * norm / n).collect()
    }

    #[test]
    fn hard_clip_maps_large_norms_to_the_bound() {
        // norms 20 and 1000 both land exactly on C = 1
        let a = hard_clip(vector_with_norm(10, 20.0, 0), 1.0).unwrap();
        let b = hard_clip(vector_with_norm(10, 1000.0, 1), 1.0).unwrap();
        assert!((l2_norm(&a.clipped).unwrap() - 1.0).abs() < 1e-12);
        assert!((l2_norm(&b.clipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_clip_below_bound_is_bitwise_identity() {
        let g = vector_with_norm(8, 0.5, 2);
        let out = hard_clip(g.clone(), 1.0).unwrap();
        assert!(out.clipped.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(out.scale, 1.0);
        assert!(out.unclipped);
    }

    #[test]
    fn hard_clip_zero_gradient() {
        let out = hard_clip(vec![0.0; 5], 1.0).unwrap();
        assert_eq!(out.clipped, vec![0.0; 5]);
        assert_eq!(out.scale, 1.0);
    }

    #[test]
    fn hard_clip_rejects_nonpositive_bound() {
        assert!(matches!(hard_clip(vec![1.0], 0.0), Err(ClipError::InvalidBound { .. })));
        assert!(matches!(hard_clip(vec![1.0], -2.0), Err(ClipError::InvalidBound { .. })));
    }

    #[test]
    fn soft_clip_worked_example() {
        // norms 1.1 and 1.2 at C = 1: tanh(0.91) ~ 0.72 and tanh(0.83) ~ 0.68
        let a = soft_clip(vector_with_norm(6, 1.1, 3), 1.0, 1e-6).unwrap();
        let b = soft_clip(vector_with_norm(6, 1.2, 4), 1.0, 1e-6).unwrap();
        assert!((a.scale - 0.72).abs() < 0.01, "scale {}", a.scale);
        assert!((b.scale - 0.68).abs() < 0.01, "scale {}", b.scale);
        let na = l2_norm(&a.clipped).unwrap();
        let nb = l2_norm(&b.clipped).unwrap();
        assert!((na - nb).abs() > 1e-6, "distinct norms preserved");
    }

    #[test]
    fn soft_clip_zero_vector_fixed_point() {
        let out = soft_clip(vec![0.0; 4], 0.1, 1e-6).unwrap();
        assert_eq!(out.clipped, vec![0.0; 4]);
        assert!((out.scale - 1.0).abs() < 1e-12, "tanh(C/eps) saturates to 1");
    }

    #[test]
    fn soft_clip_scalar_evaluation() {
        // norm 10, C = 1: 10 * tanh(1/(10 + 1e-6)) ~ 0.99668, strictly below 1
        let out = soft_clip(vector_with_norm(12, 10.0, 5), 1.0, 1e-6).unwrap();
        let n = l2_norm(&out.clipped).unwrap();
        assert!((n - 10.0 * (1.0f64 / (10.0 + 1e-6)).tanh()).abs() < 1e-9);
        assert!((n - 0.99668).abs() < 1e-5);
        assert!(n < 1.0);
    }

    #[test]
    fn soft_clip_rejects_bad_constants() {
        assert!(soft_clip(vec![1.0], 1.0, 0.0).is_err());
        assert!(soft_clip(vec![1.0], -1.0, 1e-6).is_err());
    }

    #[test]
    fn soft_scale_approaches_one_for_tiny_norms() {
        // alpha -> 1 as the norm vanishes, for eps_div <= 1e-6, C >= 0.01
        for &c in &[0.01, 0.1, 1.0] {
            for norm in [1e-8, 1e-7, 1e-6] {
                let g = vector_with_norm(4, norm, 8);
                let out = soft_clip(g, c, 1e-6).unwrap();
                assert!(out.scale > 0.999, "C = {c}, norm = {norm}: alpha = {}", out.scale);
                assert!(out.scale <= 1.0);
            }
        }
    }

    #[test]
    fn indicator_boundary_is_inclusive() {
        let g = vector_with_norm(4, 1.0, 6);
        // rescale exactly: norm may be off by float error, so test via direct norms
        assert!(unclipped_indicator(&[0.05], 0.1).unwrap());
        assert!(!unclipped_indicator(&[0.15], 0.1).unwrap());
        assert!(!unclipped_indicator(&[0.25], 0.1).unwrap());
        let n = l2_norm(&g).unwrap();
        assert!(unclipped_indicator(&g, n).unwrap(), "boundary is inclusive");
    }

    #[test]
    fn noiseless_fraction_is_the_plain_mean() {
        let key = StreamKey::new(1, "fraction", 0, 0);
        let f = noisy_unclipped_fraction(&[true, true, false, false], 0.0, key).unwrap();
        assert_eq!(f, 0.5);
        let f = noisy_unclipped_fraction(&[true; 7], 0.0, key).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn noisy_fraction_recomputes_with_the_same_stream() {
        let key = StreamKey::new(8, "fraction", 31, 0);
        let bits = vec![true; 50].into_iter().chain(vec![false; 50]).collect::<Vec<_>>();
        let f = noisy_unclipped_fraction(&bits, 1.0, key).unwrap();
        let z = Stream::new(key).next_gaussian();
        assert_eq!(f, 0.5 + z / 100.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let key = StreamKey::new(0, "fraction", 0, 0);
        assert_eq!(noisy_unclipped_fraction(&[], 1.0, key), Err(ClipError::EmptyBatch));
    }

    #[test]
    fn threshold_update_rule() {
        let state = ClipState::adaptive(1.0, 0.5, 0.2, 0.0);
        // b = gamma leaves C unchanged
        assert_eq!(update_threshold(&state, 0.5).unwrap().bound, 1.0);
        // b = 1.0 shrinks by exp(-0.1)
        let down = update_threshold(&state, 1.0).unwrap();
        assert!((down.bound - (-0.1f64).exp()).abs() < 1e-12);
        assert!((down.bound - 0.904837).abs() < 1e-6);
        // b = 0 grows by exp(0.1)
        let up = update_threshold(&state, 0.0).unwrap();
        assert!((up.bound - (0.1f64).exp()).abs() < 1e-12);
        // controller parameters unchanged
        assert_eq!(down.target_quantile, 0.5);
        assert_eq!(down.bound_lr, 0.2);
    }

    #[test]
    fn threshold_update_requires_adaptive_state() {
        let state = ClipState::fixed(1.0);
        assert_eq!(update_threshold(&state, 0.9), Err(ClipError::NotAdaptive));
    }

    #[test]
    fn threshold_stays_positive_under_long_update_sequences() {
        let mut state = ClipState::adaptive(0.1, 0.5, 0.2, 0.0);
        let mut stream = Stream::new(StreamKey::new(3, "thr", 0, 0));
        for _ in 0..10_000 {
            // unclamped fractions can leave [0, 1] a little
            let b = 2.0 * stream.next_f64() - 0.5;
            state = update_threshold(&state, b).unwrap();
            assert!(state.bound > 0.0 && state.bound.is_finite());
        }
    }

    #[test]
    fn clipped_equals_scale_times_raw_exactly() {
        for strategy in [ClipStrategy::Hard, ClipStrategy::SoftFixed] {
            let g = vector_with_norm(32, 5.0, 7);
            let out = apply_strategy(strategy, g, 0.5, 1e-6).unwrap();
            for (c, r) in out.clipped.iter().zip(&out.raw) {
                assert_eq!(c.to_bits(), (out.scale * r).to_bits());
            }
        }
    }
}
