//! Feed-forward classifiers with exact per-sample gradients via manual
//! reverse-mode differentiation.
//!
//! Supports the two tabular presets used throughout: a plain two-layer
//! network with a binary logit head, and a deeper network with per-sample
//! group normalization, dropout, and a two-logit softmax head. Group
//! normalization is per sample only, so per-sample gradients never depend
//! on batch composition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian, matvec, matvec_transpose, outer_accumulate, Stream, StreamKey};

/// Pre-exponentiation clamp for logits.
const LOGIT_CLAMP: f64 = 30.0;
/// Group-normalization variance floor.
const GN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("ShapeMismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch { expected: usize, got: usize, context: &'static str },
    #[error("NonFiniteLoss: loss is not finite for label {label}")]
    NonFiniteLoss { label: usize },
    #[error("EmptySplit: evaluation needs at least one example")]
    EmptySplit,
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
}

/// One hidden layer: linear -> (group norm) -> ReLU -> (dropout).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub group_norm: bool,
    pub dropout: f64,
}

impl HiddenLayer {
    pub fn plain(width: usize) -> Self {
        Self { width, group_norm: false, dropout: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    /// Single logit; probability via sigmoid.
    BinaryLogit,
    /// K-way logits; probability via softmax.
    MultiLogit(usize),
}

impl OutputHead {
    pub fn dim(self) -> usize {
        match self {
            OutputHead::BinaryLogit => 1,
            OutputHead::MultiLogit(k) => k,
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub head: OutputHead,
    /// Group count for layers with group normalization.
    pub norm_groups: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.head.dim() == 0 {
            return Err(ModelError::InvalidSpec("output head needs at least one logit".into()));
        }
        for (i, layer) in self.hidden.iter().enumerate() {
            if layer.width == 0 {
                return Err(ModelError::InvalidSpec(format!("hidden layer {i} has width 0")));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(ModelError::InvalidSpec(format!(
                    "hidden layer {i} dropout {} outside [0, 1)",
                    layer.dropout
                )));
            }
            if layer.group_norm && (self.norm_groups == 0 || layer.width % self.norm_groups != 0) {
                return Err(ModelError::InvalidSpec(format!(
                    "hidden layer {i} width {} not divisible into {} normalization groups",
                    layer.width, self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Per-layer (in, out) shapes including the output projection.
    fn linear_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for layer in &self.hidden {
            shapes.push((prev, layer.width));
            prev = layer.width;
        }
        shapes.push((prev, self.head.dim()));
        shapes
    }

    /// Total parameter count: weights + biases + group-norm scale/shift.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for (i, (fan_in, fan_out)) in self.linear_shapes().iter().enumerate() {
            total += fan_in * fan_out + fan_out;
            if i < self.hidden.len() && self.hidden[i].group_norm {
                total += 2 * fan_out;
            }
        }
        total
    }

    fn layout(&self) -> Vec<LayerLayout> {
        let mut layers = Vec::new();
        let mut offset = 0;
        let shapes = self.linear_shapes();
        for (i, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = offset;
            offset += fan_in * fan_out;
            let b = offset;
            offset += fan_out;
            let hidden = self.hidden.get(i);
            let gn = if hidden.is_some_and(|h| h.group_norm) {
                let gamma = offset;
                offset += fan_out;
                let beta = offset;
                offset += fan_out;
                Some((gamma, beta))
            } else {
                None
            };
            layers.push(LayerLayout {
                fan_in,
                fan_out,
                w,
                b,
                gn,
                relu: hidden.is_some(),
                dropout: hidden.map_or(0.0, |h| h.dropout),
            });
        }
        layers
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    gn: Option<(usize, usize)>,
    relu: bool,
    dropout: f64,
}

/// Flattened parameter vector; the layout is derived from the spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

/// Loss over the final logits; reduction is always a plain sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    /// Binary cross-entropy on a single logit with a positive-class weight.
    BinaryLogit { pos_weight: f64 },
    /// K-way cross-entropy with per-class weights.
    CrossEntropy { class_weights: Vec<f64> },
}

impl LossSpec {
    pub fn validate(&self, head: OutputHead) -> Result<(), ModelError> {
        match (self, head) {
            (LossSpec::BinaryLogit { pos_weight }, OutputHead::BinaryLogit) => {
                if *pos_weight > 0.0 {
                    Ok(())
                } else {
                    Err(ModelError::InvalidSpec("pos_weight must be positive".into()))
                }
            }
            (LossSpec::CrossEntropy { class_weights }, OutputHead::MultiLogit(k)) => {
                if class_weights.len() != k {
                    return Err(ModelError::InvalidSpec(format!(
                        "{} class weights for {k} logits",
                        class_weights.len()
                    )));
                }
                if class_weights.iter().all(|w| *w > 0.0) {
                    Ok(())
                } else {
                    Err(ModelError::InvalidSpec("class weights must be positive".into()))
                }
            }
            _ => Err(ModelError::InvalidSpec("loss kind does not match the output head".into())),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            LossSpec::BinaryLogit { .. } => 2,
            LossSpec::CrossEntropy { class_weights } => class_weights.len(),
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

/// He-scaled random weights, zero biases, unit group-norm scale.
///
/// Layer `l` draws from `key` with its index shifted by `l`, so one key
/// seeds the whole network deterministically.
pub fn init_params(spec: &MlpSpec, key: StreamKey) -> Result<ModelParams, ModelError> {
    spec.validate()?;
    let mut values = vec![0.0; spec.param_count()];
    for (l, layer) in spec.layout().iter().enumerate() {
        let stddev = (2.0 / layer.fan_in as f64).sqrt();
        let layer_key = StreamKey { index: key.index + l as u64, ..key };
        let w = gaussian(layer_key, layer.fan_in * layer.fan_out, stddev)
            .expect("stddev is positive and finite");
        values[layer.w..layer.w + w.len()].copy_from_slice(&w);
        // biases stay zero
        if let Some((gamma, _beta)) = layer.gn {
            for g in &mut values[gamma..gamma + layer.fan_out] {
                *g = 1.0;
            }
        }
    }
    Ok(ModelParams { values })
}

struct LayerCache {
    /// Input activation to this layer.
    input: Vec<f64>,
    /// Normalized (pre-scale) values and inverse stddev per group.
    gn: Option<(Vec<f64>, Vec<f64>)>,
    /// Pre-ReLU values (post-normalization when present).
    h: Vec<f64>,
    /// Dropout keep mask, if dropout applies.
    mask: Option<Vec<bool>>,
}

struct ForwardPass {
    logits: Vec<f64>,
    caches: Vec<LayerCache>,
}

fn check_params(spec: &MlpSpec, params: &ModelParams) -> Result<(), ModelError> {
    let expected = spec.param_count();
    if params.values.len() != expected {
        return Err(ModelError::ShapeMismatch {
            expected,
            got: params.values.len(),
            context: "parameter vector",
        });
    }
    Ok(())
}

fn check_input(spec: &MlpSpec, x: &[f64]) -> Result<(), ModelError> {
    if x.len() != spec.input_dim {
        return Err(ModelError::ShapeMismatch {
            expected: spec.input_dim,
            got: x.len(),
            context: "feature vector",
        });
    }
    Ok(())
}

fn run_forward(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &[f64],
    mut dropout: Option<&mut Stream>,
) -> Result<ForwardPass, ModelError> {
    check_params(spec, params)?;
    check_input(spec, x)?;
    let p = &params.values;
    let mut activation = x.to_vec();
    let mut caches = Vec::with_capacity(spec.hidden.len() + 1);

    for layer in spec.layout() {
        let mut z = vec![0.0; layer.fan_out];
        matvec(&p[layer.w..layer.w + layer.fan_in * layer.fan_out], layer.fan_out, layer.fan_in, &activation, &mut z);
        for (zi, bi) in z.iter_mut().zip(&p[layer.b..layer.b + layer.fan_out]) {
            *zi += bi;
        }

        let (h, gn_cache) = if let Some((gamma, beta)) = layer.gn {
            let group_size = layer.fan_out / spec.norm_groups;
            let mut normalized = vec![0.0; layer.fan_out];
            let mut inv_std = vec![0.0; spec.norm_groups];
            let mut h = vec![0.0; layer.fan_out];
            #[allow(clippy::needless_range_loop)]
            for g in 0..spec.norm_groups {
                let range = g * group_size..(g + 1) * group_size;
                let slice = &z[range.clone()];
                let mean = slice.iter().sum::<f64>() / group_size as f64;
                let var =
                    slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_size as f64;
                let istd = 1.0 / (var + GN_EPS).sqrt();
                inv_std[g] = istd;
                for j in range {
                    normalized[j] = (z[j] - mean) * istd;
                    h[j] = p[gamma + j] * normalized[j] + p[beta + j];
                }
            }
            (h, Some((normalized, inv_std)))
        } else {
            (z, None)
        };

        let mut out = h.clone();
        if layer.relu {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        let mask = if layer.dropout > 0.0 {
            if let Some(stream) = dropout.as_deref_mut() {
                let keep = 1.0 - layer.dropout;
                let mask: Vec<bool> = (0..out.len()).map(|_| stream.next_f64() < keep).collect();
                for (v, &m) in out.iter_mut().zip(&mask) {
                    *v = if m { *v / keep } else { 0.0 };
                }
                Some(mask)
            } else {
                None // eval mode: dropout disabled
            }
        } else {
            None
        };

        caches.push(LayerCache { input: activation, gn: gn_cache, h, mask });
        activation = out;
    }

    Ok(ForwardPass { logits: activation, caches })
}

/// Deterministic, dropout-free forward pass.
pub fn forward_eval(params: &ModelParams, spec: &MlpSpec, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(run_forward(params, spec, x, None)?.logits)
}

/// Training-mode forward pass; dropout masks are drawn from `key`.
pub fn forward_train(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &[f64],
    key: StreamKey,
) -> Result<Vec<f64>, ModelError> {
    let mut stream = Stream::new(key);
    Ok(run_forward(params, spec, x, Some(&mut stream))?.logits)
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn clamp_logit(z: f64) -> f64 {
    z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Per-sample loss and its gradient with respect to the logits.
fn loss_and_logit_grad(
    loss: &LossSpec,
    logits: &[f64],
    label: usize,
) -> Result<(f64, Vec<f64>), ModelError> {
    match loss {
        LossSpec::BinaryLogit { pos_weight } => {
            if logits.len() != 1 {
                return Err(ModelError::ShapeMismatch {
                    expected: 1,
                    got: logits.len(),
                    context: "binary logit",
                });
            }
            let z = clamp_logit(logits[0]);
            let y = if label == 1 { 1.0 } else { 0.0 };
            let value = pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
            let s = stable_sigmoid(z);
            let grad = pos_weight * y * (s - 1.0) + (1.0 - y) * s;
            Ok((value, vec![grad]))
        }
        LossSpec::CrossEntropy { class_weights } => {
            let k = class_weights.len();
            if logits.len() != k {
                return Err(ModelError::ShapeMismatch { expected: k, got: logits.len(), context: "logits" });
            }
            if label >= k {
                return Err(ModelError::ShapeMismatch { expected: k, got: label, context: "label range" });
            }
            let z: Vec<f64> = logits.iter().map(|v| clamp_logit(*v)).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let w = class_weights[label];
            let value = -w * (z[label] - lse);
            let grad: Vec<f64> = z
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let p = ((v - max).exp()) / sum_exp;
                    w * (p - if i == label { 1.0 } else { 0.0 })
                })
                .collect();
            Ok((value, grad))
        }
    }
}

/// Exact gradient of one example's loss with respect to every parameter,
/// flattened in layout order, plus the loss value.
pub fn per_sample_grad(
    params: &ModelParams,
    spec: &MlpSpec,
    loss: &LossSpec,
    example: Example<'_>,
    key: StreamKey,
) -> Result<(Vec<f64>, f64), ModelError> {
    let mut stream = Stream::new(key);
    let pass = run_forward(params, spec, example.features, Some(&mut stream))?;
    let (loss_value, mut d) = loss_and_logit_grad(loss, &pass.logits, example.label)?;
    if !loss_value.is_finite() {
        return Err(ModelError::NonFiniteLoss { label: example.label });
    }

    let p = &params.values;
    let mut grad = vec![0.0; p.len()];
    let layout = spec.layout();

    for (layer, cache) in layout.iter().zip(&pass.caches).rev() {
        // backward through dropout and ReLU into the pre-activation h
        if let Some(mask) = &cache.mask {
            let keep = 1.0 - layer.dropout;
            for (di, &m) in d.iter_mut().zip(mask) {
                *di = if m { *di / keep } else { 0.0 };
            }
        }
        if layer.relu {
            for (di, &h) in d.iter_mut().zip(&cache.h) {
                if h <= 0.0 {
                    *di = 0.0;
                }
            }
        }
        // backward through group normalization into z
        if let Some((gamma_off, beta_off)) = layer.gn {
            let (normalized, inv_std) = cache.gn.as_ref().expect("cache matches layout");
            let group_size = layer.fan_out / spec.norm_groups;
            let mut dz = vec![0.0; layer.fan_out];
            #[allow(clippy::needless_range_loop)]
            for g in 0..spec.norm_groups {
                let range = g * group_size..(g + 1) * group_size;
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in range.clone() {
                    grad[gamma_off + j] += d[j] * normalized[j];
                    grad[beta_off + j] += d[j];
                    let dxhat = d[j] * p[gamma_off + j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * normalized[j];
                }
                mean_dxhat /= group_size as f64;
                mean_dxhat_xhat /= group_size as f64;
                for j in range {
                    let dxhat = d[j] * p[gamma_off + j];
                    dz[j] = inv_std[g] * (dxhat - mean_dxhat - normalized[j] * mean_dxhat_xhat);
                }
            }
            d = dz;
        }
        // linear layer
        outer_accumulate(&mut grad[layer.w..layer.w + layer.fan_in * layer.fan_out], &d, &cache.input);
        for (gb, di) in grad[layer.b..layer.b + layer.fan_out].iter_mut().zip(&d) {
            *gb += di;
        }
        let mut d_prev = vec![0.0; layer.fan_in];
        matvec_transpose(
            &p[layer.w..layer.w + layer.fan_in * layer.fan_out],
            layer.fan_out,
            layer.fan_in,
            &d,
            &mut d_prev,
        );
        d = d_prev;
    }

    Ok((grad, loss_value))
}

/// Evaluation over one examples iterator: sum-reduced loss, accuracy, and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub sum_loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub count: usize,
}

/// Predicted class: sigmoid threshold 0.5 for the binary head (logit > 0),
/// argmax otherwise.
pub fn predict(logits: &[f64]) -> usize {
    if logits.len() == 1 {
        usize::from(logits[0] > 0.0)
    } else {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Sum loss plus accuracy and F1 (positive class when binary, macro
/// otherwise) in eval mode.
pub fn evaluate<'a, I>(
    params: &ModelParams,
    spec: &MlpSpec,
    loss: &LossSpec,
    examples: I,
) -> Result<EvalMetrics, ModelError>
where
    I: IntoIterator<Item = Example<'a>>,
{
    let classes = loss.num_classes();
    let mut sum_loss = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];

    for example in examples {
        let logits = forward_eval(params, spec, example.features)?;
        let (value, _) = loss_and_logit_grad(loss, &logits, example.label)?;
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { label: example.label });
        }
        sum_loss += value;
        let pred = predict(&logits);
        if pred == example.label {
            correct += 1;
            tp[pred] += 1;
        } else {
            fp[pred] += 1;
            fn_[example.label] += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::EmptySplit);
    }

    let f1 = match loss {
        LossSpec::BinaryLogit { .. } => f1_from_counts(tp[1], fp[1], fn_[1]),
        LossSpec::CrossEntropy { .. } => {
            let total: f64 = (0..classes).map(|c| f1_from_counts(tp[c], fp[c], fn_[c])).sum();
            total / classes as f64
        }
    };

    Ok(EvalMetrics { sum_loss, accuracy: correct as f64 / count as f64, f1, count })
}

/// The plain two-hidden-layer tabular preset: 256-256 ReLU, binary logit
/// head, positive-class weight 2.0.
pub fn income_simple_preset(input_dim: usize) -> (MlpSpec, LossSpec) {
    let spec = MlpSpec {
        input_dim,
        hidden: vec![HiddenLayer::plain(256), HiddenLayer::plain(256)],
        head: OutputHead::BinaryLogit,
        norm_groups: 1,
    };
    (spec, LossSpec::BinaryLogit { pos_weight: 2.0 })
}

/// The deeper preset: 128-64-32 hidden units with group normalization
/// after the first two linear layers, dropout 0.3 after the third, and a
/// two-logit head with class-weighted cross-entropy.
pub fn complex_preset(input_dim: usize, class_weights: [f64; 2]) -> (MlpSpec, LossSpec) {
    let spec = MlpSpec {
        input_dim,
        hidden: vec![
            HiddenLayer { width: 128, group_norm: true, dropout: 0.0 },
            HiddenLayer { width: 64, group_norm: true, dropout: 0.0 },
            HiddenLayer { width: 32, group_norm: false, dropout: 0.3 },
        ],
        head: OutputHead::MultiLogit(2),
        norm_groups: 8,
    };
    (spec, LossSpec::CrossEntropy { class_weights: class_weights.to_vec() })
}
