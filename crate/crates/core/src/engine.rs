//! The differentially private training loop: Poisson sampling, per-sample
//! gradients, clipping, noising, averaging, optimizer updates, adaptive
//! threshold maintenance, early stopping, and step-level instrumentation.
//!
//! Determinism contract: every random draw is keyed by (seed, domain,
//! step, sample index), per-sample work is reduced over fixed-size chunks
//! in index order, and shared state has a single writer per step. The
//! result is a pure function of (config, dataset, seed) at any thread
//! count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{SubgroupMetrics, SubgroupReport};
use crate::clip::{
    apply_strategy, noisy_unclipped_fraction, update_threshold, ClipError, ClipState, ClipStrategy,
};
use crate::data::{DataError, Dataset};
use crate::model::{
    evaluate, init_params, per_sample_grad, EvalMetrics, LossSpec, MlpSpec, ModelError, ModelParams,
};
use crate::numerics::{add_assign, l2_norm, Stream, StreamKey};
use crate::privacy::{
    add_gradient_noise, compose, default_orders, to_epsilon, AccountantState, MechanismEvent,
    PrivacyError,
};

/// Fixed reduction chunk size; independent of the worker count so that
/// floating-point summation order never changes.
const REDUCE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("DivergedStep: non-finite update at step {step}")]
    DivergedStep { step: u64 },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("NoTraces: step trace log is empty")]
    NoTraces,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamConfig),
}

/// Everything one training run needs beyond the dataset and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Poisson sampling rate q.
    pub sampling_rate: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub strategy: ClipStrategy,
    /// Initial clipping bound C0.
    pub initial_bound: f64,
    /// Gradient noise multiplier sigma; 0 disables noise (and accounting).
    pub noise_multiplier: f64,
    /// Adaptive controller: target quantile gamma.
    pub target_quantile: f64,
    /// Adaptive controller: bound learning rate eta_C.
    pub bound_lr: f64,
    /// Stddev of the unclipped-count noise (sigma_b).
    pub fraction_noise: f64,
    /// Division guard inside the tanh scaling factor.
    pub eps_div: f64,
    /// Clamp the noisy fraction into [0, 1] before the bound update
    /// (off by default; the update uses the raw estimate).
    pub clamp_fraction: bool,
    pub seed: u64,
    /// Early stopping patience in epochs; None never stops early.
    pub patience: Option<usize>,
    /// Divide the noised sum by q*N instead of the realized batch size.
    pub divide_by_expected_batch: bool,
    /// Compose the fraction mechanism into the accountant on adaptive runs.
    pub account_adaptive: bool,
    /// Renyi order grid.
    pub orders: Vec<u32>,
    /// Delta at which epsilon is reported.
    pub delta: f64,
}

impl TrainConfig {
    pub fn new(strategy: ClipStrategy, initial_bound: f64, seed: u64) -> Self {
        Self {
            epochs: 1,
            sampling_rate: 0.01,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam(AdamConfig::default()),
            strategy,
            initial_bound,
            noise_multiplier: 0.0,
            target_quantile: 0.5,
            bound_lr: 0.2,
            fraction_noise: 0.0,
            eps_div: 1e-6,
            clamp_fraction: false,
            seed,
            patience: Some(10),
            divide_by_expected_batch: false,
            account_adaptive: true,
            orders: default_orders(),
            delta: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.epochs == 0 {
            return Err(EngineError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(EngineError::InvalidConfig(format!(
                "sampling_rate must be in (0, 1], got {}",
                self.sampling_rate
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EngineError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.initial_bound > 0.0) {
            return Err(EngineError::InvalidConfig("initial_bound must be positive".into()));
        }
        if !(self.noise_multiplier >= 0.0) || !(self.fraction_noise >= 0.0) {
            return Err(EngineError::InvalidConfig("noise scales must be >= 0".into()));
        }
        Ok(())
    }

    /// One epoch is ceil(1/q) Poisson steps: one expected data pass.
    pub fn steps_per_epoch(&self) -> u64 {
        (1.0 / self.sampling_rate).ceil() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch()
    }

    pub fn clip_state(&self) -> ClipState {
        if self.strategy.is_adaptive() {
            ClipState::adaptive(self.initial_bound, self.target_quantile, self.bound_lr, self.fraction_noise)
        } else {
            ClipState::fixed(self.initial_bound)
        }
    }
}

/// Model architecture and loss for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub mlp: MlpSpec,
    pub loss: LossSpec,
}

/// Adam/SGD moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam(_) => (vec![0.0; dim], vec![0.0; dim]),
        };
        Self { kind, m, v, step: 0 }
    }
}

/// Bias-corrected Adam update; returns the parameter delta.
pub fn adam_update(opt: &mut OptimizerState, grad: &[f64], learning_rate: f64) -> Vec<f64> {
    let adam = match opt.kind {
        OptimizerKind::Adam(cfg) => cfg,
        OptimizerKind::Sgd => return grad.iter().map(|g| -learning_rate * g).collect(),
    };
    opt.step += 1;
    let bc1 = 1.0 - adam.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - adam.beta2.powi(opt.step as i32);
    let mut delta = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        opt.m[i] = adam.beta1 * opt.m[i] + (1.0 - adam.beta1) * grad[i];
        opt.v[i] = adam.beta2 * opt.v[i] + (1.0 - adam.beta2) * grad[i] * grad[i];
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        delta[i] = -learning_rate * m_hat / (v_hat.sqrt() + adam.eps);
    }
    delta
}

/// Poisson sample: each index joins independently with probability q.
pub fn poisson_sample(n: usize, q: f64, key: StreamKey) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    let mut stream = Stream::new(key);
    (0..n).filter(|_| stream.next_f64() < q).collect()
}

/// Pre/post-clip norms of one subgroup's accumulated gradient in one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupNorms {
    pub attribute: String,
    pub group: String,
    pub pre_clip: f64,
    pub post_clip: f64,
}

/// What one training step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub batch_size: usize,
    pub bound_before: f64,
    pub bound_after: f64,
    /// Noisy unclipped fraction, when the run is adaptive.
    pub noisy_fraction: Option<f64>,
    /// Norm of the noised averaged gradient actually applied.
    pub noised_avg_norm: f64,
    pub subgroups: Vec<SubgroupNorms>,
}

/// Accumulators for one reduction chunk: clipped sum, unclipped bits in
/// batch order, and per-subgroup raw/clipped sums.
struct ChunkPartial {
    clipped_sum: Vec<f64>,
    bits: Vec<bool>,
    subgroup_sums: BTreeMap<(usize, u16), (Vec<f64>, Vec<f64>)>,
}

fn grad_chunk(
    indices: &[usize],
    params: &ModelParams,
    setup: &TrainSetup,
    config: &TrainConfig,
    data: &Dataset,
    bound: f64,
    step: u64,
) -> Result<ChunkPartial, EngineError> {
    let dim = params.values.len();
    let mut partial = ChunkPartial {
        clipped_sum: vec![0.0; dim],
        bits: Vec::with_capacity(indices.len()),
        subgroup_sums: BTreeMap::new(),
    };
    for &i in indices {
        let key = StreamKey::new(config.seed, "dropout", step, i as u64);
        let (grad, _loss) = per_sample_grad(params, &setup.mlp, &setup.loss, data.example(i), key)?;
        let psg = apply_strategy(config.strategy, grad, bound, config.eps_div)?;
        partial.bits.push(psg.unclipped);
        add_assign(&mut partial.clipped_sum, &psg.clipped);
        for (attr_idx, column) in data.protected.iter().enumerate() {
            let entry = partial
                .subgroup_sums
                .entry((attr_idx, column.values[i]))
                .or_insert_with(|| (vec![0.0; dim], vec![0.0; dim]));
            add_assign(&mut entry.0, &psg.raw);
            add_assign(&mut entry.1, &psg.clipped);
        }
    }
    Ok(partial)
}

/// One DP training step over an already-sampled batch.
///
/// Per-sample gradients are clipped under the current bound, summed in
/// ascending index order, noised once with stddev sigma * C, averaged,
/// and applied through the optimizer. Adaptive runs then update the bound
/// from the noisy unclipped fraction; the accountant is composed for the
/// mechanisms that ran (gradient, plus the fraction release when
/// adaptive accounting is on) even when the batch was empty.
#[allow(clippy::too_many_arguments)]
pub fn dp_step(
    params: &mut ModelParams,
    batch: &[usize],
    data: &Dataset,
    setup: &TrainSetup,
    config: &TrainConfig,
    clip_state: &mut ClipState,
    opt: &mut OptimizerState,
    accountant: &mut AccountantState,
    step: u64,
) -> Result<StepTrace, EngineError> {
    let bound = clip_state.bound;
    let adaptive = clip_state.adaptive;

    let compose_step = |accountant: &mut AccountantState| {
        *accountant = compose(
            accountant,
            &MechanismEvent { q: config.sampling_rate, sigma: config.noise_multiplier, count: 1 },
        );
        if adaptive && config.account_adaptive {
            *accountant = compose(
                accountant,
                &MechanismEvent { q: config.sampling_rate, sigma: config.fraction_noise, count: 1 },
            );
        }
    };

    if batch.is_empty() {
        compose_step(accountant);
        return Ok(StepTrace {
            step,
            batch_size: 0,
            bound_before: bound,
            bound_after: bound,
            noisy_fraction: None,
            noised_avg_norm: 0.0,
            subgroups: Vec::new(),
        });
    }

    // ordered parallel reduction over fixed-size chunks
    let partials: Vec<ChunkPartial> = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| grad_chunk(chunk, params, setup, config, data, bound, step))
        .collect::<Result<_, _>>()?;

    let dim = params.values.len();
    let mut clipped_sum = vec![0.0; dim];
    let mut bits = Vec::with_capacity(batch.len());
    let mut subgroup_sums: BTreeMap<(usize, u16), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for partial in partials {
        add_assign(&mut clipped_sum, &partial.clipped_sum);
        bits.extend(partial.bits);
        for (key, (raw, clipped)) in partial.subgroup_sums {
            let entry =
                subgroup_sums.entry(key).or_insert_with(|| (vec![0.0; dim], vec![0.0; dim]));
            add_assign(&mut entry.0, &raw);
            add_assign(&mut entry.1, &clipped);
        }
    }

    let noise_key = StreamKey::new(config.seed, "noise", step, 0);
    let noised = add_gradient_noise(&clipped_sum, config.noise_multiplier, bound, noise_key)?;
    let divisor = if config.divide_by_expected_batch {
        config.sampling_rate * data.len() as f64
    } else {
        batch.len() as f64
    };
    let averaged: Vec<f64> = noised.iter().map(|v| v / divisor).collect();
    let avg_norm = l2_norm(&averaged).map_err(|_| EngineError::DivergedStep { step })?;

    let delta = adam_update(opt, &averaged, config.learning_rate);
    for (p, d) in params.values.iter_mut().zip(&delta) {
        *p += d;
        if !p.is_finite() {
            return Err(EngineError::DivergedStep { step });
        }
    }

    let mut noisy_fraction = None;
    if adaptive {
        let fraction_key = StreamKey::new(config.seed, "fraction", step, 0);
        let mut b = noisy_unclipped_fraction(&bits, clip_state.fraction_noise, fraction_key)?;
        if config.clamp_fraction {
            b = b.clamp(0.0, 1.0);
        }
        noisy_fraction = Some(b);
        *clip_state = update_threshold(clip_state, b)?;
    }

    compose_step(accountant);

    let mut subgroups = Vec::with_capacity(subgroup_sums.len());
    for ((attr_idx, group_idx), (raw, clipped)) in subgroup_sums {
        let column = &data.protected[attr_idx];
        subgroups.push(SubgroupNorms {
            attribute: column.attribute.clone(),
            group: column.groups[group_idx as usize].clone(),
            pre_clip: l2_norm(&raw).map_err(|_| EngineError::DivergedStep { step })?,
            post_clip: l2_norm(&clipped).map_err(|_| EngineError::DivergedStep { step })?,
        });
    }

    Ok(StepTrace {
        step,
        batch_size: batch.len(),
        bound_before: bound,
        bound_after: clip_state.bound,
        noisy_fraction,
        noised_avg_norm: avg_norm,
        subgroups,
    })
}

/// Train/validation metrics after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: EvalMetrics,
    pub validation: EvalMetrics,
}

/// Outcome of one full training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    /// Parameters of the best validation-F1 checkpoint.
    pub params: ModelParams,
    pub epochs: Vec<EpochMetrics>,
    pub traces: Vec<StepTrace>,
    /// (epsilon, best order) for the executed steps; None when the noise
    /// multiplier was zero (no finite guarantee).
    pub epsilon: Option<f64>,
    pub best_order: Option<u32>,
    pub delta: f64,
    pub accountant: AccountantState,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub test: EvalMetrics,
    pub subgroups: SubgroupReport,
}

/// The three dataset splits of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn subgroup_report(
    params: &ModelParams,
    setup: &TrainSetup,
    split: &Dataset,
    split_name: &str,
    seed: u64,
) -> Result<SubgroupReport, EngineError> {
    let mut groups: BTreeMap<String, BTreeMap<String, SubgroupMetrics>> = BTreeMap::new();
    for column in &split.protected {
        let mut per_group = BTreeMap::new();
        for (g, group_name) in column.groups.iter().enumerate() {
            let members =
                (0..split.len()).filter(|&i| column.values[i] as usize == g).collect::<Vec<_>>();
            if members.is_empty() {
                continue;
            }
            let metrics = evaluate(
                params,
                &setup.mlp,
                &setup.loss,
                members.iter().map(|&i| split.example(i)),
            )?;
            per_group.insert(
                group_name.clone(),
                SubgroupMetrics {
                    sum_loss: metrics.sum_loss,
                    count: metrics.count,
                    accuracy: metrics.accuracy,
                    f1: metrics.f1,
                },
            );
        }
        groups.insert(column.attribute.clone(), per_group);
    }
    Ok(SubgroupReport { split: split_name.to_string(), seed, groups })
}

/// Run the full training loop described by `config`.
///
/// Epochs are `ceil(1/q)` Poisson steps with a train/validation pass after
/// each; early stopping keeps the best validation-F1 checkpoint. The
/// accountant only reflects steps that actually executed.
pub fn train(config: &TrainConfig, setup: &TrainSetup, splits: &Splits) -> Result<TrainResult, EngineError> {
    config.validate()?;
    setup.mlp.validate()?;
    setup.loss.validate(setup.mlp.head)?;
    if splits.train.dim != setup.mlp.input_dim {
        return Err(EngineError::InvalidConfig(format!(
            "model expects {} features, dataset has {}",
            setup.mlp.input_dim, splits.train.dim
        )));
    }

    let mut params = init_params(&setup.mlp, StreamKey::new(config.seed, "init", 0, 0))?;
    let mut opt = OptimizerState::new(config.optimizer, params.values.len());
    let mut clip_state = config.clip_state();
    let mut accountant = AccountantState::new(config.orders.clone());

    let steps_per_epoch = config.steps_per_epoch();
    let mut traces = Vec::new();
    let mut epochs = Vec::new();
    let mut best_params = params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_without_improvement = 0usize;
    let mut stopped_epoch = 0usize;

    'training: for epoch in 0..config.epochs {
        for s in 0..steps_per_epoch {
            let step = epoch as u64 * steps_per_epoch + s;
            let batch = poisson_sample(
                splits.train.len(),
                config.sampling_rate,
                StreamKey::new(config.seed, "poisson", step, 0),
            );
            let trace = dp_step(
                &mut params,
                &batch,
                &splits.train,
                setup,
                config,
                &mut clip_state,
                &mut opt,
                &mut accountant,
                step,
            )?;
            traces.push(trace);
        }

        let train_metrics = evaluate(&params, &setup.mlp, &setup.loss, splits.train.examples())?;
        let val_metrics = evaluate(&params, &setup.mlp, &setup.loss, splits.validation.examples())?;
        epochs.push(EpochMetrics { epoch, train: train_metrics, validation: val_metrics });
        stopped_epoch = epoch;

        if val_metrics.f1 > best_f1 {
            best_f1 = val_metrics.f1;
            best_epoch = epoch;
            best_params = params.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if let Some(patience) = config.patience {
                if epochs_without_improvement >= patience {
                    break 'training;
                }
            }
        }
    }

    let test = evaluate(&best_params, &setup.mlp, &setup.loss, splits.test.examples())?;
    let subgroups = subgroup_report(&best_params, setup, &splits.test, "test", config.seed)?;
    let (epsilon, best_order) = if config.noise_multiplier > 0.0 {
        match to_epsilon(&accountant, config.delta) {
            Ok((eps, order)) => (Some(eps), Some(order)),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };

    Ok(TrainResult {
        params: best_params,
        epochs,
        traces,
        epsilon,
        best_order,
        delta: config.delta,
        accountant,
        stopped_epoch,
        best_epoch,
        test,
        subgroups,
    })
}

/// Per-subgroup clipping statistics averaged over the steps where the
/// subgroup appeared: mean pre-clip norm, mean post-clip norm, and their
/// difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub attribute: String,
    pub group: String,
    pub mean_pre_clip: f64,
    pub mean_post_clip: f64,
    pub mean_diff: f64,
    pub steps_observed: usize,
}

/// Aggregate trace records into Before/After/Diff rows, sorted by
/// attribute then group. Subgroups absent from every batch simply do not
/// appear; callers render them as missing.
pub fn subgroup_clip_stats(traces: &[StepTrace]) -> Result<Vec<ClipStats>, EngineError> {
    if traces.is_empty() {
        return Err(EngineError::NoTraces);
    }
    let mut acc: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for trace in traces {
        for sg in &trace.subgroups {
            let entry = acc.entry((sg.attribute.clone(), sg.group.clone())).or_insert((0.0, 0.0, 0));
            entry.0 += sg.pre_clip;
            entry.1 += sg.post_clip;
            entry.2 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|((attribute, group), (pre, post, n))| {
            let mean_pre = pre / n as f64;
            let mean_post = post / n as f64;
            ClipStats {
                attribute,
                group,
                mean_pre_clip: mean_pre,
                mean_post_clip: mean_post,
                mean_diff: mean_pre - mean_post,
                steps_observed: n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Example, OutputHead};

    fn linear_setup(dim: usize) -> TrainSetup {
        TrainSetup {
            mlp: MlpSpec {
                input_dim: dim,
                hidden: vec![],
                head: OutputHead::BinaryLogit,
                norm_groups: 1,
            },
            loss: LossSpec::BinaryLogit { pos_weight: 1.0 },
        }
    }

    fn toy_dataset(n: usize) -> Dataset {
        use crate::data::{Provenance, ProtectedColumn};
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut stream = Stream::new(StreamKey::new(101, "toydata", 0, 0));
        while labels.len() < n {
            let x0 = 2.0 * stream.next_f64() - 1.0;
            let x1 = 2.0 * stream.next_f64() - 1.0;
            if (x0 + x1).abs() < 0.2 {
                continue; // keep the classes separated by a margin
            }
            features.extend_from_slice(&[x0, x1]);
            labels.push(usize::from(x0 + x1 > 0.0));
        }
        Dataset {
            feature_names: vec!["x0".into(), "x1".into()],
            dim: 2,
            features,
            labels,
            numeric_columns: vec![0, 1],
            protected: vec![ProtectedColumn {
                attribute: "group".into(),
                groups: vec!["a".into(), "b".into()],
                values: (0..n).map(|i| (i % 2) as u16).collect(),
            }],
            provenance: Provenance { source: "toy".into(), preprocessing: "none".into() },
        }
    }

    fn toy_splits(n: usize) -> Splits {
        let ds = toy_dataset(n);
        let key = StreamKey::new(1, "split", 0, 0);
        let (train, validation, test) = crate::data::stratified_split(&ds, [0.7, 0.1, 0.2], key).unwrap();
        Splits { train, validation, test }
    }

    #[test]
    fn poisson_full_rate_takes_everything() {
        let key = StreamKey::new(1, "poisson", 0, 0);
        assert_eq!(poisson_sample(5, 1.0, key), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn poisson_is_deterministic_and_concentrated() {
        let key = StreamKey::new(2, "poisson", 9, 0);
        let a = poisson_sample(100_000, 0.1, key);
        let b = poisson_sample(100_000, 0.1, key);
        assert_eq!(a, b);
        let expected = 10_000.0;
        let sd = (100_000.0f64 * 0.1 * 0.9).sqrt();
        assert!((a.len() as f64 - expected).abs() < 3.0 * sd, "batch {}", a.len());
        assert!(a.windows(2).all(|w| w[0] < w[1]), "ascending order");
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut opt = OptimizerState::new(OptimizerKind::Adam(AdamConfig::default()), 1);
        let delta = adam_update(&mut opt, &[0.0], 0.1);
        assert_eq!(delta, vec![0.0]);

        let mut opt = OptimizerState::new(OptimizerKind::Adam(AdamConfig::default()), 1);
        let delta = adam_update(&mut opt, &[1.0], 0.1);
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((delta[0] - expect).abs() < 1e-15, "{} vs {expect}", delta[0]);
    }

    #[test]
    fn adam_constant_gradient_reaches_sign_steady_state() {
        let mut opt = OptimizerState::new(OptimizerKind::Adam(AdamConfig::default()), 2);
        let lr = 0.01;
        let mut delta = Vec::new();
        for _ in 0..5_000 {
            delta = adam_update(&mut opt, &[3.0, -0.5], lr);
        }
        assert!((delta[0] + lr).abs() < 1e-6, "{}", delta[0]);
        assert!((delta[1] - lr).abs() < 1e-6, "{}", delta[1]);
    }

    #[test]
    fn dp_step_with_machinery_disabled_is_a_plain_batch_step() {
        let setup = linear_setup(2);
        let data = toy_dataset(40);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 1e9, 3);
        config.sampling_rate = 1.0;
        config.optimizer = OptimizerKind::Sgd;
        config.learning_rate = 0.5;

        let mut params = init_params(&setup.mlp, StreamKey::new(3, "init", 0, 0)).unwrap();
        let reference = params.clone();
        let batch: Vec<usize> = (0..data.len()).collect();
        let mut clip_state = config.clip_state();
        let mut opt = OptimizerState::new(config.optimizer, params.values.len());
        let mut accountant = AccountantState::default();
        dp_step(&mut params, &batch, &data, &setup, &config, &mut clip_state, &mut opt, &mut accountant, 0)
            .unwrap();

        // hand-computed full-batch mean gradient step
        let mut mean_grad = vec![0.0; reference.values.len()];
        for i in 0..data.len() {
            let (g, _) = per_sample_grad(
                &reference,
                &setup.mlp,
                &setup.loss,
                data.example(i),
                StreamKey::new(3, "dropout", 0, i as u64),
            )
            .unwrap();
            add_assign(&mut mean_grad, &g);
        }
        for ((p, r), g) in params.values.iter().zip(&reference.values).zip(&mean_grad) {
            let expect = r - 0.5 * g / data.len() as f64;
            assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
        }
    }

    #[test]
    fn dp_step_single_example_moves_by_lr_times_clipped_gradient() {
        let setup = linear_setup(2);
        let data = toy_dataset(4);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 1e9, 5);
        config.sampling_rate = 1.0;
        config.optimizer = OptimizerKind::Sgd;
        config.learning_rate = 0.25;

        let mut params = ModelParams { values: vec![0.1, -0.2, 0.05] };
        let reference = params.clone();
        let (g, _) = per_sample_grad(
            &reference,
            &setup.mlp,
            &setup.loss,
            data.example(2),
            StreamKey::new(5, "dropout", 0, 2),
        )
        .unwrap();
        let mut clip_state = config.clip_state();
        let mut opt = OptimizerState::new(config.optimizer, 3);
        let mut accountant = AccountantState::default();
        dp_step(&mut params, &[2], &data, &setup, &config, &mut clip_state, &mut opt, &mut accountant, 0)
            .unwrap();
        for ((p, r), gi) in params.values.iter().zip(&reference.values).zip(&g) {
            assert!((p - (r - 0.25 * gi)).abs() < 1e-15);
        }
    }

    #[test]
    fn adaptive_step_with_fraction_at_target_keeps_the_bound() {
        let setup = linear_setup(2);
        let data = toy_dataset(8);
        let mut config = TrainConfig::new(ClipStrategy::SoftAdaClip, 0.05, 6);
        config.sampling_rate = 1.0;
        config.fraction_noise = 0.0;

        // pick a bound such that exactly half the batch is unclipped
        let params0 = init_params(&setup.mlp, StreamKey::new(6, "init", 0, 0)).unwrap();
        let mut norms: Vec<f64> = (0..data.len())
            .map(|i| {
                let (g, _) = per_sample_grad(
                    &params0,
                    &setup.mlp,
                    &setup.loss,
                    data.example(i),
                    StreamKey::new(6, "dropout", 0, i as u64),
                )
                .unwrap();
                l2_norm(&g).unwrap()
            })
            .collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_bound = 0.5 * (norms[3] + norms[4]);
        config.initial_bound = median_bound;

        let mut params = params0.clone();
        let mut clip_state = config.clip_state();
        let mut opt = OptimizerState::new(config.optimizer, params.values.len());
        let mut accountant = AccountantState::default();
        let batch: Vec<usize> = (0..data.len()).collect();
        let trace = dp_step(
            &mut params, &batch, &data, &setup, &config, &mut clip_state, &mut opt, &mut accountant, 0,
        )
        .unwrap();
        assert_eq!(trace.noisy_fraction, Some(0.5));
        assert_eq!(clip_state.bound, median_bound, "exp(0) keeps C");
    }

    #[test]
    fn empty_batch_skips_update_but_composes_privacy() {
        let setup = linear_setup(2);
        let data = toy_dataset(4);
        let mut config = TrainConfig::new(ClipStrategy::SoftAdaClip, 0.1, 7);
        config.noise_multiplier = 1.0;
        config.fraction_noise = 2.0;

        let mut params = init_params(&setup.mlp, StreamKey::new(7, "init", 0, 0)).unwrap();
        let before = params.clone();
        let mut clip_state = config.clip_state();
        let mut opt = OptimizerState::new(config.optimizer, params.values.len());
        let mut accountant = AccountantState::default();
        let trace = dp_step(
            &mut params, &[], &data, &setup, &config, &mut clip_state, &mut opt, &mut accountant, 0,
        )
        .unwrap();
        assert_eq!(params, before);
        assert_eq!(trace.batch_size, 0);
        assert_eq!(accountant.steps_composed, 2, "gradient + fraction mechanisms");
        assert_eq!(clip_state.bound, 0.1);
    }

    #[test]
    fn train_runs_exactly_the_configured_steps_and_compositions() {
        let splits = toy_splits(60);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 1.0, 11);
        config.epochs = 3;
        config.sampling_rate = 0.25;
        config.noise_multiplier = 1.0;
        config.patience = None;

        let result = train(&config, &setup, &splits).unwrap();
        let expected_steps = 3 * config.steps_per_epoch();
        assert_eq!(result.traces.len() as u64, expected_steps);
        assert_eq!(result.accountant.steps_composed, expected_steps);
        assert_eq!(result.epochs.len(), 3);
        assert!(result.epsilon.is_some());
    }

    #[test]
    fn adaptive_accounting_doubles_compositions() {
        let splits = toy_splits(60);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::SoftAdaClip, 1.0, 11);
        config.epochs = 2;
        config.sampling_rate = 0.25;
        config.noise_multiplier = 1.0;
        config.fraction_noise = 2.0;
        config.patience = None;

        let result = train(&config, &setup, &splits).unwrap();
        assert_eq!(result.accountant.steps_composed, 2 * 2 * config.steps_per_epoch());

        config.account_adaptive = false;
        let result = train(&config, &setup, &splits).unwrap();
        assert_eq!(result.accountant.steps_composed, 2 * config.steps_per_epoch());
    }

    #[test]
    fn noise_scale_tracks_the_pre_update_bound() {
        // with sigma > 0 and an adaptive bound, replaying the noise stream
        // with the recorded bound_before must reproduce the step exactly;
        // verified indirectly through trace bookkeeping
        let splits = toy_splits(40);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::SoftAdaClip, 0.5, 13);
        config.epochs = 2;
        config.sampling_rate = 0.5;
        config.noise_multiplier = 0.7;
        config.fraction_noise = 1.0;
        config.patience = None;
        let result = train(&config, &setup, &splits).unwrap();
        for pair in result.traces.windows(2) {
            assert_eq!(
                pair[0].bound_after, pair[1].bound_before,
                "bound evolves between, not within, steps"
            );
        }
        assert!(result.traces.iter().any(|t| t.bound_before != t.bound_after));
    }

    #[test]
    fn training_is_deterministic() {
        let splits = toy_splits(50);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::SoftAdaClip, 0.1, 17);
        config.epochs = 2;
        config.sampling_rate = 0.2;
        config.noise_multiplier = 1.1;
        config.fraction_noise = 1.0;
        let a = train(&config, &setup, &splits).unwrap();
        let b = train(&config, &setup, &splits).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_toy_problem_converges_without_privacy() {
        let splits = toy_splits(200);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 1e9, 19);
        config.sampling_rate = 1.0;
        config.epochs = 200; // one step per epoch at q = 1
        config.learning_rate = 0.05;
        config.optimizer = OptimizerKind::Adam(AdamConfig::default());
        config.patience = None;
        let result = train(&config, &setup, &splits).unwrap();
        let last = result.epochs.last().unwrap();
        assert!(last.train.accuracy >= 0.99, "train accuracy {}", last.train.accuracy);
    }

    #[test]
    fn early_stopping_keeps_the_best_checkpoint() {
        let splits = toy_splits(80);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 0.05, 23);
        config.epochs = 40;
        config.sampling_rate = 0.5;
        config.noise_multiplier = 3.0; // heavy noise so validation F1 wobbles
        config.patience = Some(3);
        let result = train(&config, &setup, &splits).unwrap();
        assert!(result.stopped_epoch < 40 || result.epochs.len() == 40);
        let best = result
            .epochs
            .iter()
            .map(|e| e.validation.f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(result.epochs[result.best_epoch].validation.f1, best);
    }

    #[test]
    fn subgroup_sums_cover_the_whole_test_split() {
        let splits = toy_splits(60);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 1.0, 29);
        config.epochs = 1;
        config.sampling_rate = 0.5;
        let result = train(&config, &setup, &splits).unwrap();
        let by_group = &result.subgroups.groups["group"];
        let total: f64 = by_group.values().map(|m| m.sum_loss).sum();
        assert!((total - result.test.sum_loss).abs() < 1e-9);
        let counts: usize = by_group.values().map(|m| m.count).sum();
        assert_eq!(counts, splits.test.len());
    }

    #[test]
    fn clip_stats_single_sample_diff_is_the_bound() {
        // one sample with ||g|| = 2C under hard clipping: diff = C
        let trace = StepTrace {
            step: 0,
            batch_size: 1,
            bound_before: 0.5,
            bound_after: 0.5,
            noisy_fraction: None,
            noised_avg_norm: 0.0,
            subgroups: vec![SubgroupNorms {
                attribute: "group".into(),
                group: "a".into(),
                pre_clip: 1.0,
                post_clip: 0.5,
            }],
        };
        let stats = subgroup_clip_stats(&[trace]).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].mean_diff, 0.5);
        assert!(subgroup_clip_stats(&[]).is_err());
    }

    #[test]
    fn clip_stats_table_arithmetic() {
        // Before 403.13, After 5.85 -> Diff 397.28
        let trace = StepTrace {
            step: 0,
            batch_size: 1,
            bound_before: 1.0,
            bound_after: 1.0,
            noisy_fraction: None,
            noised_avg_norm: 0.0,
            subgroups: vec![SubgroupNorms {
                attribute: "gender".into(),
                group: "male".into(),
                pre_clip: 403.13,
                post_clip: 5.85,
            }],
        };
        let stats = subgroup_clip_stats(&[trace]).unwrap();
        assert!((stats[0].mean_diff - 397.28).abs() < 1e-9);
    }

    #[test]
    fn unclipped_traces_have_equal_before_and_after() {
        let splits = toy_splits(40);
        let setup = linear_setup(2);
        let mut config = TrainConfig::new(ClipStrategy::Hard, 1e9, 31);
        config.epochs = 1;
        config.sampling_rate = 0.5;
        let result = train(&config, &setup, &splits).unwrap();
        let stats = subgroup_clip_stats(&result.traces).unwrap();
        for s in stats {
            assert!((s.mean_pre_clip - s.mean_post_clip).abs() < 1e-9);
            assert!(s.mean_diff.abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_matches_manual_sum() {
        let setup = linear_setup(2);
        let data = toy_dataset(10);
        let params = init_params(&setup.mlp, StreamKey::new(37, "init", 0, 0)).unwrap();
        let via_eval = evaluate(&params, &setup.mlp, &setup.loss, data.examples()).unwrap();
        let mut manual = 0.0;
        for i in 0..data.len() {
            let ex: Example = data.example(i);
            let (_, loss) = per_sample_grad(
                &params,
                &setup.mlp,
                &setup.loss,
                ex,
                StreamKey::new(37, "dropout", 0, i as u64),
            )
            .unwrap();
            manual += loss;
        }
        assert!((via_eval.sum_loss - manual).abs() < 1e-9);
    }
}
