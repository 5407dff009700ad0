//! Experiment assembly: turn a parsed config into datasets, model setup,
//! calibrated noise, and executed training runs with their output files.

use std::path::Path;
use std::time::Instant;

use fairclip_core::analysis::SubgroupReport;
use fairclip_core::data::{
    adult_default_schema, balance_by_group, default_consolidation, load_adult, normalize_splits,
    read_cache, stratified_split, synth_generate, write_cache, ConsolidationMap, Dataset,
};
use fairclip_core::engine::{
    train, AdamConfig, OptimizerKind, Splits, TrainConfig, TrainResult, TrainSetup,
};
use fairclip_core::model::{
    complex_preset, income_simple_preset, HiddenLayer, LossSpec, MlpSpec, OutputHead,
};
use fairclip_core::numerics::StreamKey;
use fairclip_core::privacy::{calibrate_sigma, default_orders, MechanismEvent, PrivacyParams};

use crate::config::{DataSource, ExperimentConfig, ModelPreset, OptimizerChoice};
use crate::error::CliError;
use crate::output::{RunMeta, RunOutcome, RunRecord, RUN_SCHEMA};

/// Everything derived from the config that is shared across seeds.
pub struct Prepared {
    pub splits: Splits,
    pub setup: TrainSetup,
    pub dataset_name: String,
    pub preset_name: String,
    pub sampling_rate: f64,
    pub expected_batch: f64,
    pub fraction_noise: f64,
    pub orders: Vec<u32>,
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    match config.data.source {
        DataSource::Synthetic => {
            let spec = config.data.synthetic.as_ref().expect("validated");
            synth_generate(spec).map_err(|e| CliError::config(format!("synthetic data: {e}")))
        }
        DataSource::Adult => {
            if let Some(cache) = &config.data.cache {
                let cache_path = Path::new(cache);
                if cache_path.exists() {
                    return read_cache(cache_path)
                        .map_err(|e| CliError::config(format!("dataset cache: {e}")));
                }
            }
            let path = config
                .data
                .path
                .as_ref()
                .ok_or_else(|| CliError::config("[data] adult source needs path".into()))?;
            let consolidation = match &config.data.consolidation_map {
                Some(map_path) => {
                    let text = std::fs::read_to_string(map_path)
                        .map_err(|e| CliError::config(format!("consolidation map: {e}")))?;
                    ConsolidationMap::parse(&text)
                        .map_err(|e| CliError::config(format!("consolidation map: {e}")))?
                }
                None => default_consolidation(),
            };
            let mut schema = adult_default_schema();
            schema.protected_as_features = config.data.protected_as_features;
            let (dataset, report) = load_adult(Path::new(path), &schema, &consolidation)
                .map_err(|e| CliError::config(format!("adult load: {e}")))?;
            eprintln!(
                "adult: {} raw rows, {} after missing, {} after duplicates, {} after outliers",
                report.raw_rows,
                report.after_missing_drop,
                report.after_duplicate_drop,
                report.after_outlier_drop
            );
            if let Some(cache) = &config.data.cache {
                write_cache(&dataset, Path::new(cache))
                    .map_err(|e| CliError::config(format!("dataset cache write: {e}")))?;
            }
            Ok(dataset)
        }
    }
}

fn build_model(config: &ExperimentConfig, input_dim: usize) -> Result<(TrainSetup, String), CliError> {
    let section = &config.model;
    let (mlp, loss, name) = match section.preset {
        ModelPreset::IncomeSimple => {
            let (mlp, _) = income_simple_preset(input_dim);
            (mlp, LossSpec::BinaryLogit { pos_weight: section.pos_weight }, "income-simple")
        }
        ModelPreset::Complex => {
            let weights = if section.class_weights.is_empty() {
                [1.0, 2.0]
            } else if section.class_weights.len() == 2 {
                [section.class_weights[0], section.class_weights[1]]
            } else {
                return Err(CliError::config("[model] complex preset needs two class weights".into()));
            };
            let (mlp, loss) = complex_preset(input_dim, weights);
            (mlp, loss, "complex")
        }
        ModelPreset::Custom => {
            let hidden = section
                .hidden
                .iter()
                .enumerate()
                .map(|(i, &width)| HiddenLayer {
                    width,
                    group_norm: section.group_norm_after.contains(&i),
                    dropout: if section.dropout_layer == Some(i) { section.dropout_rate } else { 0.0 },
                })
                .collect();
            let (head, loss) = if section.head_classes <= 1 {
                (OutputHead::BinaryLogit, LossSpec::BinaryLogit { pos_weight: section.pos_weight })
            } else {
                let weights = if section.class_weights.is_empty() {
                    vec![1.0; section.head_classes]
                } else {
                    section.class_weights.clone()
                };
                (OutputHead::MultiLogit(section.head_classes), LossSpec::CrossEntropy { class_weights: weights })
            };
            let mlp = MlpSpec { input_dim, hidden, head, norm_groups: section.group_count };
            (mlp, loss, "custom")
        }
    };
    mlp.validate().map_err(|e| CliError::config(format!("[model]: {e}")))?;
    loss.validate(mlp.head).map_err(|e| CliError::config(format!("[model]: {e}")))?;
    Ok((TrainSetup { mlp, loss }, name.to_string()))
}

/// Load, balance, split, and normalize the data, and size the sampler.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, CliError> {
    let mut dataset = load_dataset(config)?;
    let dataset_name = match config.data.source {
        DataSource::Synthetic => "synthetic".to_string(),
        DataSource::Adult => "adult".to_string(),
    };
    if let Some(attribute) = &config.data.balance_attribute {
        dataset = balance_by_group(
            &dataset,
            attribute,
            StreamKey::new(config.data.data_seed, "balance", 0, 0),
        )
        .map_err(|e| CliError::config(format!("balance: {e}")))?;
    }
    let (mut train_split, mut validation, mut test) = stratified_split(
        &dataset,
        config.data.split,
        StreamKey::new(config.data.data_seed, "split", 0, 0),
    )
    .map_err(|e| CliError::config(format!("split: {e}")))?;
    normalize_splits(&mut train_split, &mut validation, &mut test);

    let n_train = train_split.len();
    let sampling_rate = match (config.train.sampling_rate, config.train.expected_batch_size) {
        (Some(q), None) => q,
        (None, Some(b)) => (b as f64 / n_train as f64).min(1.0),
        _ => unreachable!("validated"),
    };
    let expected_batch = sampling_rate * n_train as f64;
    let fraction_noise = config.clip.fraction_noise.unwrap_or(expected_batch / 20.0);
    let orders =
        if config.privacy.orders.is_empty() { default_orders() } else { config.privacy.orders.clone() };

    let (setup, preset_name) = build_model(config, train_split.dim)?;
    Ok(Prepared {
        splits: Splits { train: train_split, validation, test },
        setup,
        dataset_name,
        preset_name,
        sampling_rate,
        expected_batch,
        fraction_noise,
        orders,
    })
}

/// Total steps the accountant must cover if no early stop happens.
pub fn planned_steps(config: &ExperimentConfig, prepared: &Prepared) -> u64 {
    config.train.epochs as u64 * (1.0 / prepared.sampling_rate).ceil() as u64
}

/// Resolve the gradient noise multiplier: explicit value wins, otherwise
/// a target epsilon triggers calibration, otherwise noise is off.
pub fn resolve_noise_multiplier(
    config: &ExperimentConfig,
    prepared: &Prepared,
    orders: &[u32],
) -> Result<f64, CliError> {
    if let Some(sigma) = config.privacy.noise_multiplier {
        if !(sigma >= 0.0) {
            return Err(CliError::config(format!("[privacy] noise_multiplier {sigma} must be >= 0")));
        }
        return Ok(sigma);
    }
    let Some(epsilon) = config.privacy.epsilon else {
        return Ok(0.0);
    };
    let target = PrivacyParams::new(epsilon, config.privacy.delta)
        .map_err(|e| CliError::config(e.to_string()))?;
    let steps = planned_steps(config, prepared);
    let extra = (config.clip.strategy.is_adaptive() && config.privacy.account_adaptive).then_some(
        MechanismEvent {
            q: prepared.sampling_rate,
            sigma: prepared.fraction_noise,
            count: steps,
        },
    );
    calibrate_sigma(target, prepared.sampling_rate, steps, extra, orders)
        .map_err(|e| CliError::calibration(e.to_string()))
}

/// The engine config for one seed.
pub fn train_config(
    config: &ExperimentConfig,
    prepared: &Prepared,
    noise_multiplier: f64,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        epochs: config.train.epochs,
        sampling_rate: prepared.sampling_rate,
        learning_rate: config.train.learning_rate,
        optimizer: match config.train.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::Adam(AdamConfig {
                beta1: config.train.beta1,
                beta2: config.train.beta2,
                eps: config.train.eps_adam,
            }),
        },
        strategy: config.clip.strategy,
        initial_bound: config.clip.initial_bound,
        noise_multiplier,
        target_quantile: config.clip.target_quantile,
        bound_lr: config.clip.bound_learning_rate,
        fraction_noise: prepared.fraction_noise,
        eps_div: config.clip.epsilon_div,
        clamp_fraction: config.clip.clamp_fraction,
        seed,
        patience: config.train.early_stopping.then_some(config.train.patience),
        divide_by_expected_batch: config.train.divide_by_expected_batch,
        account_adaptive: config.privacy.account_adaptive,
        orders: prepared.orders.clone(),
        delta: config.privacy.delta,
    }
}

pub struct CompletedRun {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub outcome: RunOutcome,
    pub seconds: f64,
}

/// Execute one seed and assemble its JSONL records.
pub fn run_single(
    config: &ExperimentConfig,
    prepared: &Prepared,
    noise_multiplier: f64,
    seed: u64,
) -> Result<CompletedRun, CliError> {
    let engine_config = train_config(config, prepared, noise_multiplier, seed);
    let started = Instant::now();
    let result: TrainResult = train(&engine_config, &prepared.setup, &prepared.splits)
        .map_err(|e| CliError::training(format!("seed {seed}: {e}")))?;
    let seconds = started.elapsed().as_secs_f64();

    let mut records = Vec::with_capacity(result.traces.len() + result.epochs.len() + 2);
    records.push(RunRecord::Meta(RunMeta {
        schema: RUN_SCHEMA.into(),
        method: config.clip.strategy.name().into(),
        seed,
        dataset: prepared.dataset_name.clone(),
        preset: prepared.preset_name.clone(),
        epochs: config.train.epochs,
        sampling_rate: prepared.sampling_rate,
        noise_multiplier,
        fraction_noise: prepared.fraction_noise,
        initial_bound: config.clip.initial_bound,
        delta: config.privacy.delta,
    }));
    for trace in &result.traces {
        records.push(RunRecord::Step(trace.clone()));
    }
    for epoch in &result.epochs {
        records.push(RunRecord::Epoch {
            epoch: epoch.epoch,
            train_loss: epoch.train.sum_loss,
            train_accuracy: epoch.train.accuracy,
            train_f1: epoch.train.f1,
            val_loss: epoch.validation.sum_loss,
            val_accuracy: epoch.validation.accuracy,
            val_f1: epoch.validation.f1,
        });
    }
    let best = &result.epochs[result.best_epoch];
    let outcome = RunOutcome {
        test_loss: result.test.sum_loss,
        test_accuracy: result.test.accuracy,
        test_f1: result.test.f1,
        train_loss: best.train.sum_loss,
        val_loss: best.validation.sum_loss,
        epsilon: result.epsilon,
        best_order: result.best_order,
        stopped_epoch: result.stopped_epoch,
        best_epoch: result.best_epoch,
        subgroups: result.subgroups.clone(),
    };
    records.push(RunRecord::Result(outcome.clone()));
    Ok(CompletedRun { seed, records, outcome, seconds })
}

/// Loss gaps of one outcome, optionally under the mean-reduction
/// convention (sum losses divided by subgroup counts).
pub fn outcome_gaps(outcome: &RunOutcome, mean_reduction: bool) -> Vec<(String, f64)> {
    let report = if mean_reduction {
        let mut adjusted: SubgroupReport = outcome.subgroups.clone();
        for groups in adjusted.groups.values_mut() {
            for metrics in groups.values_mut() {
                if metrics.count > 0 {
                    metrics.sum_loss /= metrics.count as f64;
                }
            }
        }
        adjusted
    } else {
        outcome.subgroups.clone()
    };
    report
        .groups
        .keys()
        .filter_map(|attribute| {
            fairclip_core::analysis::loss_gap(&report, attribute)
                .ok()
                .map(|gap| (attribute.clone(), gap))
        })
        .collect()
}
