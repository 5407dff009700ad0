//! Experiment configuration file: a TOML document with [data], [model],
//! [privacy], [clip], [train], and [analysis] sections. Unknown keys are
//! rejected, and parse -> serialize -> parse is lossless.

use serde::{Deserialize, Serialize};

use fairclip_core::clip::ClipStrategy;
use fairclip_core::data::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    pub clip: ClipSection,
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Adult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// CSV path (adult source).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Optional consolidation map override (adult source).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consolidation_map: Option<String>,
    /// Optional binary dataset cache: read when present, written after a
    /// fresh load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<String>,
    /// Subsample every group of this attribute to equal sizes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance_attribute: Option<String>,
    /// Also expose protected attributes as model features.
    #[serde(default)]
    pub protected_as_features: bool,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Seed for balancing and splitting streams (not the training seed).
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

fn default_data_seed() -> u64 {
    13
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum ModelPreset {
    IncomeSimple,
    Complex,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    /// Hidden widths for the custom preset.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Output classes; 1 means a single-logit binary head.
    #[serde(default = "default_head_classes")]
    pub head_classes: usize,
    /// Hidden-layer indices that get group normalization (custom preset).
    #[serde(default)]
    pub group_norm_after: Vec<usize>,
    /// Hidden-layer index that gets dropout (custom preset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_layer: Option<usize>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_group_count")]
    pub group_count: usize,
    /// Positive-class weight for the binary head.
    #[serde(default = "default_pos_weight")]
    pub pos_weight: f64,
    /// Per-class weights for the softmax head.
    #[serde(default)]
    pub class_weights: Vec<f64>,
}

fn default_head_classes() -> usize {
    1
}

fn default_group_count() -> usize {
    8
}

fn default_pos_weight() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    /// Target epsilon; triggers calibration when no explicit multiplier
    /// is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Explicit gradient noise multiplier; takes precedence over epsilon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_multiplier: Option<f64>,
    /// Compose the adaptive fraction release into the ledger.
    #[serde(default = "default_true")]
    pub account_adaptive: bool,
    /// Renyi order grid; empty means the default grid.
    #[serde(default)]
    pub orders: Vec<u32>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            epsilon: None,
            delta: default_delta(),
            noise_multiplier: None,
            account_adaptive: true,
            orders: Vec::new(),
        }
    }
}

fn default_delta() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSection {
    pub strategy: ClipStrategy,
    pub initial_bound: f64,
    #[serde(default = "default_quantile")]
    pub target_quantile: f64,
    #[serde(default = "default_bound_lr")]
    pub bound_learning_rate: f64,
    /// Stddev of the unclipped-count noise; defaults to expected batch
    /// size / 20 at run time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_noise: Option<f64>,
    #[serde(default = "default_eps_div")]
    pub epsilon_div: f64,
    #[serde(default)]
    pub clamp_fraction: bool,
}

fn default_quantile() -> f64 {
    0.5
}

fn default_bound_lr() -> f64 {
    0.2
}

fn default_eps_div() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Poisson rate q; exactly one of this and expected_batch_size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<f64>,
    /// Expected batch size; converted to q against the train split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_batch_size: Option<usize>,
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerChoice,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_adam")]
    pub eps_adam: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Early-stopping patience in epochs.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_true")]
    pub early_stopping: bool,
    #[serde(default)]
    pub divide_by_expected_batch: bool,
}

fn default_optimizer() -> OptimizerChoice {
    OptimizerChoice::Adam
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps_adam() -> f64 {
    1e-8
}

fn default_seed() -> u64 {
    1
}

fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Divide subgroup sum losses by their counts before computing gaps.
    #[serde(default)]
    pub mean_reduction: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.synthetic.is_none() {
                    return Err("[data] source = synthetic needs a [data.synthetic] table".into());
                }
            }
            DataSource::Adult => {
                if self.data.path.is_none() && self.data.cache.is_none() {
                    return Err("[data] source = adult needs path or cache".into());
                }
            }
        }
        match (self.train.sampling_rate, self.train.expected_batch_size) {
            (Some(q), None) => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(format!("[train] sampling_rate {q} outside (0, 1]"));
                }
            }
            (None, Some(b)) => {
                if b == 0 {
                    return Err("[train] expected_batch_size must be >= 1".into());
                }
            }
            (Some(_), Some(_)) => {
                return Err("[train] set either sampling_rate or expected_batch_size, not both".into())
            }
            (None, None) => {
                return Err("[train] needs sampling_rate or expected_batch_size".into())
            }
        }
        if matches!(self.model.preset, ModelPreset::Custom) && self.model.hidden.is_empty() {
            return Err("[model] custom preset needs hidden widths".into());
        }
        if let Some(eps) = self.privacy.epsilon {
            if !(eps > 0.0) {
                return Err(format!("[privacy] epsilon must be positive, got {eps}"));
            }
        }
        if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
            return Err(format!("[privacy] delta must be in (0, 1), got {}", self.privacy.delta));
        }
        if !(self.clip.initial_bound > 0.0) {
            return Err("[clip] initial_bound must be positive".into());
        }
        Ok(())
    }
}
