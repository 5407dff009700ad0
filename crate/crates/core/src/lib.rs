//! Differentially private training for small feed-forward classifiers
//! with interchangeable per-sample clipping strategies (hard, fixed soft,
//! adaptive hard, and adaptive soft tanh clipping), Renyi-DP accounting,
//! subgroup fairness metrics, and the statistics used to compare methods.

// `!(x > 0.0)`-style guards deliberately treat NaN as invalid; the
// suggested `x <= 0.0` rewrite would silently accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod clip;
pub mod data;
pub mod engine;
pub mod model;
pub mod numerics;
pub mod privacy;

pub use clip::ClipStrategy;
pub use engine::{train, Splits, TrainConfig, TrainResult, TrainSetup};
