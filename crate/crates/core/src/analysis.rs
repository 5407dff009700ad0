//! Subgroup fairness metrics and the statistical machinery that compares
//! training methods: loss gaps, average disparity, reduction percentages,
//! exact and approximate Wilcoxon signed-rank tests, and Bonferroni
//! correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("NonBinaryAttribute: attribute {attribute:?} has {groups} groups, need exactly 2")]
    NonBinaryAttribute { attribute: String, groups: usize },
    #[error("NoAttributes: average disparity needs at least one loss gap")]
    NoAttributes,
    #[error("InvalidBaseline: baseline disparity must be positive, got {0}")]
    InvalidBaseline(f64),
    #[error("DegeneratePairs: all paired differences are zero")]
    DegeneratePairs,
    #[error("UnpairedData: methods disagree on keys: {0:?}")]
    UnpairedData(Vec<String>),
}

/// Evaluation numbers for one subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    pub sum_loss: f64,
    pub count: usize,
    pub accuracy: f64,
    pub f1: f64,
}

/// Per-subgroup evaluation of one split of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub split: String,
    pub seed: u64,
    /// attribute -> group value -> metrics
    pub groups: BTreeMap<String, BTreeMap<String, SubgroupMetrics>>,
}

/// Absolute sum-loss difference between the two groups of `attribute`.
pub fn loss_gap(report: &SubgroupReport, attribute: &str) -> Result<f64, AnalysisError> {
    let groups = report.groups.get(attribute).ok_or_else(|| AnalysisError::NonBinaryAttribute {
        attribute: attribute.to_string(),
        groups: 0,
    })?;
    if groups.len() != 2 {
        return Err(AnalysisError::NonBinaryAttribute {
            attribute: attribute.to_string(),
            groups: groups.len(),
        });
    }
    let losses: Vec<f64> = groups.values().map(|m| m.sum_loss).collect();
    Ok((losses[0] - losses[1]).abs())
}

/// Arithmetic mean of the per-attribute loss gaps.
pub fn average_disparity(gaps: &BTreeMap<String, f64>) -> Result<f64, AnalysisError> {
    if gaps.is_empty() {
        return Err(AnalysisError::NoAttributes);
    }
    Ok(gaps.values().sum::<f64>() / gaps.len() as f64)
}

/// Percentage reduction of `ours` relative to `baseline`; negative when
/// `ours` is worse.
pub fn reduction_pct(baseline: f64, ours: f64) -> Result<f64, AnalysisError> {
    if !(baseline > 0.0) {
        return Err(AnalysisError::InvalidBaseline(baseline));
    }
    Ok((baseline - ours) / baseline * 100.0)
}

/// One matched observation across two methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub seed: u64,
    pub dataset: String,
    pub attribute: String,
    pub value_a: f64,
    pub value_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonOutcome {
    /// min(W+, W-), the smaller signed-rank sum.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    /// Whether the p-value came from exact enumeration.
    pub exact: bool,
}

/// Exact/approximate crossover: up to here the full sign-assignment
/// distribution is enumerated (via a subset-sum count).
const EXACT_LIMIT: usize = 25;

fn midranks(sorted_abs: &[f64]) -> Vec<f64> {
    let n = sorted_abs.len();
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted_abs[j + 1] == sorted_abs[i] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = rank;
        }
        i = j + 1;
    }
    ranks
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided Wilcoxon signed-rank test on paired values.
///
/// Zero differences are dropped; tied magnitudes get mid-ranks. For
/// `n <= 25` the p-value is exact over all sign assignments, counting
/// assignments whose rank sum deviates from its center at least as far as
/// the observed one. Larger samples use the normal approximation with
/// continuity and tie corrections.
pub fn wilcoxon_signed_rank(pairs: &[PairedSample]) -> Result<WilcoxonOutcome, AnalysisError> {
    let mut diffs: Vec<f64> =
        pairs.iter().map(|p| p.value_a - p.value_b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(AnalysisError::DegeneratePairs);
    }
    diffs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite differences"));
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let n = diffs.len();

    let w_plus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let total: f64 = ranks.iter().sum(); // n(n+1)/2
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    if n <= EXACT_LIMIT {
        // doubled ranks are exact integers (mid-ranks are multiples of 1/2)
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total2: u64 = doubled.iter().sum();
        // counts[s] = number of sign assignments with doubled W+ equal to s;
        // counts fit f64 exactly (at most 2^25 assignments)
        let mut counts = vec![0.0f64; total2 as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &doubled {
            let r = r as usize;
            reach += r;
            for s in (r..=reach).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed2 = (2.0 * w_plus).round() as i64;
        let dev_obs = (2 * observed2 - total2 as i64).abs();
        let mut hits = 0.0;
        for (s, c) in counts.iter().enumerate() {
            let dev = (2 * s as i64 - total2 as i64).abs();
            if dev >= dev_obs {
                hits += c;
            }
        }
        let p = (hits / 2.0f64.powi(n as i32)).min(1.0);
        Ok(WilcoxonOutcome { statistic, p_value: p, n_used: n, exact: true })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie correction over groups of equal |d|
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && abs[j + 1] == abs[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let sd = variance.sqrt();
        if sd == 0.0 {
            return Err(AnalysisError::DegeneratePairs);
        }
        let z = (statistic - mean + 0.5) / sd;
        let p = (2.0 * normal_cdf(z)).clamp(0.0, 1.0);
        Ok(WilcoxonOutcome { statistic, p_value: p, n_used: n, exact: false })
    }
}

/// Bonferroni correction: min(1, p * m).
pub fn bonferroni(p: f64, m: usize) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p) && m >= 1);
    (p * m as f64).min(1.0)
}

/// One method's loss gap at one (seed, dataset, attribute) key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub seed: u64,
    pub dataset: String,
    pub attribute: String,
    pub gap: f64,
}

/// Result of one pairwise method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method_a: String,
    pub method_b: String,
    pub n_pairs: usize,
    /// None when every paired difference was zero.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub p_corrected: Option<f64>,
    pub exact: Option<bool>,
}

/// Pairwise Wilcoxon tests over matched loss gaps, Bonferroni-corrected
/// by the number of method pairs.
///
/// Every method must cover exactly the same (seed, dataset, attribute)
/// keys; mismatches list the offending keys.
pub fn compare_methods(
    methods: &BTreeMap<String, Vec<GapRecord>>,
) -> Result<Vec<MethodComparison>, AnalysisError> {
    let names: Vec<&String> = methods.keys().collect();
    let mut keyed: BTreeMap<&String, BTreeMap<(u64, &str, &str), f64>> = BTreeMap::new();
    for (name, records) in methods {
        let mut map = BTreeMap::new();
        for r in records {
            map.insert((r.seed, r.dataset.as_str(), r.attribute.as_str()), r.gap);
        }
        keyed.insert(name, map);
    }

    // verify matched coverage before running any test
    let mut offending: Vec<String> = Vec::new();
    if let Some(first) = names.first() {
        let reference = &keyed[*first];
        for name in &names[1..] {
            let other = &keyed[*name];
            for key in reference.keys() {
                if !other.contains_key(key) {
                    offending.push(format!("{name}: missing {key:?}"));
                }
            }
            for key in other.keys() {
                if !reference.contains_key(key) {
                    offending.push(format!("{first}: missing {key:?}"));
                }
            }
        }
    }
    if !offending.is_empty() {
        offending.sort();
        offending.dedup();
        return Err(AnalysisError::UnpairedData(offending));
    }

    let mut pairs_of_methods = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            pairs_of_methods.push((names[i].clone(), names[j].clone()));
        }
    }
    let m = pairs_of_methods.len().max(1);

    let mut comparisons = Vec::new();
    for (a, b) in pairs_of_methods {
        let map_a = &keyed[&a];
        let map_b = &keyed[&b];
        let samples: Vec<PairedSample> = map_a
            .iter()
            .map(|(key, &va)| PairedSample {
                seed: key.0,
                dataset: key.1.to_string(),
                attribute: key.2.to_string(),
                value_a: va,
                value_b: map_b[key],
            })
            .collect();
        match wilcoxon_signed_rank(&samples) {
            Ok(outcome) => comparisons.push(MethodComparison {
                method_a: a,
                method_b: b,
                n_pairs: samples.len(),
                statistic: Some(outcome.statistic),
                p_value: Some(outcome.p_value),
                p_corrected: Some(bonferroni(outcome.p_value, m)),
                exact: Some(outcome.exact),
            }),
            Err(AnalysisError::DegeneratePairs) => comparisons.push(MethodComparison {
                method_a: a,
                method_b: b,
                n_pairs: samples.len(),
                statistic: None,
                p_value: None,
                p_corrected: None,
                exact: None,
            }),
            Err(other) => return Err(other),
        }
    }
    Ok(comparisons)
}
