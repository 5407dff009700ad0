//! Output plumbing: atomic file writes, CSV number formatting at six
//! significant digits, and the JSONL run-record schema.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fairclip_core::analysis::SubgroupReport;
use fairclip_core::engine::StepTrace;

/// Write via a sibling temp file and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Render with six significant digits: plain decimal notation in a
/// comfortable exponent range, scientific outside it, trailing zeros
/// trimmed.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exponent = v.abs().log10().floor() as i32;
    if (-4..=8).contains(&exponent) {
        // round to six significant digits first (carry-aware), then render
        let factor = 10f64.powi(5 - exponent);
        let rounded = (v * factor).round() / factor;
        let exponent = rounded.abs().log10().floor() as i32;
        let decimals = (5 - exponent).max(0) as usize;
        let s = format!("{rounded:.decimals$}");
        trim_zeros(&s)
    } else {
        let s = format!("{v:.5e}");
        // normalize "1.23000e-7" style output
        match s.split_once('e') {
            Some((mantissa, exp)) => format!("{}e{exp}", trim_zeros(mantissa)),
            None => s,
        }
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Optional cell rendered as empty when absent.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

/// Schema tag carried by every run file's meta record.
pub const RUN_SCHEMA: &str = "fairclip/run/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: String,
    pub method: String,
    pub seed: u64,
    pub dataset: String,
    pub preset: String,
    pub epochs: usize,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub fraction_noise: f64,
    pub initial_bound: f64,
    pub delta: f64,
}

/// Final metrics of one run; losses are sum-reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub test_f1: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epsilon: Option<f64>,
    pub best_order: Option<u32>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub subgroups: SubgroupReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RunRecord {
    Meta(RunMeta),
    Step(StepTrace),
    Epoch {
        epoch: usize,
        train_loss: f64,
        train_accuracy: f64,
        train_f1: f64,
        val_loss: f64,
        val_accuracy: f64,
        val_f1: f64,
    },
    Result(RunOutcome),
}

/// Serialize records as one JSON object per line.
pub fn to_jsonl(records: &[RunRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parse a run file; unknown lines are an error (the schema is versioned).
pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line)
            .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

/// Sweep manifest: config snapshot, seeds, outputs, and timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub method: String,
    pub dataset: String,
    pub config_toml: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub failed_seeds: Vec<u64>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, String> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
