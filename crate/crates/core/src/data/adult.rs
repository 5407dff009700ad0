//! Census-income CSV ingestion: missing-row and duplicate removal,
//! category consolidation, capital-gain outlier trimming, hours-per-week
//! binning, median age binarization, and one-hot encoding.
//!
//! Numeric columns are left raw here; standardization is fit on the
//! training split via [`super::Normalizer`] so no statistics leak across
//! splits.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Provenance, ProtectedColumn};

/// What one raw column becomes in the encoded feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    /// Raw numeric value, standardized later on the training split.
    Numeric {
        /// Drop rows strictly above the 99.9th percentile of this column.
        trim_outliers: bool,
    },
    /// One-hot over observed (optionally consolidated) values.
    Categorical { consolidate: bool },
    /// Numeric bucketed into `edges.len() + 1` one-hot bins; a value lands
    /// in bin `i` when it is below `edges[i]` and at/above `edges[i - 1]`.
    Binned { edges: Vec<f64> },
    /// Protected attribute; binary group either directly from the cell
    /// value or by thresholding at the column median.
    Protected { attribute: String, median_binarize: bool },
    /// Binary label; 1 when the cell equals `positive`.
    Label { positive: String },
}

/// Ordered column descriptors plus the missing-value sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub columns: Vec<(String, ColumnKind)>,
    pub missing_sentinel: String,
    /// When true, protected attributes also appear as binary features.
    pub protected_as_features: bool,
}

impl TabularSchema {
    fn label_index(&self) -> Result<usize, DataError> {
        let mut labels =
            self.columns.iter().enumerate().filter(|(_, (_, k))| matches!(k, ColumnKind::Label { .. }));
        let first = labels.next();
        if labels.next().is_some() || first.is_none() {
            return Err(DataError::InvalidSpec("schema needs exactly one label column".into()));
        }
        Ok(first.expect("checked above").0)
    }
}

/// Raw-to-consolidated category renames, applied to any categorical cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsolidationMap {
    map: BTreeMap<String, String>,
}

impl ConsolidationMap {
    /// Parse the two-column tab-separated map format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<ConsolidationMap, DataError> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let raw = parts.next().unwrap_or_default().trim();
            let consolidated = parts.next().map(str::trim).unwrap_or_default();
            if raw.is_empty() || consolidated.is_empty() {
                return Err(DataError::InvalidSpec(format!(
                    "consolidation map line {}: expected 'raw<TAB>consolidated'",
                    lineno + 1
                )));
            }
            map.insert(raw.to_string(), consolidated.to_string());
        }
        Ok(ConsolidationMap { map })
    }

    pub fn apply<'a>(&'a self, value: &'a str) -> &'a str {
        self.map.get(value).map_or(value, String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// The consolidation table shipped with the crate (education, marital
/// status, race, and work class renames).
pub fn default_consolidation() -> ConsolidationMap {
    ConsolidationMap::parse(include_str!("adult_consolidation.map"))
        .expect("shipped consolidation map parses")
}

/// Hours-per-week bins: under 30, 30 to 40, 41 to 50, over 50.
fn hours_bin_edges() -> Vec<f64> {
    vec![30.0, 41.0, 51.0]
}

/// Schema for the public census-income CSV (header row required).
pub fn adult_default_schema() -> TabularSchema {
    use ColumnKind::*;
    TabularSchema {
        columns: vec![
            ("age".into(), Protected { attribute: "age".into(), median_binarize: true }),
            ("workclass".into(), Categorical { consolidate: true }),
            ("fnlwgt".into(), Numeric { trim_outliers: false }),
            ("education".into(), Categorical { consolidate: true }),
            ("education-num".into(), Numeric { trim_outliers: false }),
            ("marital-status".into(), Categorical { consolidate: true }),
            ("occupation".into(), Categorical { consolidate: false }),
            ("relationship".into(), Categorical { consolidate: false }),
            ("race".into(), Categorical { consolidate: true }),
            ("sex".into(), Protected { attribute: "gender".into(), median_binarize: false }),
            ("capital-gain".into(), Numeric { trim_outliers: true }),
            ("capital-loss".into(), Numeric { trim_outliers: false }),
            ("hours-per-week".into(), Binned { edges: hours_bin_edges() }),
            ("native-country".into(), Categorical { consolidate: false }),
            ("income".into(), Label { positive: ">50K".into() }),
        ],
        missing_sentinel: "?".into(),
        protected_as_features: false,
    }
}

/// Row counts after each cleaning stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub raw_rows: usize,
    pub after_missing_drop: usize,
    pub after_duplicate_drop: usize,
    pub after_outlier_drop: usize,
}

fn parse_numeric(cell: &str, column: &str, row: usize) -> Result<f64, DataError> {
    cell.parse::<f64>().map_err(|_| DataError::Csv {
        row,
        message: format!("column {column:?}: cannot parse {cell:?} as a number"),
    })
}

/// Median with the average-of-middle convention for even lengths.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Load and encode a census-income style CSV.
///
/// Cleaning order: drop rows containing the missing sentinel, drop exact
/// duplicate rows, then drop capital-gain outliers. The age median used
/// for the protected age group is computed on the cleaned rows, before
/// any splitting.
pub fn load_adult(
    path: &Path,
    schema: &TabularSchema,
    consolidation: &ConsolidationMap,
) -> Result<(Dataset, LoadReport), DataError> {
    let label_idx = schema.label_index()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv { row: 0, message: e.to_string() })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv { row: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let expected: Vec<&String> = schema.columns.iter().map(|(name, _)| name).collect();
    let missing: Vec<String> =
        expected.iter().filter(|n| !headers.contains(n)).map(|n| (*n).clone()).collect();
    let extra: Vec<String> =
        headers.iter().filter(|h| !expected.contains(h)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(DataError::SchemaMismatch { missing, extra });
    }
    // map schema order onto the file's column order
    let positions: Vec<usize> = expected
        .iter()
        .map(|n| headers.iter().position(|h| h == *n).expect("checked above"))
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv { row: i + 2, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(DataError::Csv {
                row: i + 2,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let row: Vec<String> = positions
            .iter()
            .map(|&p| {
                let cell = record.get(p).unwrap_or_default().trim();
                // census label files carry a trailing period in some releases
                cell.trim_end_matches('.').to_string()
            })
            .collect();
        rows.push(row);
    }
    let raw_rows = rows.len();

    rows.retain(|row| !row.iter().any(|cell| cell == &schema.missing_sentinel));
    let after_missing_drop = rows.len();

    let mut seen = HashSet::new();
    rows.retain(|row| seen.insert(row.join("\u{1f}")));
    let after_duplicate_drop = rows.len();

    // outlier trim on flagged numeric columns
    for (c, (name, kind)) in schema.columns.iter().enumerate() {
        if let ColumnKind::Numeric { trim_outliers: true } = kind {
            let mut values = Vec::with_capacity(rows.len());
            for (r, row) in rows.iter().enumerate() {
                values.push(parse_numeric(&row[c], name, r + 2)?);
            }
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            if values.is_empty() {
                continue;
            }
            let cutoff = percentile(&values, 0.999);
            let mut keep = Vec::with_capacity(rows.len());
            for row in rows.drain(..) {
                let v: f64 = row[c].parse().expect("parsed above");
                if v <= cutoff {
                    keep.push(row);
                }
            }
            rows = keep;
        }
    }
    let after_outlier_drop = rows.len();

    // per-column encode plans
    let mut feature_names = Vec::new();
    let mut numeric_columns = Vec::new();
    let mut protected: Vec<ProtectedColumn> = Vec::new();
    let mut labels = vec![0usize; rows.len()];
    enum Plan {
        Numeric,
        Categorical { levels: Vec<String>, consolidate: bool },
        Binned { edges: Vec<f64> },
        Protected { slot: usize, threshold: Option<f64> },
        Label,
    }
    let mut plans = Vec::with_capacity(schema.columns.len());
    for (c, (name, kind)) in schema.columns.iter().enumerate() {
        match kind {
            ColumnKind::Numeric { .. } => {
                numeric_columns.push(feature_names.len());
                feature_names.push(name.clone());
                plans.push(Plan::Numeric);
            }
            ColumnKind::Categorical { consolidate } => {
                let mut levels: Vec<String> = rows
                    .iter()
                    .map(|row| {
                        if *consolidate {
                            consolidation.apply(&row[c]).to_string()
                        } else {
                            row[c].clone()
                        }
                    })
                    .collect::<HashSet<_>>()
                    .into_iter()
                    .collect();
                levels.sort();
                for level in &levels {
                    feature_names.push(format!("{name}={level}"));
                }
                plans.push(Plan::Categorical { levels, consolidate: *consolidate });
            }
            ColumnKind::Binned { edges } => {
                for b in 0..=edges.len() {
                    feature_names.push(format!("{name}#bin{b}"));
                }
                plans.push(Plan::Binned { edges: edges.clone() });
            }
            ColumnKind::Protected { attribute, median_binarize } => {
                let (groups, threshold) = if *median_binarize {
                    let mut values = Vec::with_capacity(rows.len());
                    for (r, row) in rows.iter().enumerate() {
                        values.push(parse_numeric(&row[c], name, r + 2)?);
                    }
                    let m = median(&mut values);
                    (vec!["lt_median".to_string(), "ge_median".to_string()], Some(m))
                } else {
                    let mut groups: Vec<String> =
                        rows.iter().map(|row| row[c].clone()).collect::<HashSet<_>>().into_iter().collect();
                    groups.sort();
                    (groups, None)
                };
                let slot = protected.len();
                protected.push(ProtectedColumn {
                    attribute: attribute.clone(),
                    groups,
                    values: vec![0; rows.len()],
                });
                if schema.protected_as_features {
                    feature_names.push(format!("{name}@group"));
                }
                plans.push(Plan::Protected { slot, threshold });
            }
            ColumnKind::Label { .. } => plans.push(Plan::Label),
        }
    }

    let dim = feature_names.len();
    let mut features = vec![0.0f64; rows.len() * dim];
    for (r, row) in rows.iter().enumerate() {
        let out = &mut features[r * dim..(r + 1) * dim];
        let mut f = 0usize;
        for (c, plan) in plans.iter().enumerate() {
            let (name, _) = &schema.columns[c];
            match plan {
                Plan::Numeric => {
                    out[f] = parse_numeric(&row[c], name, r + 2)?;
                    f += 1;
                }
                Plan::Categorical { levels, consolidate } => {
                    let value =
                        if *consolidate { consolidation.apply(&row[c]) } else { row[c].as_str() };
                    let pos = levels.binary_search_by(|l| l.as_str().cmp(value)).expect("level seen");
                    out[f + pos] = 1.0;
                    f += levels.len();
                }
                Plan::Binned { edges } => {
                    let v = parse_numeric(&row[c], name, r + 2)?;
                    let bin = edges.iter().take_while(|e| v >= **e).count();
                    out[f + bin] = 1.0;
                    f += edges.len() + 1;
                }
                Plan::Protected { slot, threshold } => {
                    let group = match threshold {
                        Some(t) => usize::from(parse_numeric(&row[c], name, r + 2)? >= *t),
                        None => protected[*slot]
                            .groups
                            .binary_search_by(|g| g.as_str().cmp(row[c].as_str()))
                            .expect("group seen"),
                    };
                    protected[*slot].values[r] = group as u16;
                    if schema.protected_as_features {
                        out[f] = group as f64;
                        f += 1;
                    }
                }
                Plan::Label => {
                    if c == label_idx {
                        let positive = match &schema.columns[c].1 {
                            ColumnKind::Label { positive } => positive,
                            _ => unreachable!(),
                        };
                        labels[r] = usize::from(row[c] == *positive);
                    }
                }
            }
        }
    }

    let dataset = Dataset {
        feature_names,
        dim,
        features,
        labels,
        numeric_columns,
        protected,
        provenance: Provenance {
            source: format!("adult:{}", path.display()),
            preprocessing: "adult-prep-v1".into(),
        },
    };
    Ok((dataset, LoadReport { raw_rows, after_missing_drop, after_duplicate_drop, after_outlier_drop }))
}
