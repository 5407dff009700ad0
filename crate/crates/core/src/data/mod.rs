//! Dataset ingestion and preparation: encoded tabular data, stratified
//! splitting, group balancing, train-only normalization, and a small
//! columnar cache format.

mod adult;
mod synth;

pub use adult::{
    adult_default_schema, default_consolidation, load_adult, ColumnKind, ConsolidationMap,
    LoadReport, TabularSchema,
};
pub use synth::{synth_generate, SyntheticSpec};

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Example;
use crate::numerics::{Stream, StreamKey};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Csv: row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("SchemaMismatch: missing columns {missing:?}, unexpected columns {extra:?}")]
    SchemaMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("MissingAttribute: protected attribute {0:?} not present")]
    MissingAttribute(String),
    #[error("EmptyGroup: attribute {attribute:?} group {group:?} has no rows")]
    EmptyGroup { attribute: String, group: String },
    #[error("StratumTooSmall: label {label} has only {size} rows (need at least 3)")]
    StratumTooSmall { label: usize, size: usize },
    #[error("BadFractions: split fractions {0:?} must be positive and sum to 1")]
    BadFractions([f64; 3]),
    #[error("BadCache: {0}")]
    BadCache(String),
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
}

/// Where a dataset came from and which preprocessing produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub preprocessing: String,
}

/// One protected attribute, stored as a per-row group index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedColumn {
    pub attribute: String,
    /// Group names; per-row values index into this list.
    pub groups: Vec<String>,
    pub values: Vec<u16>,
}

/// Encoded tabular dataset: row-major features, integer labels, protected
/// attribute maps, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Feature columns that carry raw numeric values (normalization targets).
    pub numeric_columns: Vec<usize>,
    pub protected: Vec<ProtectedColumn>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example { features: self.row(i), label: self.labels[i] }
    }

    pub fn examples(&self) -> impl Iterator<Item = Example<'_>> + Clone {
        (0..self.len()).map(|i| self.example(i))
    }

    pub fn protected_column(&self, attribute: &str) -> Option<&ProtectedColumn> {
        self.protected.iter().find(|c| c.attribute == attribute)
    }

    /// New dataset containing exactly `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let protected = self
            .protected
            .iter()
            .map(|c| ProtectedColumn {
                attribute: c.attribute.clone(),
                groups: c.groups.clone(),
                values: indices.iter().map(|&i| c.values[i]).collect(),
            })
            .collect();
        Dataset {
            feature_names: self.feature_names.clone(),
            dim: self.dim,
            features,
            labels,
            numeric_columns: self.numeric_columns.clone(),
            protected,
            provenance: self.provenance.clone(),
        }
    }
}

/// Uniformly subsample every group of `attribute` down to the smallest
/// group's size. Already-balanced data passes through with the same rows.
pub fn balance_by_group(ds: &Dataset, attribute: &str, key: StreamKey) -> Result<Dataset, DataError> {
    let column = ds
        .protected_column(attribute)
        .ok_or_else(|| DataError::MissingAttribute(attribute.to_string()))?;
    let mut per_group: Vec<Vec<usize>> = vec![Vec::new(); column.groups.len()];
    for (i, &g) in column.values.iter().enumerate() {
        per_group[g as usize].push(i);
    }
    for (g, members) in per_group.iter().enumerate() {
        if members.is_empty() {
            return Err(DataError::EmptyGroup {
                attribute: attribute.to_string(),
                group: column.groups[g].clone(),
            });
        }
    }
    let target = per_group.iter().map(Vec::len).min().expect("at least one group");
    if per_group.iter().all(|m| m.len() == target) {
        return Ok(ds.clone());
    }
    let mut keep = Vec::with_capacity(target * per_group.len());
    for (g, members) in per_group.iter().enumerate() {
        if members.len() == target {
            keep.extend_from_slice(members);
        } else {
            let mut pool = members.clone();
            let mut stream = Stream::new(StreamKey { index: key.index + g as u64, ..key });
            stream.shuffle(&mut pool);
            keep.extend_from_slice(&pool[..target]);
        }
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// Stratified split by label, preserving per-stratum label proportions to
/// within one example; deterministic per key.
///
/// Rounding cascades fractional remainders across strata so the global
/// split sizes also stay within one example of `fractions * n`.
pub fn stratified_split(
    ds: &Dataset,
    fractions: [f64; 3],
    key: StreamKey,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if fractions.iter().any(|f| *f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let mut strata: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &label) in ds.labels.iter().enumerate() {
        match strata.binary_search_by_key(&label, |s| s.0) {
            Ok(pos) => strata[pos].1.push(i),
            Err(pos) => strata.insert(pos, (label, vec![i])),
        }
    }
    for (label, members) in &strata {
        if members.len() < 3 {
            return Err(DataError::StratumTooSmall { label: *label, size: members.len() });
        }
    }

    let mut split_indices: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut carry = [0.0f64; 3];
    for (stratum_idx, (_, members)) in strata.iter().enumerate() {
        let n = members.len();
        let mut counts = [0usize; 3];
        let mut remainders = [0.0f64; 3];
        let mut assigned = 0;
        for s in 0..3 {
            let target = fractions[s] * n as f64 + carry[s];
            let base = target.floor().max(0.0) as usize;
            counts[s] = base.min(n - assigned);
            remainders[s] = target - counts[s] as f64;
            assigned += counts[s];
        }
        let mut leftover = n - assigned;
        while leftover > 0 {
            let mut pick = 0;
            for s in 1..3 {
                if remainders[s] > remainders[pick] {
                    pick = s;
                }
            }
            counts[pick] += 1;
            remainders[pick] -= 1.0;
            leftover -= 1;
        }
        for s in 0..3 {
            carry[s] = fractions[s] * n as f64 + carry[s] - counts[s] as f64;
        }

        let mut pool = members.clone();
        let mut stream = Stream::new(StreamKey { index: key.index + stratum_idx as u64, ..key });
        stream.shuffle(&mut pool);
        let (train, rest) = pool.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        split_indices[0].extend_from_slice(train);
        split_indices[1].extend_from_slice(val);
        split_indices[2].extend_from_slice(test);
    }
    for indices in &mut split_indices {
        indices.sort_unstable();
    }
    Ok((
        ds.select(&split_indices[0]),
        ds.select(&split_indices[1]),
        ds.select(&split_indices[2]),
    ))
}

/// Per-column standardization statistics, fit on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    /// Fit zero-mean/unit-variance statistics for the dataset's numeric
    /// columns. Constant columns keep a unit scale so they only get centered.
    pub fn fit(train: &Dataset) -> Normalizer {
        let columns = train.numeric_columns.clone();
        let n = train.len().max(1) as f64;
        let mut means = Vec::with_capacity(columns.len());
        let mut stds = Vec::with_capacity(columns.len());
        for &c in &columns {
            let mut sum = 0.0;
            for i in 0..train.len() {
                sum += train.row(i)[c];
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for i in 0..train.len() {
                let d = train.row(i)[c] - mean;
                ss += d * d;
            }
            let sd = (ss / n).sqrt();
            means.push(mean);
            stds.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Normalizer { columns, means, stds }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for i in 0..ds.len() {
            let row = &mut ds.features[i * ds.dim..(i + 1) * ds.dim];
            for ((&c, &mean), &sd) in self.columns.iter().zip(&self.means).zip(&self.stds) {
                row[c] = (row[c] - mean) / sd;
            }
        }
    }
}

/// Fit on `train` and standardize all three splits with the same statistics.
pub fn normalize_splits(train: &mut Dataset, validation: &mut Dataset, test: &mut Dataset) -> Normalizer {
    let normalizer = Normalizer::fit(train);
    normalizer.apply(train);
    normalizer.apply(validation);
    normalizer.apply(test);
    normalizer
}

const CACHE_MAGIC: &[u8; 8] = b"FCDP0001";

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DataError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, DataError> {
    let len = read_u64(r)? as usize;
    if len > (1 << 24) {
        return Err(DataError::BadCache(format!("string length {len} out of range")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| DataError::BadCache(e.to_string()))
}

/// Write the dataset as a columnar binary cache (magic header `FCDP0001`);
/// features are stored column by column.
pub fn write_cache(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    write_u64(&mut w, ds.len() as u64)?;
    write_u64(&mut w, ds.dim as u64)?;
    for name in &ds.feature_names {
        write_str(&mut w, name)?;
    }
    for c in 0..ds.dim {
        for r in 0..ds.len() {
            w.write_all(&ds.features[r * ds.dim + c].to_le_bytes())?;
        }
    }
    for &label in &ds.labels {
        write_u64(&mut w, label as u64)?;
    }
    write_u64(&mut w, ds.numeric_columns.len() as u64)?;
    for &c in &ds.numeric_columns {
        write_u64(&mut w, c as u64)?;
    }
    write_u64(&mut w, ds.protected.len() as u64)?;
    for col in &ds.protected {
        write_str(&mut w, &col.attribute)?;
        write_u64(&mut w, col.groups.len() as u64)?;
        for g in &col.groups {
            write_str(&mut w, g)?;
        }
        for &v in &col.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    write_str(&mut w, &ds.provenance.source)?;
    write_str(&mut w, &ds.provenance.preprocessing)?;
    w.flush()?;
    Ok(())
}

/// Read a dataset cache written by [`write_cache`].
pub fn read_cache(path: &Path) -> Result<Dataset, DataError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(DataError::BadCache(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CACHE_MAGIC)
        )));
    }
    let rows = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let mut feature_names = Vec::with_capacity(dim);
    for _ in 0..dim {
        feature_names.push(read_str(&mut r)?);
    }
    let mut features = vec![0.0f64; rows * dim];
    let mut buf = [0u8; 8];
    for c in 0..dim {
        for row in 0..rows {
            r.read_exact(&mut buf)?;
            features[row * dim + c] = f64::from_le_bytes(buf);
        }
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(read_u64(&mut r)? as usize);
    }
    let n_numeric = read_u64(&mut r)? as usize;
    let mut numeric_columns = Vec::with_capacity(n_numeric);
    for _ in 0..n_numeric {
        numeric_columns.push(read_u64(&mut r)? as usize);
    }
    let n_protected = read_u64(&mut r)? as usize;
    let mut protected = Vec::with_capacity(n_protected);
    for _ in 0..n_protected {
        let attribute = read_str(&mut r)?;
        let n_groups = read_u64(&mut r)? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            groups.push(read_str(&mut r)?);
        }
        let mut values = vec![0u16; rows];
        let mut vbuf = [0u8; 2];
        for v in &mut values {
            r.read_exact(&mut vbuf)?;
            *v = u16::from_le_bytes(vbuf);
        }
        protected.push(ProtectedColumn { attribute, groups, values });
    }
    let source = read_str(&mut r)?;
    let preprocessing = read_str(&mut r)?;
    Ok(Dataset {
        feature_names,
        dim,
        features,
        labels,
        numeric_columns,
        protected,
        provenance: Provenance { source, preprocessing },
    })
}

/// Count rows per (attribute, group); used by tests and reports.
pub fn group_sizes(ds: &Dataset, attribute: &str) -> Result<HashMap<String, usize>, DataError> {
    let column = ds
        .protected_column(attribute)
        .ok_or_else(|| DataError::MissingAttribute(attribute.to_string()))?;
    let mut sizes = HashMap::new();
    for &v in &column.values {
        *sizes.entry(column.groups[v as usize].clone()).or_insert(0) += 1;
    }
    Ok(sizes)
}
