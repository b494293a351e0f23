//! Market data: aligned time-indexed target and feature matrix with agent
//! ownership, plus ingestion, lag construction, synthetic generation and
//! redundancy pre-screening.
//!
//! Column layout convention: the first `num_central` feature columns belong to
//! the central agent; the remaining columns are the support features, owned by
//! support agents in disjoint index sets that partition the support range.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Market participant identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Per-column affine map recorded when normalizing to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub min: f64,
    pub max: f64,
}

impl AffineMap {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Normalization metadata: one map per feature column plus one for the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub columns: Vec<AffineMap>,
    pub target: AffineMap,
}

/// Aligned time-indexed target and feature matrix with ownership index sets.
#[derive(Clone, Debug)]
pub struct MarketData {
    timestamps: Vec<String>,
    target: Vec<f64>,
    /// Row per time step, column per feature.
    features: DMatrix<f64>,
    feature_names: Vec<String>,
    central_agent: AgentId,
    num_central: usize,
    /// Support agents in deterministic order; the index sets are sorted,
    /// pairwise disjoint, and partition `num_central..num_features`.
    ownership: Vec<(AgentId, Vec<usize>)>,
    pub normalization: Option<Normalization>,
}

impl MarketData {
    pub fn new(
        timestamps: Vec<String>,
        target: Vec<f64>,
        features: DMatrix<f64>,
        feature_names: Vec<String>,
        central_agent: AgentId,
        num_central: usize,
        ownership: Vec<(AgentId, Vec<usize>)>,
    ) -> Result<Self> {
        let data = Self {
            timestamps,
            target,
            features,
            feature_names,
            central_agent,
            num_central,
            ownership,
            normalization: None,
        };
        data.validate()?;
        Ok(data)
    }

    /// Check the structural invariants: aligned lengths, finite values, and the
    /// ownership partition of the support index range.
    pub fn validate(&self) -> Result<()> {
        let t = self.target.len();
        if t == 0 {
            return Err(Error::EmptyData);
        }
        if self.timestamps.len() != t || self.features.nrows() != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                found: self.features.nrows(),
            });
        }
        if self.feature_names.len() != self.features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.features.ncols(),
                found: self.feature_names.len(),
            });
        }
        if self.num_central > self.features.ncols() {
            return Err(Error::Schema(format!(
                "central block of {} columns exceeds the {} available",
                self.num_central,
                self.features.ncols()
            )));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target column".into()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for (agent, indices) in &self.ownership {
            if agent == &self.central_agent {
                return Err(Error::Schema(format!(
                    "central agent {agent} cannot appear as a support owner"
                )));
            }
            if !ids.insert(agent.clone()) {
                return Err(Error::Schema(format!("duplicate agent id {agent}")));
            }
            for &idx in indices {
                if idx < self.num_central || idx >= self.features.ncols() {
                    return Err(Error::Schema(format!(
                        "agent {agent} owns column {idx}, outside the support range {}..{}",
                        self.num_central,
                        self.features.ncols()
                    )));
                }
                if !seen.insert(idx) {
                    return Err(Error::Schema(format!(
                        "column {idx} owned by more than one agent"
                    )));
                }
            }
        }
        let expected: BTreeSet<usize> = (self.num_central..self.features.ncols()).collect();
        if seen != expected {
            return Err(Error::Schema(
                "ownership sets do not partition the support columns".into(),
            ));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.target.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_central(&self) -> usize {
        self.num_central
    }

    pub fn num_support(&self) -> usize {
        self.features.ncols() - self.num_central
    }

    pub fn central_indices(&self) -> Range<usize> {
        0..self.num_central
    }

    pub fn support_indices(&self) -> Range<usize> {
        self.num_central..self.features.ncols()
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn central_agent(&self) -> &AgentId {
        &self.central_agent
    }

    /// Support agents with their owned column index sets, in market order.
    pub fn ownership(&self) -> &[(AgentId, Vec<usize>)] {
        &self.ownership
    }

    pub fn support_agents(&self) -> impl Iterator<Item = &AgentId> {
        self.ownership.iter().map(|(a, _)| a)
    }

    pub fn owner_of(&self, column: usize) -> Option<&AgentId> {
        if column < self.num_central {
            return Some(&self.central_agent);
        }
        self.ownership
            .iter()
            .find(|(_, idx)| idx.contains(&column))
            .map(|(a, _)| a)
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.features.column(idx).iter().copied().collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Feature vector at one time step.
    pub fn row(&self, t: usize) -> DVector<f64> {
        DVector::from_fn(self.features.ncols(), |j, _| self.features[(t, j)])
    }

    /// Restriction to a half-open row range, ownership preserved.
    pub fn slice_rows(&self, window: Range<usize>) -> Result<MarketData> {
        if window.start >= window.end || window.end > self.rows() {
            return Err(Error::Window(format!(
                "window {}..{} invalid for {} rows",
                window.start,
                window.end,
                self.rows()
            )));
        }
        let n = window.end - window.start;
        Ok(MarketData {
            timestamps: self.timestamps[window.clone()].to_vec(),
            target: self.target[window.clone()].to_vec(),
            features: DMatrix::from_fn(n, self.features.ncols(), |i, j| {
                self.features[(window.start + i, j)]
            }),
            feature_names: self.feature_names.clone(),
            central_agent: self.central_agent.clone(),
            num_central: self.num_central,
            ownership: self.ownership.clone(),
            normalization: self.normalization.clone(),
        })
    }

    /// Append extra support columns owned by the given agents; new agent ids
    /// join the market behind the existing ones. Any normalization metadata is
    /// dropped since the appended columns are raw.
    pub fn append_support_columns(
        &self,
        columns: Vec<(String, AgentId, Vec<f64>)>,
    ) -> Result<MarketData> {
        let t = self.rows();
        let old_cols = self.features.ncols();
        let mut features = DMatrix::zeros(t, old_cols + columns.len());
        features.view_mut((0, 0), (t, old_cols)).copy_from(&self.features);
        let mut names = self.feature_names.clone();
        let mut ownership = self.ownership.clone();
        for (k, (name, agent, values)) in columns.into_iter().enumerate() {
            if values.len() != t {
                return Err(Error::DimensionMismatch {
                    expected: t,
                    found: values.len(),
                });
            }
            let idx = old_cols + k;
            for (i, v) in values.iter().enumerate() {
                features[(i, idx)] = *v;
            }
            names.push(name);
            match ownership.iter_mut().find(|(a, _)| a == &agent) {
                Some((_, indices)) => indices.push(idx),
                None => ownership.push((agent, vec![idx])),
            }
        }
        MarketData::new(
            self.timestamps.clone(),
            self.target.clone(),
            features,
            names,
            self.central_agent.clone(),
            self.num_central,
            ownership,
        )
        .map(|mut d| {
            d.normalization = None; // appended columns are not normalized
            d
        })
    }
}

// ---------------------------------------------------------------------------
// Ownership manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ManifestFile {
    agent: Vec<ManifestAgent>,
}

#[derive(Debug, Deserialize)]
struct ManifestAgent {
    id: String,
    #[serde(default)]
    central: bool,
    #[serde(default)]
    columns: Vec<String>,
}

/// Parsed ownership manifest: the central agent with its feature columns, and
/// support agents in file order.
#[derive(Clone, Debug)]
pub struct OwnershipManifest {
    pub central: (AgentId, Vec<String>),
    pub support: Vec<(AgentId, Vec<String>)>,
}

/// Read a TOML ownership manifest:
///
/// ```toml
/// [[agent]]
/// id = "a1"
/// central = true
/// columns = ["a1"]
///
/// [[agent]]
/// id = "a2"
/// columns = ["a2"]
/// ```
pub fn read_ownership_manifest(path: &Path) -> Result<OwnershipManifest> {
    let text = std::fs::read_to_string(path)?;
    let parsed: ManifestFile = toml::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut central = None;
    let mut support = Vec::new();
    let mut ids = BTreeSet::new();
    let mut cols = BTreeSet::new();
    for agent in parsed.agent {
        if !ids.insert(agent.id.clone()) {
            return Err(Error::Manifest(format!("duplicate agent id {:?}", agent.id)));
        }
        for c in &agent.columns {
            if !cols.insert(c.clone()) {
                return Err(Error::Manifest(format!(
                    "column {c:?} assigned to more than one agent"
                )));
            }
        }
        if agent.central {
            if central.is_some() {
                return Err(Error::Manifest("more than one central agent flagged".into()));
            }
            central = Some((AgentId::new(agent.id), agent.columns));
        } else {
            support.push((AgentId::new(agent.id), agent.columns));
        }
    }
    let central = central.ok_or_else(|| Error::Manifest("no agent flagged central".into()))?;
    Ok(OwnershipManifest { central, support })
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

fn validate_timestamp(raw: &str, row: usize) -> Result<()> {
    if raw.parse::<i64>().is_ok() {
        return Ok(());
    }
    // ISO-8601-style: date, optionally followed by a time separated by 'T' or
    // a space, optionally followed by a zone suffix.
    let bytes = raw.as_bytes();
    let date_ok = bytes.len() >= 10
        && bytes[0..4].iter().all(u8::is_ascii_digit)
        && bytes[4] == b'-'
        && bytes[5..7].iter().all(u8::is_ascii_digit)
        && bytes[7] == b'-'
        && bytes[8..10].iter().all(u8::is_ascii_digit);
    let rest_ok = match bytes.get(10) {
        None => true,
        Some(b'T') | Some(b' ') => {
            let time = &bytes[11..];
            time.len() >= 5
                && time[0..2].iter().all(u8::is_ascii_digit)
                && time[2] == b':'
                && time[3..5].iter().all(u8::is_ascii_digit)
        }
        _ => false,
    };
    if date_ok && rest_ok {
        Ok(())
    } else {
        Err(Error::Parse {
            row,
            message: format!("timestamp {raw:?} is neither an integer tick nor ISO-8601"),
        })
    }
}

/// Ingest a CSV with a sidecar ownership manifest found next to it
/// (`<stem>.agents.toml`).
pub fn ingest_csv(path: &Path, target_column: &str, normalize: bool) -> Result<MarketData> {
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Schema(format!("{} has no file stem", path.display())))?;
    let manifest = path.with_file_name(format!("{}.agents.toml", stem.to_string_lossy()));
    ingest_csv_with_manifest(path, &manifest, target_column, normalize)
}

/// Ingest a CSV with an explicit ownership manifest.
///
/// Feature columns are arranged central agent first, then support agents in
/// manifest order. Every non-timestamp CSV column other than the target must be
/// assigned to exactly one agent; the target column may additionally appear as
/// a central feature (the lagged-target design).
pub fn ingest_csv_with_manifest(
    path: &Path,
    manifest_path: &Path,
    target_column: &str,
    normalize: bool,
) -> Result<MarketData> {
    let manifest = read_ownership_manifest(manifest_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let ts_col = headers.iter().position(|h| h == "timestamp");
    let target_col = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Schema(format!("target column {target_column:?} not found")))?;

    // Resolve manifest columns against the header.
    let resolve = |cols: &[String]| -> Result<Vec<usize>> {
        cols.iter()
            .map(|c| {
                headers
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Schema(format!("manifest column {c:?} not found in CSV")))
            })
            .collect()
    };
    let central_cols = resolve(&manifest.central.1)?;
    let mut agent_cols = Vec::new();
    for (agent, cols) in &manifest.support {
        agent_cols.push((agent.clone(), resolve(cols)?));
    }

    // Every data column must be accounted for.
    let mut assigned: BTreeSet<usize> = central_cols.iter().copied().collect();
    assigned.extend(agent_cols.iter().flat_map(|(_, c)| c.iter().copied()));
    for (i, h) in headers.iter().enumerate() {
        if Some(i) == ts_col || i == target_col {
            continue;
        }
        if !assigned.contains(&i) {
            return Err(Error::Schema(format!(
                "column {h:?} is not assigned to any agent in the manifest"
            )));
        }
    }

    // Read all rows.
    let mut timestamps = Vec::new();
    let mut raw_rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: row_idx,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let ts = match ts_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("");
                validate_timestamp(raw, row_idx)?;
                raw.to_string()
            }
            None => row_idx.to_string(),
        };
        timestamps.push(ts);
        let mut row = vec![0.0; headers.len()];
        for (c, field) in record.iter().enumerate() {
            if Some(c) == ts_col {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: row_idx,
                message: format!("cell {field:?} in column {:?} is not a real number", headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_idx,
                    message: format!("non-finite cell in column {:?}", headers[c]),
                });
            }
            row[c] = v;
        }
        raw_rows.push(row);
    }
    if raw_rows.is_empty() {
        return Err(Error::EmptyData);
    }
    let t = raw_rows.len();

    // Assemble the feature matrix: central block, then support agents.
    let mut order: Vec<usize> = central_cols.clone();
    let mut ownership = Vec::new();
    let mut next = central_cols.len();
    for (agent, cols) in &agent_cols {
        let indices: Vec<usize> = (next..next + cols.len()).collect();
        next += cols.len();
        order.extend(cols.iter().copied());
        ownership.push((agent.clone(), indices));
    }
    let feature_names: Vec<String> = order.iter().map(|&c| headers[c].clone()).collect();
    let mut features = DMatrix::zeros(t, order.len());
    for (i, row) in raw_rows.iter().enumerate() {
        for (j, &c) in order.iter().enumerate() {
            features[(i, j)] = row[c];
        }
    }
    let mut target: Vec<f64> = raw_rows.iter().map(|r| r[target_col]).collect();

    let mut normalization = None;
    if normalize {
        let mut maps = Vec::with_capacity(order.len());
        for j in 0..order.len() {
            let col: Vec<f64> = (0..t).map(|i| features[(i, j)]).collect();
            let map = column_affine(&col, &feature_names[j])?;
            for i in 0..t {
                features[(i, j)] = map.apply(features[(i, j)]);
            }
            maps.push(map);
        }
        let target_map = column_affine(&target, target_column)?;
        for v in &mut target {
            *v = target_map.apply(*v);
        }
        normalization = Some(Normalization {
            columns: maps,
            target: target_map,
        });
    }

    let mut data = MarketData::new(
        timestamps,
        target,
        features,
        feature_names,
        manifest.central.0,
        central_cols.len(),
        ownership,
    )?;
    data.normalization = normalization;
    Ok(data)
}

fn column_affine(col: &[f64], name: &str) -> Result<AffineMap> {
    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(Error::DegenerateColumn {
            name: name.to_string(),
            value: min,
        });
    }
    Ok(AffineMap { min, max })
}

// ---------------------------------------------------------------------------
// Lag construction
// ---------------------------------------------------------------------------

/// Replace every feature column by its value `lag` steps earlier, dropping the
/// first `lag` rows; the target stays aligned with the (shifted) features.
/// `lag = 0` is the identity.
pub fn build_lags(data: &MarketData, lag: usize) -> Result<MarketData> {
    let t = data.rows();
    if lag >= t {
        return Err(Error::InsufficientHistory { lag, rows: t });
    }
    if lag == 0 {
        return Ok(data.clone());
    }
    let n = t - lag;
    let features = DMatrix::from_fn(n, data.num_features(), |i, j| data.features[(i, j)]);
    let mut out = MarketData::new(
        data.timestamps[lag..].to_vec(),
        data.target[lag..].to_vec(),
        features,
        data.feature_names.clone(),
        data.central_agent.clone(),
        data.num_central,
        data.ownership.clone(),
    )?;
    out.normalization = data.normalization.clone();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// One replicate request in the generating process: `count` noisy copies of
/// the support feature at position `feature` (0-based among support features).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEntry {
    pub feature: usize,
    pub count: usize,
    pub noise_std: f64,
}

/// Synthetic confounded data: a latent standard-Gaussian confounder drives all
/// support features, and the target is a linear function of the features plus
/// noise. Replicates are appended after the originals, owned by the owner of
/// the source feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Loading of the latent confounder on each feature.
    pub confounder_strength: f64,
    /// Generating weights; one support feature per entry.
    pub true_weights: Vec<f64>,
    /// Standard deviation of both the per-feature noise and the target noise.
    pub noise_std: f64,
    #[serde(default)]
    pub replicate_plan: Vec<ReplicateEntry>,
    pub length: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.true_weights.is_empty() {
            return Err(Error::InvalidParameter("true_weights is empty".into()));
        }
        if self.true_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("true_weights".into()));
        }
        if !self.confounder_strength.is_finite() {
            return Err(Error::NonFinite("confounder_strength".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise_std must be > 0, got {}",
                self.noise_std
            )));
        }
        if self.length < 2 {
            return Err(Error::InvalidParameter(format!(
                "length must be at least 2, got {}",
                self.length
            )));
        }
        for entry in &self.replicate_plan {
            if entry.feature >= self.true_weights.len() {
                return Err(Error::InvalidParameter(format!(
                    "replicate_plan feature {} out of range (D = {})",
                    entry.feature,
                    self.true_weights.len()
                )));
            }
            if !entry.noise_std.is_finite() || entry.noise_std <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "replicate noise_std must be > 0, got {}",
                    entry.noise_std
                )));
            }
        }
        Ok(())
    }

    fn num_replicates(&self) -> usize {
        self.replicate_plan.iter().map(|e| e.count).sum()
    }

    /// Population mean and covariance of the generated feature vector
    /// (originals first, then replicates in plan order).
    pub fn population_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.true_weights.len();
        let c = self.confounder_strength;
        let s2 = self.noise_std * self.noise_std;
        let total = d + self.num_replicates();

        // source[j] = the original feature a column descends from.
        let mut source: Vec<usize> = (0..d).collect();
        let mut rep_noise: Vec<f64> = vec![0.0; d];
        for entry in &self.replicate_plan {
            for _ in 0..entry.count {
                source.push(entry.feature);
                rep_noise.push(entry.noise_std * entry.noise_std);
            }
        }
        let cov = DMatrix::from_fn(total, total, |i, j| {
            let base = c * c
                + if source[i] == source[j] { s2 } else { 0.0 };
            base + if i == j { rep_noise[i] } else { 0.0 }
        });
        (DVector::zeros(total), cov)
    }

    /// Generating weights extended with zeros for the replicate columns.
    pub fn population_weights(&self) -> DVector<f64> {
        let total = self.true_weights.len() + self.num_replicates();
        DVector::from_fn(total, |i, _| {
            self.true_weights.get(i).copied().unwrap_or(0.0)
        })
    }
}

/// Draw a dataset from a synthetic specification; bit-reproducible for a
/// fixed seed.
pub fn generate_confounded(spec: &SyntheticSpec, seed: u64) -> Result<MarketData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let t = spec.length;
    let d = spec.true_weights.len();

    let z: Vec<f64> = (0..t).map(|_| std_normal.sample(&mut rng)).collect();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let col: Vec<f64> = z
            .iter()
            .map(|&zt| spec.confounder_strength * zt + spec.noise_std * std_normal.sample(&mut rng))
            .collect();
        columns.push(col);
    }
    let target: Vec<f64> = (0..t)
        .map(|i| {
            let signal: f64 = (0..d).map(|j| spec.true_weights[j] * columns[j][i]).sum();
            signal + spec.noise_std * std_normal.sample(&mut rng)
        })
        .collect();

    let mut feature_names: Vec<String> = (0..d).map(|j| format!("x{}", j + 1)).collect();
    let mut ownership: Vec<(AgentId, Vec<usize>)> = (0..d)
        .map(|j| (AgentId::new(format!("a{}", j + 1)), vec![j]))
        .collect();

    // Replicates: appended after the originals, owned by the source owner.
    for entry in &spec.replicate_plan {
        for k in 0..entry.count {
            let noise = Normal::new(0.0, entry.noise_std).expect("positive std");
            let col: Vec<f64> = columns[entry.feature]
                .iter()
                .map(|&v| v + noise.sample(&mut rng))
                .collect();
            columns.push(col);
            feature_names.push(format!("x{}~r{}", entry.feature + 1, k + 1));
            ownership[entry.feature].1.push(feature_names.len() - 1);
        }
    }

    let total = columns.len();
    let features = DMatrix::from_fn(t, total, |i, j| columns[j][i]);
    let timestamps: Vec<String> = (0..t).map(|i| i.to_string()).collect();
    MarketData::new(
        timestamps,
        target,
        features,
        feature_names,
        AgentId::new("central"),
        0,
        ownership,
    )
}

// ---------------------------------------------------------------------------
// Redundancy pre-screening
// ---------------------------------------------------------------------------

/// Record of one removed support column.
#[derive(Clone, Debug, PartialEq)]
pub struct PrescreenRemoval {
    pub column: usize,
    pub name: String,
    pub matched_central: String,
    pub correlation: f64,
}

/// Remove support features whose absolute Pearson correlation with any central
/// feature reaches `threshold` (in ascending column order); agents left with no
/// features drop out of the market.
pub fn prescreen_redundant(
    data: &MarketData,
    threshold: f64,
) -> Result<(MarketData, Vec<PrescreenRemoval>)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "pre-screening threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let central: Vec<(usize, Vec<f64>)> = data
        .central_indices()
        .map(|j| (j, data.column(j)))
        .collect();
    let mut removals = Vec::new();
    let mut removed = BTreeSet::new();
    for j in data.support_indices() {
        let col = data.column(j);
        for (cj, ccol) in &central {
            let r = stats::pearson(&col, ccol).abs();
            if r >= threshold {
                removals.push(PrescreenRemoval {
                    column: j,
                    name: data.feature_names[j].clone(),
                    matched_central: data.feature_names[*cj].clone(),
                    correlation: r,
                });
                removed.insert(j);
                break;
            }
        }
    }
    if removed.is_empty() {
        return Ok((data.clone(), removals));
    }

    let keep: Vec<usize> = (0..data.num_features())
        .filter(|j| !removed.contains(j))
        .collect();
    let remap = |old: usize| keep.iter().position(|&k| k == old);
    let features = DMatrix::from_fn(data.rows(), keep.len(), |i, j| data.features[(i, keep[j])]);
    let feature_names: Vec<String> = keep.iter().map(|&j| data.feature_names[j].clone()).collect();
    let ownership: Vec<(AgentId, Vec<usize>)> = data
        .ownership
        .iter()
        .filter_map(|(agent, indices)| {
            let new_indices: Vec<usize> =
                indices.iter().filter_map(|&i| remap(i)).collect();
            (!new_indices.is_empty()).then(|| (agent.clone(), new_indices))
        })
        .collect();
    let mut out = MarketData::new(
        data.timestamps.clone(),
        data.target.clone(),
        features,
        feature_names,
        data.central_agent.clone(),
        data.num_central,
        ownership,
    )?;
    out.normalization = None;
    Ok((out, removals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_feature_data(t: usize) -> MarketData {
        let spec = SyntheticSpec {
            confounder_strength: 1.0,
            true_weights: vec![0.5, 0.5],
            noise_std: 0.1,
            replicate_plan: vec![],
            length: t,
        };
        generate_confounded(&spec, 11).unwrap()
    }

    #[test]
    fn generate_is_bit_reproducible() {
        let spec = SyntheticSpec {
            confounder_strength: 0.8,
            true_weights: vec![0.4, 0.3, 0.2],
            noise_std: 0.2,
            replicate_plan: vec![ReplicateEntry {
                feature: 1,
                count: 2,
                noise_std: 0.05,
            }],
            length: 64,
        };
        let a = generate_confounded(&spec, 42).unwrap();
        let b = generate_confounded(&spec, 42).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.target(), b.target());
        let c = generate_confounded(&spec, 43).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn replicates_are_owned_by_source_owner() {
        let spec = SyntheticSpec {
            confounder_strength: 1.0,
            true_weights: vec![0.5, 0.5],
            noise_std: 0.1,
            replicate_plan: vec![ReplicateEntry {
                feature: 1,
                count: 4,
                noise_std: 0.05,
            }],
            length: 32,
        };
        let data = generate_confounded(&spec, 7).unwrap();
        assert_eq!(data.num_support(), 6);
        let owner = data.ownership().iter().find(|(a, _)| a.as_str() == "a2").unwrap();
        assert_eq!(owner.1.len(), 5);
        data.validate().unwrap();
    }

    #[test]
    fn replicate_minus_source_behaves_like_centered_noise() {
        // Derived check: the sample mean of (replicate - source) shrinks like
        // 4 * std / sqrt(T).
        let t = 4000;
        let noise_std = 0.3;
        let spec = SyntheticSpec {
            confounder_strength: 1.0,
            true_weights: vec![0.5, 0.5],
            noise_std: 0.1,
            replicate_plan: vec![ReplicateEntry {
                feature: 0,
                count: 1,
                noise_std,
            }],
            length: t,
        };
        let data = generate_confounded(&spec, 3).unwrap();
        let src = data.column(0);
        let rep = data.column(2);
        let mean_diff =
            (0..t).map(|i| rep[i] - src[i]).sum::<f64>() / t as f64;
        assert!(
            mean_diff.abs() <= 4.0 * noise_std / (t as f64).sqrt(),
            "mean {mean_diff} too large"
        );
    }

    #[test]
    fn replicate_correlation_strictly_inside_unit_interval() {
        let spec = SyntheticSpec {
            confounder_strength: 1.0,
            true_weights: vec![0.5],
            noise_std: 0.2,
            replicate_plan: vec![ReplicateEntry {
                feature: 0,
                count: 1,
                noise_std: 0.1,
            }],
            length: 1500,
        };
        let data = generate_confounded(&spec, 5).unwrap();
        let r = stats::pearson(&data.column(0), &data.column(1));
        assert!(r > 0.0 && r < 1.0, "correlation {r} not in (0, 1)");
    }

    #[test]
    fn population_moments_match_construction() {
        let spec = SyntheticSpec {
            confounder_strength: 2.0,
            true_weights: vec![0.5, 0.25],
            noise_std: 0.5,
            replicate_plan: vec![ReplicateEntry {
                feature: 1,
                count: 1,
                noise_std: 0.3,
            }],
            length: 8,
        };
        let (mean, cov) = spec.population_moments();
        assert_eq!(mean.len(), 3);
        assert_eq!(cov[(0, 0)], 4.25);
        assert_eq!(cov[(0, 1)], 4.0);
        assert_eq!(cov[(1, 2)], 4.25); // replicate shares the source's noise
        assert_eq!(cov[(2, 2)], 4.25 + 0.09);
        assert_eq!(spec.population_weights().as_slice(), &[0.5, 0.25, 0.0]);
    }

    #[test]
    fn lag_shifts_and_drops_rows() {
        let data = two_feature_data(100);
        let lagged = build_lags(&data, 1).unwrap();
        assert_eq!(lagged.rows(), 99);
        assert_eq!(lagged.features()[(0, 0)], data.features()[(0, 0)]);
        assert_eq!(lagged.target()[0], data.target()[1]);
        assert_eq!(lagged.timestamps()[0], data.timestamps()[1]);
        lagged.validate().unwrap();
    }

    #[test]
    fn lag_zero_is_identity() {
        let data = two_feature_data(20);
        let same = build_lags(&data, 0).unwrap();
        assert_eq!(same.features(), data.features());
        assert_eq!(same.target(), data.target());
    }

    #[test]
    fn lag_beyond_history_errors() {
        let data = two_feature_data(10);
        assert!(matches!(
            build_lags(&data, 10),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn prescreen_removes_exact_duplicate_of_central() {
        // Support column equal to a central column goes at any threshold.
        let t = 50;
        let col: Vec<f64> = (0..t).map(|i| (i as f64 * 0.37).sin()).collect();
        let other: Vec<f64> = (0..t).map(|i| (i as f64 * 0.11).cos()).collect();
        let features = DMatrix::from_fn(t, 3, |i, j| match j {
            0 => col[i],
            1 => col[i],
            _ => other[i],
        });
        let data = MarketData::new(
            (0..t).map(|i| i.to_string()).collect(),
            col.clone(),
            features,
            vec!["c1".into(), "s1".into(), "s2".into()],
            AgentId::new("buyer"),
            1,
            vec![
                (AgentId::new("a1"), vec![1]),
                (AgentId::new("a2"), vec![2]),
            ],
        )
        .unwrap();
        let (reduced, log) = prescreen_redundant(&data, 0.5).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].name, "s1");
        assert_eq!(reduced.num_support(), 1);
        assert!(reduced.support_agents().all(|a| a.as_str() == "a2"));
        reduced.validate().unwrap();

        // threshold = 1.0 removes exact duplicates only
        let (reduced, log) = prescreen_redundant(&data, 1.0).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(reduced.num_support(), 1);
    }

    #[test]
    fn ownership_partition_enforced() {
        let features = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        let bad = MarketData::new(
            (0..4).map(|i| i.to_string()).collect(),
            vec![0.0, 1.0, 2.0, 3.0],
            features,
            vec!["f1".into(), "f2".into()],
            AgentId::new("c"),
            0,
            vec![(AgentId::new("a1"), vec![0])], // column 1 unowned
        );
        assert!(matches!(bad, Err(Error::Schema(_))));
    }

    #[test]
    fn slice_rows_window_checked() {
        let data = two_feature_data(10);
        assert!(data.slice_rows(3..3).is_err());
        assert!(data.slice_rows(0..11).is_err());
        let sliced = data.slice_rows(2..7).unwrap();
        assert_eq!(sliced.rows(), 5);
        assert_eq!(sliced.target()[0], data.target()[2]);
    }
}
