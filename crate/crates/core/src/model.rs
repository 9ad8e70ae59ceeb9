//! Domain types shared across the engine: metric records, the time grid,
//! feature families and the tables that hold them, hypothesis triples and
//! score reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown family `{0}`")]
    UnknownFamily(String),
    #[error("metric `{metric}` appears in both `{first}` and `{second}`")]
    OverlappingMetrics {
        metric: String,
        first: String,
        second: String,
    },
    #[error("family `{0}` has no metrics")]
    EmptyFamily(String),
    #[error("invalid time index: {0}")]
    InvalidIndex(String),
    #[error("invalid family `{key}`: {reason}")]
    InvalidFamily { key: String, reason: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("duplicate family key `{0}`")]
    DuplicateFamily(String),
    #[error("malformed family table: {0}")]
    Malformed(String),
}

/// One observation of one univariate metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Epoch minutes.
    pub ts: i64,
    pub metric: String,
    pub tags: BTreeMap<String, String>,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(
        ts: i64,
        metric: impl Into<String>,
        tags: BTreeMap<String, String>,
        value: f64,
    ) -> Result<Self, ModelError> {
        let record = MetricRecord {
            ts,
            metric: metric.into(),
            tags,
            value,
        };
        record.check()?;
        Ok(record)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.metric.is_empty() {
            return Err(ModelError::InvalidRecord("empty metric name".into()));
        }
        if !self.value.is_finite() {
            return Err(ModelError::InvalidRecord(format!(
                "non-finite value for `{}`",
                self.metric
            )));
        }
        Ok(())
    }

    /// Canonical series identity, `metric{k=v,k=v}`.
    pub fn series_key(&self) -> String {
        series_key(&self.metric, &self.tags)
    }
}

/// Renders `metric{k=v,...}` with tags in key order. Empty tag maps render
/// as `metric{}` so that every series key is unambiguous.
pub fn series_key(metric: &str, tags: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(metric.len() + 16 * tags.len() + 2);
    out.push_str(metric);
    out.push('{');
    for (i, (k, v)) in tags.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
    }
    out.push('}');
    out
}

/// A regular grid of epoch-minute timestamps, half-open `[start_ts, end_ts)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeIndex {
    pub start_ts: i64,
    pub end_ts: i64,
    #[serde(default = "default_step")]
    pub step: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highlight: Option<(i64, i64)>,
}

fn default_step() -> i64 {
    1
}

impl TimeIndex {
    pub fn new(start_ts: i64, end_ts: i64, step: i64) -> Result<Self, ModelError> {
        let index = TimeIndex {
            start_ts,
            end_ts,
            step,
            highlight: None,
        };
        index.check()?;
        Ok(index)
    }

    pub fn with_highlight(mut self, start: i64, end: i64) -> Result<Self, ModelError> {
        self.highlight = Some((start, end));
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.start_ts >= self.end_ts {
            return Err(ModelError::InvalidIndex(format!(
                "start {} must precede end {}",
                self.start_ts, self.end_ts
            )));
        }
        if self.step < 1 {
            return Err(ModelError::InvalidIndex(format!("step {} < 1", self.step)));
        }
        if let Some((h0, h1)) = self.highlight {
            if h0 > h1 || h0 < self.start_ts || h1 > self.end_ts {
                return Err(ModelError::InvalidIndex(format!(
                    "highlight [{h0}, {h1}] not inside [{}, {}]",
                    self.start_ts, self.end_ts
                )));
            }
        }
        Ok(())
    }

    /// Number of grid slots `T`.
    pub fn len(&self) -> usize {
        ((self.end_ts - self.start_ts + self.step - 1) / self.step) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ts_at(&self, slot: usize) -> i64 {
        self.start_ts + slot as i64 * self.step
    }

    /// Grid slot holding `ts`; timestamps between grid points fall into the
    /// preceding slot.
    pub fn slot_of(&self, ts: i64) -> Option<usize> {
        if ts < self.start_ts || ts >= self.end_ts {
            return None;
        }
        Some(((ts - self.start_ts) / self.step) as usize)
    }

    pub fn contains(&self, other: &TimeIndex) -> bool {
        other.step == self.step
            && other.start_ts >= self.start_ts
            && other.end_ts <= self.end_ts
            && (other.start_ts - self.start_ts) % self.step == 0
    }
}

/// A named group of univariate metrics sampled on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFamily {
    pub key: String,
    pub feature_names: Vec<String>,
    /// T×F, one column per feature.
    pub matrix: DMatrix<f64>,
    /// Id of the query (or generator) that produced the family.
    pub provenance: String,
    /// Underlying univariate metric identities, used for overlap checks.
    pub metrics: BTreeSet<String>,
}

impl FeatureFamily {
    pub fn new(
        key: impl Into<String>,
        feature_names: Vec<String>,
        matrix: DMatrix<f64>,
        provenance: impl Into<String>,
        metrics: BTreeSet<String>,
    ) -> Result<Self, ModelError> {
        let family = FeatureFamily {
            key: key.into(),
            feature_names,
            matrix,
            provenance: provenance.into(),
            metrics,
        };
        family.check()?;
        Ok(family)
    }

    /// Family whose metric set is its own feature names.
    pub fn from_columns(
        key: impl Into<String>,
        feature_names: Vec<String>,
        matrix: DMatrix<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let metrics = feature_names.iter().cloned().collect();
        Self::new(key, feature_names, matrix, provenance, metrics)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::InvalidFamily {
            key: self.key.clone(),
            reason,
        };
        if self.key.is_empty() {
            return Err(invalid("empty key".into()));
        }
        if self.feature_names.is_empty() {
            return Err(invalid("no features".into()));
        }
        if self.matrix.ncols() != self.feature_names.len() {
            return Err(invalid(format!(
                "{} columns for {} feature names",
                self.matrix.ncols(),
                self.feature_names.len()
            )));
        }
        let unique: BTreeSet<&String> = self.feature_names.iter().collect();
        if unique.len() != self.feature_names.len() {
            return Err(invalid("duplicate feature names".into()));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite cell".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }
}

/// All families of one analysis, aligned to one shared [`TimeIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyTable {
    pub index: TimeIndex,
    families: BTreeMap<String, FeatureFamily>,
}

impl FamilyTable {
    pub fn new(index: TimeIndex) -> Self {
        FamilyTable {
            index,
            families: BTreeMap::new(),
        }
    }

    pub fn from_families(
        index: TimeIndex,
        families: impl IntoIterator<Item = FeatureFamily>,
    ) -> Result<Self, ModelError> {
        let mut table = FamilyTable::new(index);
        for family in families {
            table.insert(family)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, family: FeatureFamily) -> Result<(), ModelError> {
        family.check()?;
        if family.rows() != self.index.len() {
            return Err(ModelError::InvalidFamily {
                key: family.key.clone(),
                reason: format!(
                    "{} rows but the index has {} slots",
                    family.rows(),
                    self.index.len()
                ),
            });
        }
        if self.families.contains_key(&family.key) {
            return Err(ModelError::DuplicateFamily(family.key));
        }
        self.families.insert(family.key.clone(), family);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&FeatureFamily, ModelError> {
        self.families
            .get(key)
            .ok_or_else(|| ModelError::UnknownFamily(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.families.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.families.keys().map(String::as_str)
    }

    pub fn families(&self) -> impl Iterator<Item = &FeatureFamily> {
        self.families.values()
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    /// Restricts every family to the rows of `range`, which must lie on this
    /// table's grid.
    pub fn slice(&self, range: &TimeIndex) -> Result<FamilyTable, ModelError> {
        range.check()?;
        if !self.index.contains(range) {
            return Err(ModelError::InvalidIndex(format!(
                "range [{}, {}) is not on the table grid [{}, {}) step {}",
                range.start_ts, range.end_ts, self.index.start_ts, self.index.end_ts, self.index.step
            )));
        }
        let offset = ((range.start_ts - self.index.start_ts) / self.index.step) as usize;
        let rows = range.len();
        let mut out = FamilyTable::new(*range);
        for family in self.families.values() {
            let matrix = family.matrix.rows(offset, rows).into_owned();
            out.families.insert(
                family.key.clone(),
                FeatureFamily {
                    matrix,
                    ..family.clone()
                },
            );
        }
        Ok(out)
    }

    /// Horizontally stacks the named families, in the given order.
    pub fn stack(&self, keys: &[String]) -> Result<Option<DMatrix<f64>>, ModelError> {
        if keys.is_empty() {
            return Ok(None);
        }
        let parts = keys
            .iter()
            .map(|k| self.get(k).map(|f| &f.matrix))
            .collect::<Result<Vec<_>, _>>()?;
        let cols = parts.iter().map(|m| m.ncols()).sum();
        let mut out = DMatrix::zeros(self.index.len(), cols);
        let mut at = 0;
        for part in parts {
            out.columns_mut(at, part.ncols()).copy_from(part);
            at += part.ncols();
        }
        Ok(Some(out))
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        serde_json::to_string(&TableFile::from(self)).map_err(|e| ModelError::Malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: TableFile =
            serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
        file.into_table()
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    index: TimeIndex,
    families: Vec<FamilyFile>,
}

#[derive(Serialize, Deserialize)]
struct FamilyFile {
    key: String,
    feature_names: Vec<String>,
    provenance: String,
    metrics: BTreeSet<String>,
    columns: Vec<Vec<f64>>,
}

impl From<&FamilyTable> for TableFile {
    fn from(table: &FamilyTable) -> Self {
        TableFile {
            index: table.index,
            families: table
                .families
                .values()
                .map(|f| FamilyFile {
                    key: f.key.clone(),
                    feature_names: f.feature_names.clone(),
                    provenance: f.provenance.clone(),
                    metrics: f.metrics.clone(),
                    columns: f
                        .matrix
                        .column_iter()
                        .map(|c| c.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TableFile {
    fn into_table(self) -> Result<FamilyTable, ModelError> {
        self.index.check()?;
        let rows = self.index.len();
        let mut table = FamilyTable::new(self.index);
        for f in self.families {
            if f.columns.iter().any(|c| c.len() != rows) {
                return Err(ModelError::InvalidFamily {
                    key: f.key,
                    reason: format!("column length differs from the {rows}-slot index"),
                });
            }
            let width = f.columns.len();
            let data: Vec<f64> = f.columns.into_iter().flatten().collect();
            let matrix = DMatrix::from_vec(rows, width, data);
            table.insert(FeatureFamily::new(
                f.key,
                f.feature_names,
                matrix,
                f.provenance,
                f.metrics,
            )?)?;
        }
        Ok(table)
    }
}

/// Candidate cause `x`, target `y`, conditioning set `z`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hypothesis {
    pub x: String,
    pub y: String,
    #[serde(default)]
    pub z: Vec<String>,
}

impl Hypothesis {
    pub fn new(x: impl Into<String>, y: impl Into<String>, z: Vec<String>) -> Self {
        Hypothesis {
            x: x.into(),
            y: y.into(),
            z,
        }
    }
}

/// Checks that every key resolves, `x` and `y` are non-empty, and the metric
/// sets of `x`, `y` and the union of `z` are pairwise disjoint.
pub fn validate_hypothesis(h: &Hypothesis, table: &FamilyTable) -> Result<(), ModelError> {
    let x = table.get(&h.x)?;
    let y = table.get(&h.y)?;
    let zs = h
        .z
        .iter()
        .map(|k| table.get(k))
        .collect::<Result<Vec<_>, _>>()?;
    for family in [x, y] {
        if family.metrics.is_empty() || family.width() == 0 {
            return Err(ModelError::EmptyFamily(family.key.clone()));
        }
    }
    let overlap = |a: &FeatureFamily, b: &FeatureFamily| -> Result<(), ModelError> {
        match a.metrics.intersection(&b.metrics).next() {
            Some(metric) => Err(ModelError::OverlappingMetrics {
                metric: metric.clone(),
                first: a.key.clone(),
                second: b.key.clone(),
            }),
            None => Ok(()),
        }
    };
    if h.x == h.y {
        return Err(ModelError::OverlappingMetrics {
            metric: x.metrics.iter().next().cloned().unwrap_or_default(),
            first: h.x.clone(),
            second: h.y.clone(),
        });
    }
    overlap(x, y)?;
    for z in zs {
        overlap(x, z)?;
        overlap(y, z)?;
    }
    Ok(())
}

/// Hypothesis scoring method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    CorrMean,
    CorrMax,
    L2,
    /// Ridge scoring after random projection to at most `d` dimensions.
    L2Proj(usize),
}

impl Method {
    pub const NAMES: &'static str = "corrmean, corrmax, l2, l2-p<d> (e.g. l2-p50, l2-p500)";

    pub fn is_univariate(self) -> bool {
        matches!(self, Method::CorrMean | Method::CorrMax)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::CorrMean => f.write_str("corrmean"),
            Method::CorrMax => f.write_str("corrmax"),
            Method::L2 => f.write_str("l2"),
            Method::L2Proj(d) => write!(f, "l2-p{d}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "corrmean" => Ok(Method::CorrMean),
            "corrmax" => Ok(Method::CorrMax),
            "l2" => Ok(Method::L2),
            other => other
                .strip_prefix("l2-p")
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|d| *d >= 1)
                .map(Method::L2Proj)
                .ok_or_else(|| format!("unknown method `{s}`; valid methods: {}", Method::NAMES)),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The two diagnostic series shown for a scored family: the target after
/// removing what the conditioning set explains, and its prediction from the
/// candidate. Multivariate targets plot their first output only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Data points used for the p-value.
    pub n: usize,
    /// Effective predictor count used for the p-value.
    pub p: usize,
    /// False when the null theory does not apply (p ≥ n) and the p-value
    /// was forced to 1.
    pub p_value_valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_lambda: Option<f64>,
    /// Per-sample scores for projection methods.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub hypothesis: Hypothesis,
    pub score: f64,
    pub method: Method,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotData>,
    pub diagnostics: Diagnostics,
    /// Wall-clock scoring time. Kept out of serialised reports so that
    /// reports stay reproducible; runs record timings separately.
    #[serde(skip)]
    pub timing_ms: u64,
}

impl ScoreReport {
    pub fn family(&self) -> &str {
        &self.hypothesis.x
    }
}
