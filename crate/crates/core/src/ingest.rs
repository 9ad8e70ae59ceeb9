//! Record parsing, grid alignment and dense family assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Deserialize;
use thiserror::Error;

use crate::model::{series_key, FeatureFamily, MetricRecord, ModelError, TimeIndex};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("unknown input format `{0}` (expected jsonl or csv-wide)")]
    UnknownFormat(String),
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("series `{0}` has no observation inside the time index")]
    AllMissing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    CsvWide,
}

impl FromStr for Format {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "csv-wide" | "csv" => Ok(Format::CsvWide),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Jsonl => "jsonl",
            Format::CsvWide => "csv-wide",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub records: Vec<MetricRecord>,
    /// Rows dropped because their value was not finite.
    pub warnings: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    ts: i64,
    metric: String,
    tags: BTreeMap<String, String>,
    value: JsonValue,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonValue {
    Number(f64),
    Text(String),
}

enum Cell {
    Value(f64),
    NonFinite,
}

fn parse_cell(text: &str) -> Option<Cell> {
    let v: f64 = text.trim().parse().ok()?;
    Some(if v.is_finite() { Cell::Value(v) } else { Cell::NonFinite })
}

pub fn parse_records(input: &[u8], format: Format) -> Result<Parsed, IngestError> {
    let text = std::str::from_utf8(input).map_err(|_| IngestError::NotUtf8)?;
    match format {
        Format::Jsonl => parse_jsonl(text),
        Format::CsvWide => parse_csv_wide(text),
    }
}

fn parse_jsonl(text: &str) -> Result<Parsed, IngestError> {
    let mut out = Parsed::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| IngestError::MalformedRow {
            line: line_no,
            reason,
        };
        let row: JsonRow = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let value = match row.value {
            JsonValue::Number(v) => Cell::Value(v),
            JsonValue::Text(s) => parse_cell(&s).ok_or_else(|| malformed(format!("value `{s}` is not a number")))?,
        };
        match value {
            Cell::NonFinite => out.warnings += 1,
            Cell::Value(value) => {
                let record = MetricRecord::new(row.ts, row.metric, row.tags, value)
                    .map_err(|e| malformed(e.to_string()))?;
                out.records.push(record);
            }
        }
    }
    Ok(out)
}

/// Parses a `metric{k=v,k=v}` column header. Braces are optional.
pub fn parse_series_header(header: &str) -> Option<(String, BTreeMap<String, String>)> {
    let header = header.trim();
    let (metric, rest) = match header.find('{') {
        Some(at) => (&header[..at], Some(&header[at + 1..])),
        None => (header, None),
    };
    if metric.is_empty() {
        return None;
    }
    let mut tags = BTreeMap::new();
    if let Some(rest) = rest {
        let body = rest.strip_suffix('}')?;
        for pair in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=')?;
            if k.is_empty() || tags.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return None;
            }
        }
    }
    Some((metric.to_string(), tags))
}

fn parse_csv_wide(text: &str) -> Result<Parsed, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| IngestError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.get(0).map(str::trim) != Some("ts") {
        return Err(IngestError::MalformedRow {
            line: 1,
            reason: "first column must be `ts`".into(),
        });
    }
    let columns = headers
        .iter()
        .skip(1)
        .map(|h| {
            parse_series_header(h).ok_or_else(|| IngestError::MalformedRow {
                line: 1,
                reason: format!("bad column header `{h}`"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Parsed::default();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let malformed = |reason: String| IngestError::MalformedRow { line, reason };
        let ts: i64 = row
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| malformed("bad timestamp".into()))?;
        for ((metric, tags), cell) in columns.iter().zip(row.iter().skip(1)) {
            if cell.trim().is_empty() {
                continue;
            }
            match parse_cell(cell).ok_or_else(|| malformed(format!("bad value `{cell}`")))? {
                Cell::NonFinite => out.warnings += 1,
                Cell::Value(v) => out.records.push(MetricRecord {
                    ts,
                    metric: metric.clone(),
                    tags: tags.clone(),
                    value: v,
                }),
            }
        }
    }
    Ok(out)
}

/// Writes records as jsonl, one object per line.
pub fn serialize_records(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialise"));
        out.push('\n');
    }
    out
}

/// A sparse, time-sorted series for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// Canonical series identity (`metric{tags}` for ingested data).
    pub key: String,
    /// Sorted by timestamp, one point per timestamp.
    pub points: Vec<(i64, f64)>,
}

impl RawSeries {
    /// Builds a series from unsorted points; duplicate timestamps are averaged.
    pub fn from_points(key: impl Into<String>, points: impl IntoIterator<Item = (i64, f64)>) -> Self {
        let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for (ts, v) in points {
            let e = acc.entry(ts).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        RawSeries {
            key: key.into(),
            points: acc.into_iter().map(|(ts, (sum, n))| (ts, sum / n as f64)).collect(),
        }
    }
}

/// Groups records by `(metric, tags)` into sorted series.
pub fn build_series(records: &[MetricRecord]) -> Vec<RawSeries> {
    let mut groups: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
    for r in records {
        groups
            .entry(series_key(&r.metric, &r.tags))
            .or_default()
            .push((r.ts, r.value));
    }
    groups
        .into_iter()
        .map(|(k, pts)| RawSeries::from_points(k, pts))
        .collect()
}

/// Smallest grid covering every record: the step is the gcd of the gaps
/// between distinct timestamps. `None` for an empty slice.
pub fn infer_index(records: &[MetricRecord]) -> Option<TimeIndex> {
    let mut ts: Vec<i64> = records.iter().map(|r| r.ts).collect();
    ts.sort_unstable();
    ts.dedup();
    let (first, last) = (*ts.first()?, *ts.last()?);
    let gcd = |mut a: i64, mut b: i64| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    let step = ts.windows(2).fold(0, |g, w| gcd(g, w[1] - w[0])).max(1);
    TimeIndex::new(first, last + step, step).ok()
}

/// Fills every grid slot with the nearest observed slot value. Equidistant
/// neighbours resolve to the earlier one; gaps before the first or after the
/// last observation take that observation's value. Several observations in
/// one slot are averaged.
pub fn interpolate_missing(series: &RawSeries, index: &TimeIndex) -> Result<Vec<f64>, IngestError> {
    let t = index.len();
    let mut sums = vec![0.0; t];
    let mut counts = vec![0usize; t];
    for &(ts, v) in &series.points {
        if let Some(slot) = index.slot_of(ts) {
            sums[slot] += v;
            counts[slot] += 1;
        }
    }
    let observed: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    fill_nearest(&observed).ok_or_else(|| IngestError::AllMissing(series.key.clone()))
}

/// Nearest-neighbour fill over slot positions, ties to the earlier slot.
/// Returns `None` when nothing is observed.
pub fn fill_nearest(observed: &[Option<f64>]) -> Option<Vec<f64>> {
    let t = observed.len();
    let mut prev: Vec<Option<usize>> = vec![None; t];
    let mut last = None;
    for i in 0..t {
        if observed[i].is_some() {
            last = Some(i);
        }
        prev[i] = last;
    }
    let mut out = vec![0.0; t];
    let mut next = None;
    let mut any = false;
    for i in (0..t).rev() {
        if observed[i].is_some() {
            next = Some(i);
            any = true;
        }
        let pick = match (prev[i], next) {
            (Some(p), Some(n)) => {
                if i - p <= n - i {
                    p
                } else {
                    n
                }
            }
            (Some(p), None) => p,
            (None, Some(n)) => n,
            (None, None) => continue,
        };
        out[i] = observed[pick].expect("picked slot is observed");
    }
    any.then_some(out)
}

/// Assembles a dense `T×F` family with columns sorted by series key.
pub fn assemble_family(rows: &[RawSeries], key: &str, index: &TimeIndex) -> Result<FeatureFamily, IngestError> {
    let mut sorted: Vec<&RawSeries> = rows.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    let t = index.len();
    let mut matrix = DMatrix::zeros(t, sorted.len());
    for (c, series) in sorted.iter().enumerate() {
        let column = interpolate_missing(series, index)?;
        matrix.column_mut(c).copy_from_slice(&column);
    }
    let names: Vec<String> = sorted.iter().map(|s| s.key.clone()).collect();
    let metrics: BTreeSet<String> = names.iter().cloned().collect();
    Ok(FeatureFamily::new(key, names, matrix, "ingest", metrics)?)
}
