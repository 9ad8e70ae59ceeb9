use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::ast::{KeyExpr, QueryAst};
use super::QueryError;
use crate::ingest::{assemble_family, RawSeries};
use crate::model::{series_key, FamilyTable, MetricRecord, TimeIndex};

/// One row of the normalised feature-family schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub ts: i64,
    /// Family key.
    pub name: String,
    pub value: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Sorted by `(ts, name)`.
    pub rows: Vec<QueryRow>,
    /// Family key → identities of the source series feeding it.
    pub sources: BTreeMap<String, BTreeSet<String>>,
    /// Family key → id of the query that produced it.
    pub provenance: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl QueryResult {
    pub fn family_keys(&self) -> impl Iterator<Item = &str> {
        self.sources.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Stable short id for a query, derived from its canonical text.
pub fn query_id(ast: &QueryAst) -> String {
    format!("q-{:016x}", crate::seed::fnv1a(ast.to_string().as_bytes()))
}

/// Renders the family key for one record. A lone `name` gives the bare
/// metric name; tag components render as `k=v` inside braces after the
/// metric name (or `*` when the name is not part of the key); a single
/// computed expression renders as its value.
fn family_key(exprs: &[KeyExpr], metric: &str, tags: &BTreeMap<String, String>) -> String {
    let value = |e: &KeyExpr| e.eval(metric, tags).unwrap_or_else(|| "NULL".to_string());
    let has_name = exprs.contains(&KeyExpr::Name);
    let others: Vec<&KeyExpr> = exprs.iter().filter(|e| **e != KeyExpr::Name).collect();
    if others.is_empty() {
        return metric.to_string();
    }
    if !has_name && others.len() == 1 && !matches!(others[0], KeyExpr::Tag(_)) {
        return value(others[0]);
    }
    let parts: Vec<String> = others
        .iter()
        .map(|e| match e {
            KeyExpr::Tag(k) => format!("{k}={}", value(e)),
            other => format!("{other}={}", value(other)),
        })
        .collect();
    let head = if has_name { metric } else { "*" };
    format!("{head}{{{}}}", parts.join(","))
}

struct SeriesPlan {
    family: String,
    feature: String,
}

pub fn evaluate_query(ast: &QueryAst, records: &[MetricRecord], index: &TimeIndex) -> Result<QueryResult, QueryError> {
    let t = index.len();
    let id = query_id(ast);
    let mut consumed = Vec::new();
    for e in &ast.family_by {
        e.tags_used(&mut consumed);
    }
    let consumed: BTreeSet<String> = consumed.into_iter().collect();

    // Family/feature assignment depends only on (metric, tags): plan once per series.
    let mut plans: HashMap<String, Option<SeriesPlan>> = HashMap::new();
    // (family, feature) → per-slot observed values
    let mut cells: BTreeMap<(String, String), Vec<Vec<f64>>> = BTreeMap::new();
    let mut sources: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

    for r in records {
        let Some(slot) = index.slot_of(r.ts) else { continue };
        if let Some(range) = &ast.range {
            if r.ts < range.start || r.ts >= range.end {
                continue;
            }
        }
        let skey = series_key(&r.metric, &r.tags);
        let plan = plans.entry(skey.clone()).or_insert_with(|| {
            if let Some(p) = &ast.filter {
                if !p.eval(&r.metric, &r.tags) {
                    return None;
                }
            }
            let remaining: BTreeMap<String, String> = r
                .tags
                .iter()
                .filter(|(k, _)| !consumed.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            Some(SeriesPlan {
                family: family_key(&ast.family_by, &r.metric, &r.tags),
                feature: series_key(&r.metric, &remaining),
            })
        });
        let Some(plan) = plan else { continue };
        sources.entry(plan.family.clone()).or_default().insert(skey);
        let slots = cells
            .entry((plan.family.clone(), plan.feature.clone()))
            .or_insert_with(|| vec![Vec::new(); t]);
        slots[slot].push(r.value);
    }

    let suffixed = ast.select.len() > 1 || ast.select.iter().any(|s| s.alias.is_some());
    let mut by_slot: BTreeMap<(usize, String), BTreeMap<String, f64>> = BTreeMap::new();
    for ((family, feature), mut slots) in cells {
        for sel in &ast.select {
            let aggregated: Vec<Option<f64>> = slots.iter_mut().map(|v| sel.aggregate.apply(v)).collect();
            let shifted = lag_series(&aggregated, sel.lag);
            let name = if suffixed {
                format!("{feature}:{}", sel.label())
            } else {
                feature.clone()
            };
            for (slot, v) in shifted.into_iter().enumerate() {
                if let Some(v) = v {
                    by_slot.entry((slot, family.clone())).or_default().insert(name.clone(), v);
                }
            }
        }
    }

    let rows: Vec<QueryRow> = by_slot
        .into_iter()
        .map(|((slot, name), value)| QueryRow {
            ts: index.ts_at(slot),
            name,
            value,
        })
        .collect();
    let mut warnings = Vec::new();
    if rows.is_empty() {
        warnings.push(format!("query {id} produced no rows"));
    }
    let provenance = sources.keys().map(|k| (k.clone(), id.clone())).collect();
    Ok(QueryResult {
        rows,
        sources,
        provenance,
        warnings,
    })
}

/// Shifts a slot series back by `k` steps; the first `k` slots repeat the
/// first observed value. Missing slots stay missing.
pub fn lag_series(values: &[Option<f64>], k: usize) -> Vec<Option<f64>> {
    if k == 0 {
        return values.to_vec();
    }
    let first = values.iter().flatten().next().copied();
    (0..values.len())
        .map(|t| if t < k { first } else { values[t - k] })
        .collect()
}

pub fn union_results(results: Vec<QueryResult>) -> Result<QueryResult, QueryError> {
    let mut out = QueryResult::default();
    for r in results {
        for key in r.sources.keys() {
            if out.sources.contains_key(key) {
                return Err(QueryError::DuplicateFamilyKey(key.clone()));
            }
        }
        out.sources.extend(r.sources);
        out.provenance.extend(r.provenance);
        out.rows.extend(r.rows);
        out.warnings.extend(r.warnings);
    }
    out.rows.sort_by(|a, b| (a.ts, &a.name).cmp(&(b.ts, &b.name)));
    Ok(out)
}

/// Densifies a query result into a family table on `index`, filling gaps by
/// nearest-observation interpolation.
pub fn to_family_table(result: &QueryResult, index: &TimeIndex) -> Result<FamilyTable, QueryError> {
    let mut points: BTreeMap<&str, BTreeMap<&str, Vec<(i64, f64)>>> = BTreeMap::new();
    for row in &result.rows {
        let family = points.entry(row.name.as_str()).or_default();
        for (feature, v) in &row.value {
            family.entry(feature.as_str()).or_default().push((row.ts, *v));
        }
    }
    let mut table = FamilyTable::new(*index);
    for (key, features) in points {
        let series: Vec<RawSeries> = features
            .into_iter()
            .map(|(name, pts)| RawSeries::from_points(name, pts))
            .collect();
        let mut family = assemble_family(&series, key, index)?;
        if let Some(src) = result.sources.get(key) {
            family.metrics = src.clone();
        }
        if let Some(p) = result.provenance.get(key) {
            family.provenance = p.clone();
        }
        table.insert(family)?;
    }
    Ok(table)
}
