//! Session orchestration: hypothesis generation, parallel scoring, ranking,
//! pseudocauses, diagnostic plots and workspace persistence.

mod pseudocause;
mod session;
mod workspace;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pseudocause::{make_pseudocause, moving_average, seasonal_profile, Pseudocause, PseudocauseKind};
pub use session::{ForkOverrides, Session, SessionSpec};
pub use workspace::{DatasetMeta, RunStatus, SessionEvent, TableMeta, Workspace};

use crate::ingest::{infer_index, IngestError};
use crate::model::{FamilyTable, Hypothesis, MetricRecord, ModelError, PlotData, ScoreReport, TimeIndex};
use crate::query::{evaluate_query, parse_queries, to_family_table, union_results, Exclusion, FamilyFilter, QueryError};
use crate::ranking::{rank, RankedReport};
use crate::scoring::{score_hypothesis, ScoringConfig, ScoringError};
use crate::stats::benjamini_hochberg;

/// False discovery rate used to flag significant families in a run.
pub const FDR_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("period {period} is outside [2, {}] for a series of length {len}", len / 2)]
    BadPeriod { period: usize, len: usize },
    #[error("family `{0}` was not scored in the latest run")]
    NotScored(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("workspace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt workspace file: {0}")]
    Corrupt(#[from] serde_json::Error),
}

/// A family whose scoring failed; listed after the ranking with score 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub family: String,
    pub score: f64,
    pub error: String,
}

/// Everything a run produced that is a function of its inputs. Wall-clock
/// timings live in [`RunOutcome`] so that reports are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target: String,
    pub condition: Vec<String>,
    pub search: Vec<String>,
    pub index: TimeIndex,
    pub config: ScoringConfig,
    pub ranked: RankedReport,
    /// Families passing Benjamini-Hochberg at [`FDR_ALPHA`] over every scored hypothesis.
    pub significant: Vec<String>,
    /// Every family that received a score, sorted by key.
    pub scored: Vec<String>,
    pub failures: Vec<Failure>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timings_ms: BTreeMap<String, u64>,
    pub elapsed_ms: u64,
}

/// Scores `hypotheses` on a pool of `threads` workers (0 picks the rayon
/// default). Results come back in input order whatever the scheduling.
pub fn score_all(
    hypotheses: &[Hypothesis],
    table: &FamilyTable,
    config: &ScoringConfig,
    threads: usize,
) -> Vec<Result<ScoreReport, ScoringError>> {
    let work = || {
        hypotheses
            .par_iter()
            .map(|h| score_hypothesis(h, table, config))
            .collect::<Vec<_>>()
    };
    if threads == 1 {
        return hypotheses.iter().map(|h| score_hypothesis(h, table, config)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

/// One iteration of the search loop: generate hypotheses for the session,
/// score them, rank the top K and attach significance flags.
pub fn run_search(session: &Session, table: &FamilyTable, threads: usize) -> Result<RunOutcome, EngineError> {
    let started = std::time::Instant::now();
    session.check(table)?;
    let view = session.materialize(table)?;
    let filter = FamilyFilter::new(&session.search)?;
    let set = crate::query::generate_hypotheses(&view, &session.target, &session.condition, &filter, &session.pseudocause_keys())?;
    let results = score_all(&set.hypotheses, &view, &session.config, threads);

    let mut scored = Vec::new();
    let mut failures = Vec::new();
    let mut timings_ms = BTreeMap::new();
    for (h, r) in set.hypotheses.iter().zip(results) {
        match r {
            Ok(mut report) => {
                timings_ms.insert(h.x.clone(), report.timing_ms);
                // Plots are recomputed on demand; keep reports small.
                report.plot = None;
                scored.push(report);
            }
            Err(e) => failures.push(Failure {
                family: h.x.clone(),
                score: 0.0,
                error: e.to_string(),
            }),
        }
    }
    let pvals: Vec<f64> = scored.iter().map(|r| r.p_value).collect();
    let mut significant: Vec<String> = benjamini_hochberg(&pvals, FDR_ALPHA)
        .into_iter()
        .map(|i| scored[i].hypothesis.x.clone())
        .collect();
    significant.sort();
    let mut scored_keys: Vec<String> = scored.iter().map(|r| r.hypothesis.x.clone()).collect();
    scored_keys.sort();
    failures.sort_by(|a, b| a.family.cmp(&b.family));
    let report = RunReport {
        target: session.target.clone(),
        condition: session.condition.clone(),
        search: session.search.clone(),
        index: session.index,
        config: session.config.clone(),
        ranked: rank(scored, session.top_k),
        significant,
        scored: scored_keys,
        failures,
        excluded: set.excluded,
    };
    Ok(RunOutcome {
        report,
        timings_ms,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}

/// The residual of the target on the conditioning set next to its
/// prediction from `family`, for a family scored in the latest run.
pub fn plot_series(session: &Session, table: &FamilyTable, family: &str) -> Result<PlotData, EngineError> {
    let latest = session
        .latest_run()
        .ok_or_else(|| EngineError::NotScored(family.to_string()))?;
    if latest.scored.binary_search_by(|k| k.as_str().cmp(family)).is_err() {
        return Err(EngineError::NotScored(family.to_string()));
    }
    let view = session.materialize(table)?;
    let h = Hypothesis::new(family, latest.target.clone(), latest.condition.clone());
    let report = score_hypothesis(&h, &view, &latest.config)?;
    Ok(report.plot.expect("scoring always attaches a plot"))
}

/// Evaluates one or more queries (separated by `;`) over `records` on
/// `index`, or on the smallest grid covering the records when absent.
pub fn build_table(records: &[MetricRecord], queries: &str, index: Option<TimeIndex>) -> Result<FamilyTable, EngineError> {
    let asts = parse_queries(queries)?;
    let index = match index {
        Some(i) => i,
        None => infer_index(records).ok_or_else(|| EngineError::BadRequest("dataset has no records".into()))?,
    };
    let results = asts
        .iter()
        .map(|a| evaluate_query(a, records, &index))
        .collect::<Result<Vec<_>, _>>()?;
    let union = union_results(results).map_err(|e| match e {
        QueryError::DuplicateFamilyKey(k) => EngineError::Conflict(format!("family `{k}` is defined by more than one query")),
        other => other.into(),
    })?;
    Ok(to_family_table(&union, &index)?)
}

#[cfg(test)]
mod tests;
