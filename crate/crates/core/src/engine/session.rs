use serde::{Deserialize, Serialize};

use super::pseudocause::Pseudocause;
use super::{EngineError, RunReport};
use crate::model::{FamilyTable, TimeIndex};
use crate::query::FamilyFilter;
use crate::ranking::DEFAULT_TOP_K;
use crate::scoring::ScoringConfig;

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

/// What a caller supplies to open a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    /// Family table the session analyses.
    pub table: String,
    pub target: String,
    #[serde(default)]
    pub condition: Vec<String>,
    /// Glob patterns over family keys; empty searches every family.
    #[serde(default)]
    pub search: Vec<String>,
    #[serde(default)]
    pub config: ScoringConfig,
    /// Analysis range; defaults to the whole table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<TimeIndex>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl SessionSpec {
    pub fn new(table: impl Into<String>, target: impl Into<String>) -> Self {
        SessionSpec {
            table: table.into(),
            target: target.into(),
            condition: Vec::new(),
            search: Vec::new(),
            config: ScoringConfig::default(),
            range: None,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Changes applied when forking; `None` keeps the parent's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForkOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<TimeIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ScoringConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

/// One step of the interactive loop: target, conditioning set, search space
/// and the history of rankings produced for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub table: String,
    pub target: String,
    pub condition: Vec<String>,
    pub search: Vec<String>,
    pub config: ScoringConfig,
    pub index: TimeIndex,
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub pseudocauses: Vec<Pseudocause>,
    /// Append-only; never serialised with the session header.
    #[serde(skip)]
    pub runs: Vec<RunReport>,
}

impl Session {
    /// Opens a session over `table`, checking every reference in `spec`.
    pub fn open(id: impl Into<String>, spec: SessionSpec, table: &FamilyTable) -> Result<Session, EngineError> {
        let session = Session {
            id: id.into(),
            table: spec.table,
            target: spec.target,
            condition: spec.condition,
            search: spec.search,
            config: spec.config,
            index: spec.range.unwrap_or(table.index),
            top_k: spec.top_k,
            parent: None,
            pseudocauses: Vec::new(),
            runs: Vec::new(),
        };
        session.check(table)?;
        Ok(session)
    }

    pub fn pseudocause_keys(&self) -> Vec<String> {
        self.pseudocauses.iter().map(|p| p.key.clone()).collect()
    }

    /// Validates the session against its table. Problems with the hypothesis
    /// structure are reported as [`EngineError::InvalidHypothesis`].
    pub fn check(&self, table: &FamilyTable) -> Result<(), EngineError> {
        self.config.check()?;
        if self.top_k == 0 {
            return Err(EngineError::BadRequest("top_k must be positive".into()));
        }
        FamilyFilter::new(&self.search)?;
        if !table.index.contains(&self.index) {
            return Err(EngineError::BadRequest(format!(
                "range [{}, {}) is not on the table grid",
                self.index.start_ts, self.index.end_ts
            )));
        }
        if self.condition.contains(&self.target) {
            return Err(EngineError::InvalidHypothesis(format!(
                "target `{}` is also in the conditioning set",
                self.target
            )));
        }
        let view = self.materialize(table)?;
        let target = view.get(&self.target)?;
        for (i, c) in self.condition.iter().enumerate() {
            if self.condition[..i].contains(c) {
                return Err(EngineError::BadRequest(format!("`{c}` is listed twice in the condition")));
            }
            let fam = view.get(c)?;
            if let Some(m) = fam.metrics.intersection(&target.metrics).next() {
                return Err(EngineError::InvalidHypothesis(format!(
                    "metric `{m}` appears in both target `{}` and condition `{c}`",
                    self.target
                )));
            }
        }
        Ok(())
    }

    /// The session's view of `table`: sliced to the analysis range, with
    /// pseudocauses recomputed from their sources over that range.
    pub fn materialize(&self, table: &FamilyTable) -> Result<FamilyTable, EngineError> {
        let mut view = if self.index == table.index {
            table.clone()
        } else {
            table.slice(&self.index)?
        };
        for pc in &self.pseudocauses {
            let source = view.get(&pc.source)?;
            let fresh = super::make_pseudocause(source, pc.kind.clone())?;
            if view.contains(&fresh.key) {
                return Err(EngineError::Conflict(format!("family `{}` already exists", fresh.key)));
            }
            view.insert(fresh.to_family())?;
        }
        Ok(view)
    }

    /// Child session with the parent's settings, `overrides` applied, an
    /// empty history and recorded lineage. The parent is not modified.
    pub fn fork(&self, id: impl Into<String>, overrides: ForkOverrides, table: &FamilyTable) -> Result<Session, EngineError> {
        let mut child = Session {
            id: id.into(),
            parent: Some(self.id.clone()),
            runs: Vec::new(),
            ..self.clone()
        };
        if let Some(c) = overrides.condition {
            child.condition = c;
        }
        if let Some(s) = overrides.search {
            child.search = s;
        }
        if let Some(r) = overrides.range {
            child.index = r;
        }
        if let Some(c) = overrides.config {
            child.config = c;
        }
        if let Some(k) = overrides.top_k {
            child.top_k = k;
        }
        child.check(table).map_err(|e| match e {
            EngineError::InvalidHypothesis(m) | EngineError::BadRequest(m) => EngineError::InvalidOverride(m),
            EngineError::Model(crate::model::ModelError::UnknownFamily(f)) => {
                EngineError::InvalidOverride(format!("unknown family `{f}`"))
            }
            other => other,
        })?;
        Ok(child)
    }

    pub fn latest_run(&self) -> Option<&RunReport> {
        self.runs.last()
    }
}
