use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_table, make_pseudocause, plot_series, run_search, EngineError, ForkOverrides, Pseudocause, PseudocauseKind, RunReport, Session, SessionSpec};
use crate::ingest::{infer_index, parse_records, serialize_records, Format};
use crate::model::{FamilyTable, MetricRecord, PlotData, TimeIndex};
use crate::seed::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub records: usize,
    pub series: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<TimeIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub index: TimeIndex,
    pub families: Vec<String>,
}

/// One line of a session's append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum SessionEvent {
    Opened {
        session: Session,
    },
    Pseudocause {
        pseudocause: Pseudocause,
    },
    Run {
        run: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<String>,
        timings_ms: BTreeMap<String, u64>,
        elapsed_ms: u64,
    },
}

/// Where a run stands, as seen by pollers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Running { run: usize },
    Done { run: usize },
    Failed { run: usize, error: String },
}

/// Directory-backed store for datasets, family tables, sessions and reports:
///
/// ```text
/// datasets/<id>/records.jsonl   datasets/<id>/meta.json
/// tables/<id>.json              tables/<id>.meta.json
/// sessions/<id>.jsonl           reports/<session>/<run>.json
/// ```
///
/// Writers must be serialised per session; reads are safe at any time.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    threads: usize,
}

fn hex_id(prefix: &str, bytes: &[u8]) -> String {
    format!("{prefix}-{:016x}", fnv1a(bytes))
}

fn check_id(id: &str) -> Result<(), EngineError> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(EngineError::NotFound(format!("`{id}`")))
    }
}

fn read(path: &Path, what: &str) -> Result<String, EngineError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => EngineError::NotFound(what.to_string()),
        _ => e.into(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EngineError> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Workspace, EngineError> {
        let root = root.into();
        for dir in ["datasets", "tables", "sessions", "reports"] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(Workspace { root, threads: 0 })
    }

    /// Width of the scoring pool; 0 uses every core.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stores records under a content-derived id. Adding the same records
    /// twice returns the existing dataset.
    pub fn add_dataset(&self, records: &[MetricRecord]) -> Result<DatasetMeta, EngineError> {
        let text = serialize_records(records);
        let id = hex_id("ds", text.as_bytes());
        let dir = self.root.join("datasets").join(&id);
        let meta = DatasetMeta {
            id: id.clone(),
            records: records.len(),
            series: crate::ingest::build_series(records).len(),
            index: infer_index(records),
        };
        if !dir.join("meta.json").exists() {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("records.jsonl"), text)?;
            write_json(&dir.join("meta.json"), &meta)?;
        }
        Ok(meta)
    }

    pub fn dataset(&self, id: &str) -> Result<DatasetMeta, EngineError> {
        check_id(id)?;
        let path = self.root.join("datasets").join(id).join("meta.json");
        Ok(serde_json::from_str(&read(&path, &format!("dataset `{id}`"))?)?)
    }

    pub fn records(&self, id: &str) -> Result<Vec<MetricRecord>, EngineError> {
        self.dataset(id)?;
        let path = self.root.join("datasets").join(id).join("records.jsonl");
        let text = read(&path, &format!("dataset `{id}`"))?;
        Ok(parse_records(text.as_bytes(), Format::Jsonl)?.records)
    }

    /// Runs `query` over a stored dataset and stores the resulting table.
    pub fn add_query(&self, dataset: &str, query: &str, index: Option<TimeIndex>) -> Result<TableMeta, EngineError> {
        let records = self.records(dataset)?;
        let table = build_table(&records, query, index)?;
        let key = format!("{dataset}\n{query}\n{}", serde_json::to_string(&table.index)?);
        let id = hex_id("tbl", key.as_bytes());
        self.store_table(id, &table, Some(dataset.to_string()), Some(query.to_string()))
    }

    /// Stores an already-built table under a content-derived id.
    pub fn put_table(&self, table: &FamilyTable) -> Result<TableMeta, EngineError> {
        let json = table.to_json()?;
        let id = hex_id("tbl", json.as_bytes());
        self.store_table(id, table, None, None)
    }

    fn store_table(&self, id: String, table: &FamilyTable, dataset: Option<String>, query: Option<String>) -> Result<TableMeta, EngineError> {
        let meta = TableMeta {
            id: id.clone(),
            dataset,
            query,
            index: table.index,
            families: table.keys().map(str::to_string).collect(),
        };
        let dir = self.root.join("tables");
        let path = dir.join(format!("{id}.json"));
        if !path.exists() {
            let tmp = dir.join(format!("{id}.json.tmp"));
            fs::write(&tmp, table.to_json()?)?;
            fs::rename(tmp, &path)?;
            write_json(&dir.join(format!("{id}.meta.json")), &meta)?;
        }
        Ok(meta)
    }

    pub fn table_meta(&self, id: &str) -> Result<TableMeta, EngineError> {
        check_id(id)?;
        let path = self.root.join("tables").join(format!("{id}.meta.json"));
        Ok(serde_json::from_str(&read(&path, &format!("table `{id}`"))?)?)
    }

    pub fn table(&self, id: &str) -> Result<FamilyTable, EngineError> {
        check_id(id)?;
        let path = self.root.join("tables").join(format!("{id}.json"));
        Ok(FamilyTable::from_json(&read(&path, &format!("table `{id}`"))?)?)
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.jsonl"))
    }

    fn append(&self, id: &str, event: &SessionEvent) -> Result<(), EngineError> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let mut f = OpenOptions::new().append(true).open(self.session_path(id))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    /// Claims the next free session id and writes the opening event.
    fn persist_new(&self, mut build: impl FnMut(String) -> Result<Session, EngineError>) -> Result<Session, EngineError> {
        let dir = self.root.join("sessions");
        let mut n = fs::read_dir(&dir)?.count() + 1;
        loop {
            let id = format!("s{n:04}");
            let session = build(id.clone())?;
            match File::options().write(true).create_new(true).open(self.session_path(&id)) {
                Ok(mut f) => {
                    let mut line = serde_json::to_string(&SessionEvent::Opened { session: session.clone() })?;
                    line.push('\n');
                    f.write_all(line.as_bytes())?;
                    f.sync_data()?;
                    return Ok(session);
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn create_session(&self, spec: SessionSpec) -> Result<Session, EngineError> {
        let table = self.table(&spec.table)?;
        self.persist_new(|id| Session::open(id, spec.clone(), &table))
    }

    fn events(&self, id: &str) -> Result<Vec<SessionEvent>, EngineError> {
        check_id(id)?;
        let text = read(&self.session_path(id), &format!("session `{id}`"))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(EngineError::from))
            .collect()
    }

    /// Rebuilds a session by replaying its log.
    pub fn session(&self, id: &str) -> Result<Session, EngineError> {
        let mut session: Option<Session> = None;
        for event in self.events(id)? {
            match event {
                SessionEvent::Opened { session: s } => session = Some(s),
                SessionEvent::Pseudocause { pseudocause } => {
                    if let Some(s) = session.as_mut() {
                        s.pseudocauses.push(pseudocause);
                    }
                }
                SessionEvent::Run { run, .. } => {
                    let report = self.report(id, run)?;
                    if let Some(s) = session.as_mut() {
                        s.runs.push(report);
                    }
                }
            }
        }
        session.ok_or_else(|| EngineError::Corrupt(serde::de::Error::custom(format!("session `{id}` has no opening event"))))
    }

    pub fn report(&self, id: &str, run: usize) -> Result<RunReport, EngineError> {
        check_id(id)?;
        let path = self.root.join("reports").join(id).join(format!("{run}.json"));
        Ok(serde_json::from_str(&read(&path, &format!("run {run} of session `{id}`"))?)?)
    }

    /// Raw bytes of a stored report.
    pub fn report_bytes(&self, id: &str, run: usize) -> Result<Vec<u8>, EngineError> {
        check_id(id)?;
        let path = self.root.join("reports").join(id).join(format!("{run}.json"));
        Ok(read(&path, &format!("run {run} of session `{id}`"))?.into_bytes())
    }

    /// Run number previously recorded for `token`, if any.
    pub fn run_for_token(&self, id: &str, token: &str) -> Result<Option<usize>, EngineError> {
        Ok(self.events(id)?.into_iter().find_map(|e| match e {
            SessionEvent::Run { run, token: Some(t), .. } if t == token => Some(run),
            _ => None,
        }))
    }

    /// Runs the session's search and appends the report. A repeated `token`
    /// returns the run recorded for it instead of searching again.
    pub fn run(&self, id: &str, token: Option<&str>) -> Result<(usize, RunReport), EngineError> {
        if let Some(t) = token {
            if let Some(run) = self.run_for_token(id, t)? {
                return Ok((run, self.report(id, run)?));
            }
        }
        let session = self.session(id)?;
        let table = self.table(&session.table)?;
        let outcome = run_search(&session, &table, self.threads)?;
        let run = session.runs.len() + 1;
        let dir = self.root.join("reports").join(id);
        fs::create_dir_all(&dir)?;
        write_json(&dir.join(format!("{run}.json")), &outcome.report)?;
        self.append(
            id,
            &SessionEvent::Run {
                run,
                token: token.map(str::to_string),
                timings_ms: outcome.timings_ms,
                elapsed_ms: outcome.elapsed_ms,
            },
        )?;
        Ok((run, outcome.report))
    }

    /// Derives a pseudocause from `source` over the session range and makes
    /// it available as a conditioning family (it is never searched).
    pub fn add_pseudocause(&self, id: &str, source: &str, kind: PseudocauseKind) -> Result<Pseudocause, EngineError> {
        let session = self.session(id)?;
        let table = self.table(&session.table)?;
        let view = session.materialize(&table)?;
        let pc = make_pseudocause(view.get(source)?, kind)?;
        if view.contains(&pc.key) {
            return Err(EngineError::Conflict(format!("family `{}` already exists", pc.key)));
        }
        self.append(id, &SessionEvent::Pseudocause { pseudocause: pc.clone() })?;
        Ok(pc)
    }

    pub fn fork(&self, id: &str, overrides: ForkOverrides) -> Result<Session, EngineError> {
        let parent = self.session(id)?;
        let table = self.table(&parent.table)?;
        self.persist_new(|child| parent.fork(child, overrides.clone(), &table))
    }

    pub fn plot(&self, id: &str, family: &str) -> Result<PlotData, EngineError> {
        let session = self.session(id)?;
        let table = self.table(&session.table)?;
        plot_series(&session, &table, family)
    }
}
