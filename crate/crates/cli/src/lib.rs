//! `causerank` command-line dispatch and the HTTP service.

pub mod server;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use causerank_core::engine::{build_table, make_pseudocause, run_search, EngineError, PseudocauseKind, Session, SessionSpec, Workspace};
use causerank_core::ingest::{build_series, parse_records, serialize_records, Format};
use causerank_core::ranking::{discounted_gain_with, first_cause_rank, summarize, Discount, ScenarioLabels, ScenarioOutcome, Summary};
use causerank_core::synth::{generate, preset, Scenario, ScenarioManifest, PRESETS, SUITE};
use causerank_core::{FamilyTable, Method, ScoringConfig, ScoringError, TimeIndex};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Methods compared by `eval` when none are given.
pub const EVAL_METHODS: [&str; 5] = ["corrmean", "corrmax", "l2", "l2-p50", "l2-p500"];

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Io(_) | EngineError::Corrupt(_) | EngineError::Scoring(ScoringError::NumericalFailure(_)) => {
                CliError::Internal(e.to_string())
            }
            other => CliError::User(other.to_string()),
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// A half-open time range written `a..b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span(pub i64, pub i64);

fn parse_span(s: &str) -> Result<Span, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected `start..end`, got `{s}`"))?;
    let a: i64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
    let b: i64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
    if a >= b {
        return Err(format!("empty range `{s}`"));
    }
    Ok(Span(a, b))
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiscountArg {
    Reciprocal,
    Log,
}

#[derive(Debug, Parser)]
#[command(name = "causerank", version, about = "Rank candidate root causes of a metric anomaly")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse metric files into one jsonl dataset.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// jsonl or csv-wide; guessed from the extension when absent.
        #[arg(long)]
        format: Option<String>,
    },
    /// Evaluate a query file over a dataset into a family table.
    Query {
        dataset: PathBuf,
        query_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid range `start..end`; defaults to the span of the data.
        #[arg(long, value_parser = parse_span)]
        range: Option<Span>,
        #[arg(long)]
        step: Option<i64>,
    },
    /// Score every family against a target and print the ranking as jsonl.
    Rank {
        table: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        condition: Vec<String>,
        /// Glob over family keys; repeatable. Searches everything by default.
        #[arg(long)]
        search: Vec<String>,
        #[arg(long, default_value = "l2", value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        proj_dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_span)]
        range: Option<Span>,
        #[arg(long, value_parser = parse_span)]
        highlight: Option<Span>,
        #[arg(long, default_value_t = causerank_core::ranking::DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long)]
        k_folds: Option<usize>,
        #[arg(long)]
        proj_samples: Option<usize>,
        /// Scoring pool width; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank labelled scenarios with several methods and summarise.
    Eval {
        dir: PathBuf,
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Condition seasonal scenarios on the target's seasonal profile.
        #[arg(long)]
        use_pseudocause: bool,
        #[arg(long, value_enum, default_value_t = DiscountArg::Reciprocal)]
        discount: DiscountArg,
        /// Also write the summaries as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a seeded synthetic scenario (or `suite`) to a directory.
    Synth {
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        families: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
    },
    /// Serve the HTTP API over a workspace directory.
    Serve {
        #[arg(long, env = "CAUSERANK_WORKSPACE")]
        workspace: PathBuf,
        #[arg(long, env = "CAUSERANK_LISTEN", default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 user error, 2 internal error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Ingest { files, out: dest, format } => ingest(&files, &dest, format.as_deref(), err),
        Command::Query {
            dataset,
            query_file,
            out: dest,
            range,
            step,
        } => query(&dataset, &query_file, &dest, range, step, err),
        Command::Rank {
            table,
            target,
            condition,
            search,
            method,
            proj_dim,
            seed,
            range,
            highlight,
            top_k,
            k_folds,
            proj_samples,
            threads,
            out: dest,
        } => {
            let method = match (method, proj_dim) {
                (m, None) => m,
                (Method::L2 | Method::L2Proj(_), Some(d)) => Method::L2Proj(d),
                (m, Some(_)) => return Err(user(format!("--proj-dim applies to l2 methods, not {m}"))),
            };
            let mut config = ScoringConfig::new(method).with_seed(seed);
            if let Some(k) = k_folds {
                config.k_folds = k;
            }
            if let Some(s) = proj_samples {
                config.proj_samples = s;
            }
            let table = load_table(&table)?;
            let mut index = match range {
                Some(Span(a, b)) => TimeIndex::new(a, b, table.index.step).map_err(user)?,
                None => table.index,
            };
            if let Some(Span(a, b)) = highlight {
                index = index.with_highlight(a, b).map_err(user)?;
            }
            let spec = SessionSpec {
                table: "cli".into(),
                target,
                condition,
                search,
                config,
                range: Some(index),
                top_k,
            };
            let session = Session::open("cli", spec, &table)?;
            let outcome = run_search(&session, &table, threads)?;
            for f in &outcome.report.failures {
                let _ = writeln!(err, "warning: {} failed: {}", f.family, f.error);
            }
            let text = outcome.report.ranked.to_jsonl();
            match dest {
                Some(p) => write_output(&p, &text),
                None => out.write_all(text.as_bytes()).map_err(|e| CliError::Internal(e.to_string())),
            }
        }
        Command::Eval {
            dir,
            methods,
            seed,
            threads,
            use_pseudocause,
            discount,
            json,
        } => {
            let methods = if methods.is_empty() {
                EVAL_METHODS.iter().map(|m| m.parse().expect("built-in method names parse")).collect()
            } else {
                methods
            };
            let discount = match discount {
                DiscountArg::Reciprocal => Discount::Reciprocal,
                DiscountArg::Log => Discount::Log,
            };
            let results = eval(&dir, &methods, seed, threads, use_pseudocause, discount, err)?;
            out.write_all(render_summary(&results).as_bytes())
                .map_err(|e| CliError::Internal(e.to_string()))?;
            if let Some(p) = json {
                write_output(&p, &pretty(&results)?)?;
            }
            Ok(())
        }
        Command::Synth {
            scenario,
            seed,
            out: dest,
            families,
            t,
        } => {
            let names: Vec<&str> = if scenario == "suite" { SUITE.to_vec() } else { vec![scenario.as_str()] };
            for name in &names {
                let mut spec = preset(name, seed)
                    .ok_or_else(|| user(format!("unknown scenario `{name}`; valid: {}, suite", PRESETS.join(", "))))?;
                if let Some(n) = families {
                    spec.n_families = n;
                }
                if let Some(t) = t {
                    spec.t = t;
                }
                let mut s = generate(&spec);
                s.name = name.to_string();
                let dir = if names.len() > 1 { dest.join(name) } else { dest.clone() };
                write_scenario(&s, &dir)?;
                let _ = writeln!(err, "wrote {} ({} families) to {}", s.name, s.table.len(), dir.display());
            }
            Ok(())
        }
        Command::Serve { workspace, listen, threads } => {
            let ws = Workspace::open(&workspace)?.with_threads(threads);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(server::serve(ws, &listen)).map_err(|e| CliError::User(format!("cannot serve on {listen}: {e}")))
        }
    }
}

fn ingest(files: &[PathBuf], dest: &Path, format: Option<&str>, err: &mut dyn Write) -> Result<(), CliError> {
    let mut records = Vec::new();
    let mut dropped = 0;
    for path in files {
        let fmt: Format = match format {
            Some(f) => f.parse().map_err(user)?,
            None if path.extension().is_some_and(|e| e == "csv") => Format::CsvWide,
            None => Format::Jsonl,
        };
        let parsed = parse_records(&read_input(path)?, fmt).map_err(|e| user(format!("{}: {e}", path.display())))?;
        dropped += parsed.warnings;
        records.extend(parsed.records);
    }
    write_output(dest, &serialize_records(&records))?;
    let _ = writeln!(
        err,
        "{} records in {} series ({} non-finite rows dropped)",
        records.len(),
        build_series(&records).len(),
        dropped
    );
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<causerank_core::MetricRecord>, CliError> {
    Ok(parse_records(&read_input(path)?, Format::Jsonl)
        .map_err(|e| user(format!("{}: {e}", path.display())))?
        .records)
}

fn query(dataset: &Path, query_file: &Path, dest: &Path, range: Option<Span>, step: Option<i64>, err: &mut dyn Write) -> Result<(), CliError> {
    let records = load_records(dataset)?;
    let text = String::from_utf8(read_input(query_file)?).map_err(|_| user("query file is not UTF-8"))?;
    let inferred = causerank_core::ingest::infer_index(&records);
    let index = match range {
        Some(Span(a, b)) => {
            let step = step.or(inferred.map(|i| i.step)).unwrap_or(1);
            Some(TimeIndex::new(a, b, step).map_err(user)?)
        }
        None => match step {
            Some(s) => inferred.map(|i| TimeIndex::new(i.start_ts, i.end_ts, s)).transpose().map_err(user)?,
            None => None,
        },
    };
    let table = build_table(&records, &text, index)?;
    write_output(dest, &table.to_json().map_err(|e| CliError::Internal(e.to_string()))?)?;
    let _ = writeln!(err, "{} families over {} steps", table.len(), table.index.len());
    Ok(())
}

fn load_table(path: &Path) -> Result<FamilyTable, CliError> {
    let text = String::from_utf8(read_input(path)?).map_err(|_| user("family table is not UTF-8"))?;
    FamilyTable::from_json(&text).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// Writes `records.jsonl`, `labels.json` and `scenario.json` into `dir`.
pub fn write_scenario(s: &Scenario, dir: &Path) -> Result<(), CliError> {
    write_output(&dir.join("records.jsonl"), &serialize_records(&s.to_records()))?;
    write_output(&dir.join("labels.json"), &pretty(&s.labels)?)?;
    write_output(&dir.join("scenario.json"), &pretty(&s.manifest())?)?;
    Ok(())
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))
}

/// Per-method results of an evaluation run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MethodResult {
    pub method: Method,
    /// Scenario name → rank of its first cause (`None` = not in the top K).
    pub ranks: Vec<(String, Option<usize>)>,
    pub summary: Summary,
}

fn scenario_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.join("scenario.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| user(format!("cannot read {}: {e}", dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scenario.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(user(format!("no scenario.json under {}", dir.display())));
    }
    Ok(dirs)
}

pub fn eval(
    dir: &Path,
    methods: &[Method],
    seed: u64,
    threads: usize,
    use_pseudocause: bool,
    discount: Discount,
    err: &mut dyn Write,
) -> Result<Vec<MethodResult>, CliError> {
    let mut results: Vec<MethodResult> = methods
        .iter()
        .map(|&m| MethodResult {
            method: m,
            ranks: Vec::new(),
            summary: summarize(&[]),
        })
        .collect();
    let mut outcomes: Vec<Vec<ScenarioOutcome>> = vec![Vec::new(); methods.len()];
    for sdir in scenario_dirs(dir)? {
        let text = String::from_utf8(read_input(&sdir.join("scenario.json"))?).map_err(|_| user("scenario.json is not UTF-8"))?;
        let manifest: ScenarioManifest = serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", sdir.display())))?;
        let labels: ScenarioLabels = serde_json::from_slice(&read_input(&sdir.join("labels.json"))?)
            .map_err(|e| user(format!("{}: {e}", sdir.display())))?;
        if labels.causes().next().is_none() {
            let _ = writeln!(err, "skipping {}: no cause labelled", manifest.name);
            continue;
        }
        let records = load_records(&sdir.join("records.jsonl"))?;
        let table = build_table(&records, &manifest.query, Some(manifest.index))?;
        let name = sdir.file_name().map_or(manifest.name.clone(), |n| n.to_string_lossy().into_owned());
        for (i, &method) in methods.iter().enumerate() {
            let mut spec = SessionSpec::new("eval", manifest.target.clone());
            spec.condition = manifest.condition.clone();
            spec.config = ScoringConfig::new(method).with_seed(seed);
            let mut session = Session::open(&name, spec, &table)?;
            if let (true, Some(period)) = (use_pseudocause, manifest.seasonal_period) {
                let pc = make_pseudocause(table.get(&manifest.target).map_err(user)?, PseudocauseKind::Seasonal { period })?;
                session.condition.push(pc.key.clone());
                session.pseudocauses.push(pc);
            }
            let report = run_search(&session, &table, threads)?.report;
            let rank = first_cause_rank(&report.ranked, &labels);
            let _ = writeln!(err, "{name:<12} {:<10} rank {}", method.to_string(), rank.map_or("-".to_string(), |r| r.to_string()));
            let gain = discounted_gain_with(&report.ranked, &labels, discount);
            outcomes[i].push(ScenarioOutcome { rank, gain });
            results[i].ranks.push((name.clone(), rank));
        }
    }
    for (r, o) in results.iter_mut().zip(&outcomes) {
        r.summary = summarize(o);
    }
    Ok(results)
}

/// Table with one column per method: gains, then success rates in percent.
pub fn render_summary(results: &[MethodResult]) -> String {
    let mut s = format!("{:<16}", "metric");
    for r in results {
        s.push_str(&format!("{:>10}", r.method.to_string()));
    }
    s.push('\n');
    let mut row = |label: &str, f: &dyn Fn(&Summary) -> String| {
        s.push_str(&format!("{label:<16}"));
        for r in results {
            s.push_str(&format!("{:>10}", f(&r.summary)));
        }
        s.push('\n');
    };
    row("scenarios", &|m| m.scenarios.to_string());
    row("avg gain", &|m| format!("{:.3}", m.mean_gain));
    row("harmonic gain", &|m| format!("{:.3}", m.harmonic_gain));
    row("stdev gain", &|m| format!("{:.3}", m.stdev_gain));
    for k in causerank_core::ranking::SUCCESS_CUTOFFS {
        row(&format!("success@{k} %"), &|m| format!("{:.0}", 100.0 * m.success.get(&k).copied().unwrap_or(0.0)));
    }
    s
}
