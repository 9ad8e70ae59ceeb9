use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::model::{FeatureFamily, Method};
use crate::synth::{generate, preset, ScenarioSpec, TARGET_KEY};

fn randn(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    (0..t).map(|_| StandardNormal.sample(rng)).collect()
}

fn fam(key: &str, cols: Vec<Vec<f64>>) -> FeatureFamily {
    let t = cols[0].len();
    let f = cols.len();
    let names = (0..f).map(|j| format!("{key}{{feature=f{j:02}}}")).collect();
    let data: Vec<f64> = cols.into_iter().flatten().collect();
    FeatureFamily::from_columns(key, names, DMatrix::from_vec(t, f, data), "test").unwrap()
}

fn session(table: &FamilyTable, target: &str, method: Method) -> Session {
    let mut spec = SessionSpec::new("t", target);
    spec.config = ScoringConfig::new(method);
    Session::open("s", spec, table).unwrap()
}

fn small_table() -> FamilyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 200;
    let a = randn(&mut rng, t);
    let e = randn(&mut rng, t);
    let y: Vec<f64> = a.iter().zip(&e).map(|(v, e)| v + 0.3 * e).collect();
    let idx = TimeIndex::new(0, t as i64, 1).unwrap();
    FamilyTable::from_families(idx, [fam("a", vec![a]), fam("b", vec![randn(&mut rng, t)]), fam("y", vec![y])]).unwrap()
}

#[test]
fn three_families_give_two_scores() {
    let table = small_table();
    let out = run_search(&session(&table, "y", Method::L2), &table, 1).unwrap();
    assert_eq!(out.report.ranked.families(), vec!["a", "b"]);
    assert_eq!(out.report.scored, vec!["a", "b"]);
    assert_eq!(out.report.excluded.len(), 1);
    assert_eq!(out.report.significant, vec!["a"]);
    assert!(out.timings_ms.contains_key("a"));
    assert!(out.report.ranked.entries.iter().all(|e| e.plot.is_none()));
}

#[test]
fn planted_cause_in_top_five() {
    let s = generate(&preset("planted", 11).unwrap());
    let sess = session(&s.table, TARGET_KEY, Method::L2);
    let out = run_search(&sess, &s.table, 0).unwrap();
    let pos = out.report.ranked.position(s.cause().unwrap()).unwrap();
    assert!(pos <= 5, "{pos}");
}

#[test]
fn reports_are_byte_identical_across_runs_and_pool_widths() {
    let s = generate(&ScenarioSpec {
        n_families: 30,
        t: 300,
        seed: 4,
        ..Default::default()
    });
    let sess = session(&s.table, TARGET_KEY, Method::L2Proj(5));
    let a = serde_json::to_string(&run_search(&sess, &s.table, 1).unwrap().report).unwrap();
    let b = serde_json::to_string(&run_search(&sess, &s.table, 4).unwrap().report).unwrap();
    let c = serde_json::to_string(&run_search(&sess, &s.table, 4).unwrap().report).unwrap();
    assert_eq!(a, b);
    assert_eq!(b, c);
}

#[test]
fn failures_are_reported_not_fatal() {
    let idx = TimeIndex::new(0, 3, 1).unwrap();
    let table = FamilyTable::from_families(
        idx,
        [fam("a", vec![vec![1.0, 2.0, 4.0]]), fam("y", vec![vec![0.0, 1.0, 0.5]])],
    )
    .unwrap();
    let out = run_search(&session(&table, "y", Method::L2), &table, 1).unwrap();
    assert!(out.report.ranked.entries.is_empty());
    assert_eq!(out.report.failures.len(), 1);
    assert_eq!(out.report.failures[0].family, "a");
    assert_eq!(out.report.failures[0].score, 0.0);
    assert!(out.report.failures[0].error.contains("rows"));
}

#[test]
fn session_validation() {
    let table = small_table();
    let mut spec = SessionSpec::new("t", "y");
    spec.condition = vec!["y".into()];
    assert!(matches!(Session::open("s", spec, &table), Err(EngineError::InvalidHypothesis(_))));
    let mut spec = SessionSpec::new("t", "nope");
    spec.condition = vec![];
    assert!(matches!(Session::open("s", spec, &table), Err(EngineError::Model(_))));
    let mut spec = SessionSpec::new("t", "y");
    spec.search = vec!["[".into()];
    assert!(Session::open("s", spec, &table).is_err());
    let mut spec = SessionSpec::new("t", "y");
    spec.range = Some(TimeIndex::new(0, 500, 1).unwrap());
    assert!(matches!(Session::open("s", spec, &table), Err(EngineError::BadRequest(_))));
}

#[test]
fn fork_semantics() {
    let table = small_table();
    let parent = session(&table, "y", Method::L2);
    let child = parent.fork("c", ForkOverrides::default(), &table).unwrap();
    assert_eq!(child.parent.as_deref(), Some("s"));
    assert_eq!(Session { id: "s".into(), parent: None, ..child.clone() }, parent);
    let bad = ForkOverrides {
        condition: Some(vec!["y".into()]),
        ..Default::default()
    };
    assert!(matches!(parent.fork("c", bad, &table), Err(EngineError::InvalidOverride(_))));
    let narrowed = ForkOverrides {
        search: Some(vec!["b".into()]),
        range: Some(TimeIndex::new(50, 150, 1).unwrap()),
        ..Default::default()
    };
    let child = parent.fork("c", narrowed, &table).unwrap();
    let out = run_search(&child, &table, 1).unwrap();
    assert_eq!(out.report.ranked.families(), vec!["b"]);
    assert_eq!(out.report.index.len(), 100);
}

#[test]
fn seasonal_pseudocause_lifts_spike_cause() {
    let s = generate(&preset("seasonal", 3).unwrap());
    let cause = s.cause().unwrap().to_string();
    let mut parent = session(&s.table, TARGET_KEY, Method::L2);
    let before = run_search(&parent, &s.table, 0).unwrap().report;
    let pc = make_pseudocause(s.table.get(TARGET_KEY).unwrap(), PseudocauseKind::Seasonal { period: 60 }).unwrap();
    parent.pseudocauses.push(pc.clone());
    // available for conditioning but never searched
    let unchanged = run_search(&parent, &s.table, 0).unwrap().report;
    assert_eq!(unchanged.ranked.to_jsonl(), before.ranked.to_jsonl());
    assert!(unchanged.excluded.iter().any(|e| e.family == pc.key));
    let child = parent
        .fork(
            "c",
            ForkOverrides {
                condition: Some(vec![pc.key.clone()]),
                ..Default::default()
            },
            &s.table,
        )
        .unwrap();
    let after = run_search(&child, &s.table, 0).unwrap().report;
    assert_ne!(after.ranked.families(), before.ranked.families());
    let rb = before.ranked.position(&cause).unwrap();
    let ra = after.ranked.position(&cause).unwrap();
    assert!(rb > 1, "seasonal confounder should lead unconditioned");
    assert_eq!(ra, 1);
}

#[test]
fn plots() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = 600;
    let y = randn(&mut rng, t);
    // spikes above the mean are visible in `asym`, dips are not
    let asym: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let idx = TimeIndex::new(0, t as i64, 1).unwrap();
    let table = FamilyTable::from_families(
        idx,
        [
            fam("copy", vec![y.clone()]),
            fam("null", vec![randn(&mut rng, t)]),
            fam("asym", vec![asym]),
            fam("y", vec![y]),
        ],
    )
    .unwrap();
    let mut sess = session(&table, "y", Method::L2);
    assert!(matches!(plot_series(&sess, &table, "copy"), Err(EngineError::NotScored(_))));
    sess.runs.push(run_search(&sess, &table, 1).unwrap().report);
    assert!(matches!(plot_series(&sess, &table, "y"), Err(EngineError::NotScored(_))));

    let p = plot_series(&sess, &table, "copy").unwrap();
    let err = p.observed.iter().zip(&p.predicted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 0.05, "{err}");

    let p = plot_series(&sess, &table, "null").unwrap();
    let mean = p.observed.iter().sum::<f64>() / t as f64;
    let spread = p.predicted.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    assert!(spread < 0.2, "{spread}");

    let p = plot_series(&sess, &table, "asym").unwrap();
    let corr_where = |keep: &dyn Fn(f64) -> bool| {
        let pairs: Vec<(f64, f64)> = p.observed.iter().zip(&p.predicted).filter(|(o, _)| keep(**o)).map(|(a, b)| (*a, *b)).collect();
        let n = pairs.len() as f64;
        let (ma, mb) = (pairs.iter().map(|x| x.0).sum::<f64>() / n, pairs.iter().map(|x| x.1).sum::<f64>() / n);
        let sab: f64 = pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum();
        let saa: f64 = pairs.iter().map(|(a, _)| (a - ma).powi(2)).sum();
        let sbb: f64 = pairs.iter().map(|(_, b)| (b - mb).powi(2)).sum();
        if sbb == 0.0 {
            0.0
        } else {
            sab / (saa * sbb).sqrt()
        }
    };
    let up = corr_where(&|o| o > 0.0);
    let down = corr_where(&|o| o < 0.0);
    assert!(up > down + 0.5, "{up} vs {down}");
}

fn records_for(table: &FamilyTable) -> Vec<MetricRecord> {
    crate::synth::to_records(table)
}

#[test]
fn workspace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap().with_threads(2);
    let s = generate(&ScenarioSpec {
        n_families: 8,
        t: 120,
        seed: 2,
        ..Default::default()
    });
    let records = records_for(&s.table);
    let ds = ws.add_dataset(&records).unwrap();
    assert_eq!(ws.add_dataset(&records).unwrap(), ds);
    assert_eq!(ds.index, Some(s.table.index));
    let tm = ws.add_query(&ds.id, crate::synth::SCENARIO_QUERY, None).unwrap();
    assert_eq!(tm.families.len(), 9);
    let table = ws.table(&tm.id).unwrap();
    assert_eq!(table.get(TARGET_KEY).unwrap().matrix, s.table.get(TARGET_KEY).unwrap().matrix);

    let mut spec = SessionSpec::new(tm.id.clone(), TARGET_KEY);
    spec.config = ScoringConfig::new(Method::CorrMax);
    let sess = ws.create_session(spec.clone()).unwrap();
    let (n1, r1) = ws.run(&sess.id, Some("tok")).unwrap();
    let (n2, r2) = ws.run(&sess.id, Some("tok")).unwrap();
    assert_eq!((n1, n2), (1, 1));
    assert_eq!(r1.ranked.to_jsonl(), r2.ranked.to_jsonl());
    let (n3, r3) = ws.run(&sess.id, None).unwrap();
    assert_eq!(n3, 2);
    assert_eq!(r3.ranked.to_jsonl(), r1.ranked.to_jsonl());
    assert_eq!(ws.report_bytes(&sess.id, 1).unwrap(), ws.report_bytes(&sess.id, 2).unwrap());

    let replayed = ws.session(&sess.id).unwrap();
    assert_eq!(replayed.runs.len(), 2);
    let pc = ws.add_pseudocause(&sess.id, TARGET_KEY, PseudocauseKind::Trend { window: 5 }).unwrap();
    assert!(matches!(
        ws.add_pseudocause(&sess.id, TARGET_KEY, PseudocauseKind::Trend { window: 5 }),
        Err(EngineError::Conflict(_))
    ));
    assert!(matches!(
        ws.add_pseudocause(&sess.id, TARGET_KEY, PseudocauseKind::Seasonal { period: 1 }),
        Err(EngineError::BadPeriod { .. })
    ));
    let child = ws
        .fork(
            &sess.id,
            ForkOverrides {
                condition: Some(vec![pc.key.clone()]),
                ..Default::default()
            },
        )
        .unwrap();
    assert_ne!(child.id, sess.id);
    assert_eq!(child.parent.as_deref(), Some(sess.id.as_str()));
    let (cn, _) = ws.run(&child.id, None).unwrap();
    assert_eq!(cn, 1);
    // the parent log is untouched by the fork
    assert_eq!(ws.session(&sess.id).unwrap().runs.len(), 2);
    let first = ws.session(&child.id).unwrap().runs[0].ranked.entries[0].family().to_string();
    assert!(ws.plot(&child.id, &first).is_ok());
    assert!(matches!(ws.plot(&child.id, TARGET_KEY), Err(EngineError::NotScored(_))));
    assert!(matches!(ws.session("s9999"), Err(EngineError::NotFound(_))));
    assert!(matches!(ws.session("../x"), Err(EngineError::NotFound(_))));
    assert!(matches!(ws.report(&sess.id, 7), Err(EngineError::NotFound(_))));
}

#[test]
fn duplicate_family_keys_conflict() {
    let s = generate(&ScenarioSpec {
        n_families: 2,
        t: 20,
        ..Default::default()
    });
    let records = records_for(&s.table);
    let q = format!("{0}; {0}", crate::synth::SCENARIO_QUERY);
    assert!(matches!(build_table(&records, &q, None), Err(EngineError::Conflict(_))));
}
