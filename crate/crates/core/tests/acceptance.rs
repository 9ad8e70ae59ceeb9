//! Acceptance checks. Prints one PASS/FAIL line per criterion, then fails the
//! test if any criterion outside `UNATTAINABLE` did not pass.

use std::time::Instant;

use causerank_core::engine::{make_pseudocause, run_search, ForkOverrides, PseudocauseKind, Session, SessionSpec};
use causerank_core::ranking::{first_cause_rank, summarize, ScenarioOutcome};
use causerank_core::scoring::{conditional_score, cv_score, least_squares, random_project};
use causerank_core::stats::{adj_null_variance, chebyshev_pvalue, ks_pvalue, ks_statistic, ols_r2, wherry_adjust};
use causerank_core::synth::{gen_chain, generate, preset, Planted, ScenarioSpec, TARGET_KEY};
use causerank_core::{score_hypothesis, FamilyTable, FeatureFamily, Hypothesis, Method, ScoringConfig, TimeIndex};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Beta, ContinuousCDF};

/// Criteria that cannot pass as written, with the reason. They still run and
/// print FAIL; they just do not fail the test.
const UNATTAINABLE: &[(u32, &str)] = &[(
    11,
    "the published harmonic means are not consistent with the published per-scenario gains under the stated 0.001 substitution",
)];

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn session(table: &FamilyTable, method: Method, seed: u64) -> Session {
    let mut spec = SessionSpec::new("t", TARGET_KEY);
    spec.config = ScoringConfig::new(method).with_seed(seed);
    Session::open("s", spec, table).unwrap()
}

fn count(trials: &[bool]) -> usize {
    trials.iter().filter(|&&b| b).count()
}

const N: usize = 1000;
const P: usize = 500;

fn null_r2_samples() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    (0..200)
        .map(|_| {
            let x = randn(&mut rng, N, P - 1);
            let y: Vec<f64> = (0..N).map(|_| StandardNormal.sample(&mut rng)).collect();
            ols_r2(&x, &y).unwrap()
        })
        .collect()
}

fn null_beta_law(r2: &[f64]) -> Outcome {
    let m = mean(r2);
    let beta = Beta::new((P as f64 - 1.0) / 2.0, (N - P) as f64 / 2.0).unwrap();
    let d = ks_statistic(r2, |v| beta.cdf(v));
    let pv = ks_pvalue(d, r2.len());
    Outcome {
        id: 1,
        pass: (m - 0.4995).abs() <= 0.02 && pv > 0.01,
        detail: format!("mean r² {m:.4} (want 0.4995 ± 0.02), KS D {d:.4} p {pv:.3} (want > 0.01)"),
    }
}

fn wherry(r2: &[f64]) -> Outcome {
    let adj: Vec<f64> = r2.iter().map(|&v| wherry_adjust(v, N, P).unwrap()).collect();
    let m = mean(&adj);
    let v = variance(&adj);
    let theory = adj_null_variance(N, P).unwrap();
    // independent oracle: Beta(a, b) variance scaled by ((n−1)/(n−p))²
    let (a, b) = ((P as f64 - 1.0) / 2.0, (N - P) as f64 / 2.0);
    let beta_var = a * b / ((a + b).powi(2) * (a + b + 1.0));
    let oracle = beta_var * ((N as f64 - 1.0) / (N - P) as f64).powi(2);
    let rel = (v - theory).abs() / theory;
    Outcome {
        id: 2,
        pass: m.abs() <= 0.05 && rel <= 0.3 && (theory - oracle).abs() / oracle < 1e-9,
        detail: format!(
            "mean {m:.4} (want 0 ± 0.05), variance {v:.3e} vs adj_null_variance {theory:.4e} ({:.0}% off, want ≤ 30%), oracle {oracle:.4e}",
            rel * 100.0
        ),
    }
}

fn ridge_null() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = ScoringConfig::default();
    let scores: Vec<f64> = (0..100)
        .map(|_| {
            let x = randn(&mut rng, N, P);
            let y = randn(&mut rng, N, 1);
            cv_score(&x, &y, &cfg).unwrap()
        })
        .collect();
    let m = mean(&scores);
    let zeros = scores.iter().filter(|&&s| s == 0.0).count();
    Outcome {
        id: 3,
        pass: m <= 0.05,
        detail: format!("mean cv score {m:.4} (want ≤ 0.05), {zeros}/100 clamped to 0"),
    }
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let t = 200;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (nx, ny, nz) = (1 + i % 20, 1 + (i * 7) % 20, 1 + (i * 13) % 20);
        let x = randn(&mut rng, t, nx);
        let y = randn(&mut rng, t, ny);
        let z = randn(&mut rng, t, nz);
        let rx = least_squares(&z, &x).unwrap().residuals;
        let ry = least_squares(&z, &y).unwrap().residuals;
        let lhs = rx.transpose() * &ry;
        let zz_inv = (z.transpose() * &z).lu().try_inverse().unwrap();
        let rhs = x.transpose() * &y - x.transpose() * &z * zz_inv * z.transpose() * &y;
        worst = worst.max((&lhs - &rhs).norm() / rhs.norm());
    }
    Outcome {
        id: 4,
        pass: worst <= 1e-8,
        detail: format!("worst relative error {worst:.2e} over 50 instances (want ≤ 1e-8)"),
    }
}

fn conditional_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let cfg = ScoringConfig::default();
    let n = 2000;
    let mut zero = Vec::new();
    let mut partial = Vec::new();
    let mut partial_scores = Vec::new();
    for _ in 0..40 {
        let z = randn(&mut rng, n, 3);
        let a = randn(&mut rng, 3, 1);
        let b = randn(&mut rng, 3, 1);
        let ex = randn(&mut rng, n, 1);
        let x = &z * &a + &ex;
        let y = &z * &b + randn(&mut rng, n, 1);
        zero.push(conditional_score(&x, &y, Some(&z), &cfg).unwrap() <= 0.05);
        // Y keeps X's own noise: population partial r² is 1/(1+1)
        let y_dep = &z * &b + &ex + randn(&mut rng, n, 1);
        let s = conditional_score(&x, &y_dep, Some(&z), &cfg).unwrap();
        partial.push((0.35..=0.65).contains(&s));
        partial_scores.push(s);
    }
    let (cz, cp) = (count(&zero), count(&partial));
    Outcome {
        id: 5,
        pass: cz * 100 >= 95 * 40 && cp * 100 >= 90 * 40,
        detail: format!(
            "independent: {cz}/40 ≤ 0.05 (want ≥ 95%), partial r² 0.5: {cp}/40 in [0.35, 0.65] (want ≥ 90%, mean {:.3})",
            mean(&partial_scores)
        ),
    }
}

fn planted_ranking() -> Outcome {
    let mut hits = [0usize; 2];
    let methods = [Method::CorrMax, Method::L2Proj(50)];
    for seed in 0..20 {
        let s = generate(&preset("planted", 600 + seed).unwrap());
        for (i, &m) in methods.iter().enumerate() {
            let out = run_search(&session(&s.table, m, seed), &s.table, 0).unwrap();
            if first_cause_rank(&out.report.ranked, &s.labels) == Some(1) {
                hits[i] += 1;
            }
        }
    }
    Outcome {
        id: 6,
        pass: hits.iter().all(|&h| h >= 18),
        detail: format!("rank 1 in corrmax {}/20, l2-p50 {}/20 (want ≥ 18 each)", hits[0], hits[1]),
    }
}

fn joint_power() -> Outcome {
    let mut wins = 0;
    let (mut l2_hits, mut corr_misses) = (0, 0);
    for seed in 0..20 {
        let s = generate(&preset("joint", 700 + seed).unwrap());
        let top5 = |m: Method| {
            let out = run_search(&session(&s.table, m, seed), &s.table, 0).unwrap();
            first_cause_rank(&out.report.ranked, &s.labels).is_some_and(|r| r <= 5)
        };
        let (l2, corr) = (top5(Method::L2), top5(Method::CorrMax));
        l2_hits += l2 as usize;
        corr_misses += !corr as usize;
        wins += (l2 && !corr) as usize;
    }
    Outcome {
        id: 7,
        pass: wins >= 16,
        detail: format!("l2 in top 5 and corrmax not: {wins}/20 (want ≥ 16; l2 hits {l2_hits}, corrmax misses {corr_misses})"),
    }
}

fn pseudocause_lift() -> Outcome {
    let mut ok = 0;
    let mut lifted = 0;
    for seed in 0..20 {
        let s = generate(&preset("seasonal", 800 + seed).unwrap());
        let Planted::SeasonalSpike { period, .. } = s.spec.planted else {
            unreachable!("seasonal preset")
        };
        let cause = s.cause().unwrap().to_string();
        let mut parent = session(&s.table, Method::L2, seed);
        let before = run_search(&parent, &s.table, 0).unwrap().report.ranked.position(&cause);
        let pc = make_pseudocause(s.table.get(TARGET_KEY).unwrap(), PseudocauseKind::Seasonal { period }).unwrap();
        parent.pseudocauses.push(pc.clone());
        let overrides = ForkOverrides {
            condition: Some(vec![pc.key]),
            ..Default::default()
        };
        let child = parent.fork("c", overrides, &s.table).unwrap();
        let after = run_search(&child, &s.table, 0).unwrap().report.ranked.position(&cause);
        let better = match (before, after) {
            (Some(1), Some(1)) => true,
            (Some(b), Some(a)) => a < b,
            (None, Some(_)) => true,
            _ => false,
        };
        ok += better as usize;
        lifted += (better && before != Some(1)) as usize;
    }
    Outcome {
        id: 8,
        pass: ok >= 18,
        detail: format!("rank improved or kept at 1: {ok}/20 (want ≥ 18; {lifted} strict lifts)"),
    }
}

fn chain_faithfulness() -> Outcome {
    let cfg = ScoringConfig::default();
    let mut ok = 0;
    let trials = 20;
    let mut oracle = 0.0;
    for seed in 0..trials {
        let spec = ScenarioSpec {
            n_families: 10,
            ..preset("chain", 900 + seed).unwrap()
        };
        let s = gen_chain(&spec);
        oracle = s.oracle["zx_r2"];
        let key = |label| s.labels.0.iter().find(|(_, &l)| l == label).map(|(k, _)| k.clone()).unwrap();
        let z = &s.table.get(&key(causerank_core::ranking::Label::Cause)).unwrap().matrix;
        let x = &s.table.get(&key(causerank_core::ranking::Label::Effect)).unwrap().matrix;
        let y = &s.table.get(TARGET_KEY).unwrap().matrix;
        let given_y = conditional_score(z, x, Some(y), &cfg).unwrap();
        let marginal = cv_score(z, x, &cfg).unwrap();
        ok += (given_y <= 0.05 && marginal >= 0.3) as usize;
    }
    Outcome {
        id: 9,
        pass: ok * 10 >= 9 * trials as usize,
        detail: format!("score(Z, X | Y) ≤ 0.05 and score(Z, X) ≥ 0.3 in {ok}/{trials} (want ≥ 90%; marginal oracle {oracle:.3})"),
    }
}

fn chebyshev_example() -> Outcome {
    let mut worst = 0.0f64;
    for s in [0.1, 0.3, 1.0] {
        let want = 4.9e-5 / (s * s);
        let got = chebyshev_pvalue(s, 1440, 50).unwrap();
        worst = worst.max((got - want).abs() / want);
    }
    Outcome {
        id: 10,
        pass: worst <= 0.02,
        detail: format!("worst relative error {:.3}% vs 4.9e-5/s² (want ≤ 2%)", worst * 100.0),
    }
}

/// Per-scenario discounted gains as published; `None` marks a failure.
const PUBLISHED: [[Option<f64>; 5]; 11] = [
    [Some(0.167), Some(1.000), Some(0.143), Some(1.000), Some(0.333)],
    [Some(0.143), Some(0.071), None, Some(0.077), None],
    [Some(1.000), Some(1.000), Some(0.200), Some(1.000), Some(1.000)],
    [None, None, Some(0.333), Some(0.167), Some(0.333)],
    [None, Some(1.000), Some(0.100), Some(1.000), Some(0.077)],
    [None, None, Some(0.333), Some(0.167), Some(0.500)],
    [None, Some(0.111), Some(1.000), None, Some(0.200)],
    [None, Some(1.000), Some(0.250), Some(1.000), Some(1.000)],
    [Some(0.050), Some(0.053), Some(0.500), Some(0.062), Some(0.250)],
    [None, Some(0.500), Some(1.000), Some(0.333), Some(0.250)],
    [Some(0.333), Some(0.083), None, None, None],
];
const PUBLISHED_HARMONIC: [f64; 5] = [0.002, 0.004, 0.009, 0.009, 0.009];
const PUBLISHED_AVERAGE: [f64; 5] = [0.154, 0.438, 0.351, 0.437, 0.359];

fn published_summary() -> Outcome {
    let mut avg_ok = true;
    let mut harm_ok = true;
    let mut got_avg = Vec::new();
    let mut got_harm = Vec::new();
    for col in 0..5 {
        let outcomes: Vec<ScenarioOutcome> = PUBLISHED
            .iter()
            .map(|row| ScenarioOutcome::from_gain(row[col].unwrap_or(0.0)))
            .collect();
        let s = summarize(&outcomes);
        // oracle: direct arithmetic over the column
        let direct_avg = PUBLISHED.iter().map(|r| r[col].unwrap_or(0.0)).sum::<f64>() / 11.0;
        let direct_harm = 11.0 / PUBLISHED.iter().map(|r| 1.0 / r[col].unwrap_or(0.001)).sum::<f64>();
        assert!((s.mean_gain - direct_avg).abs() < 1e-12 && (s.harmonic_gain - direct_harm).abs() < 1e-12);
        avg_ok &= (s.mean_gain - PUBLISHED_AVERAGE[col]).abs() <= 0.001;
        harm_ok &= (s.harmonic_gain - PUBLISHED_HARMONIC[col]).abs() <= 0.001;
        got_avg.push(format!("{:.4}", s.mean_gain));
        got_harm.push(format!("{:.4}", s.harmonic_gain));
    }
    Outcome {
        id: 11,
        pass: avg_ok && harm_ok,
        detail: format!(
            "averages [{}] {} vs published; harmonic means [{}] {} vs published {PUBLISHED_HARMONIC:?}",
            got_avg.join(", "),
            if avg_ok { "match" } else { "differ" },
            got_harm.join(", "),
            if harm_ok { "match" } else { "differ" },
        ),
    }
}

fn projection_stability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let (t, f, k) = (1440, 10_000, 5);
    let latent = randn(&mut rng, t, k);
    let loadings = randn(&mut rng, k, f);
    let wide = &latent * &loadings + randn(&mut rng, t, f) * 0.5;
    let y = &latent * randn(&mut rng, k, 1) + randn(&mut rng, t, 1);
    let names = (0..f).map(|j| format!("wide{{feature=f{j:05}}}")).collect();
    let idx = TimeIndex::new(0, t as i64, 1).unwrap();
    let table = FamilyTable::from_families(
        idx,
        [
            FeatureFamily::from_columns("wide", names, wide, "acceptance").unwrap(),
            FeatureFamily::from_columns("y", vec!["y".into()], y, "acceptance").unwrap(),
        ],
    )
    .unwrap();
    let h = Hypothesis::new("wide", "y", vec![]);
    let scores: Vec<f64> = (0..3)
        .map(|seed| {
            let cfg = ScoringConfig::new(Method::L2Proj(50)).with_seed(seed);
            score_hypothesis(&h, &table, &cfg).unwrap().score
        })
        .collect();
    let spread = scores.iter().cloned().fold(f64::MIN, f64::max) - scores.iter().cloned().fold(f64::MAX, f64::min);
    let m = &table.get("wide").unwrap().matrix;
    let same = random_project(m, 50, 7).into_owned() == random_project(m, 50, 7).into_owned();
    let differs = random_project(m, 50, 7).into_owned() != random_project(m, 50, 8).into_owned();
    Outcome {
        id: 12,
        pass: spread < 0.05 && same && differs,
        detail: format!(
            "scores {scores:.4?} spread {spread:.4} (want < 0.05), projection deterministic {same}, seed-sensitive {differs}"
        ),
    }
}

fn parallel_determinism() -> Outcome {
    let mut identical = true;
    for (name, method) in [("planted", Method::L2Proj(50)), ("joint", Method::L2), ("seasonal", Method::CorrMax)] {
        let s = generate(&preset(name, 1300).unwrap());
        let sess = session(&s.table, method, 13);
        let serial = serde_json::to_string(&run_search(&sess, &s.table, 1).unwrap().report).unwrap();
        let parallel = serde_json::to_string(&run_search(&sess, &s.table, 8).unwrap().report).unwrap();
        let again = serde_json::to_string(&run_search(&sess, &s.table, 8).unwrap().report).unwrap();
        identical &= serial == parallel && parallel == again;
    }
    Outcome {
        id: 13,
        pass: identical,
        detail: format!("serial vs 8-way reports byte-identical on 3 scenarios: {identical}"),
    }
}

fn throughput() -> Outcome {
    let spec = ScenarioSpec {
        n_families: 1000,
        features_mean: 100,
        features_max: 100,
        t: 1440,
        seed: 1400,
        ..Default::default()
    };
    let s = generate(&spec);
    let started = Instant::now();
    let out = run_search(&session(&s.table, Method::L2Proj(50), 14), &s.table, 0).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    Outcome {
        id: 14,
        pass: secs < 600.0 && out.report.scored.len() == 1000,
        detail: format!(
            "scored {} families of 100 features × 1440 in {secs:.1}s on {cores} core(s) (want < 600s)",
            out.report.scored.len()
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let mut timed = |f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = f();
        let line = format!(
            "criterion {:>2}: {} {} [{:.1}s]",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
        println!("{line}");
        outcomes.push(o);
    };
    let mut r2 = Vec::new();
    timed(&mut || {
        r2 = null_r2_samples();
        null_beta_law(&r2)
    });
    timed(&mut || wherry(&r2));
    timed(&mut ridge_null);
    timed(&mut residual_identity);
    timed(&mut conditional_independence);
    timed(&mut planted_ranking);
    timed(&mut joint_power);
    timed(&mut pseudocause_lift);
    timed(&mut chain_faithfulness);
    timed(&mut chebyshev_example);
    timed(&mut published_summary);
    timed(&mut projection_stability);
    timed(&mut parallel_determinism);
    timed(&mut throughput);

    let mut unexpected = Vec::new();
    for o in &outcomes {
        match UNATTAINABLE.iter().find(|(id, _)| *id == o.id) {
            Some((id, why)) if !o.pass => println!("criterion {id:>2}: known unattainable: {why}"),
            _ if !o.pass => unexpected.push(o.id),
            _ => {}
        }
    }
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
