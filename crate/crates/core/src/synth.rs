//! Seeded synthetic scenarios with planted causal structure.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{FamilyTable, FeatureFamily, MetricRecord, TimeIndex};
use crate::ranking::{Label, ScenarioLabels};

pub const TARGET_KEY: &str = "target";

/// Query that turns a scenario's records back into its family table.
pub const SCENARIO_QUERY: &str = "FAMILY BY name SELECT avg(value)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Planted {
    /// No dependence on the target anywhere.
    Null,
    /// Target = one feature of one family + noise.
    Univariate,
    /// Target driven jointly by `m` weak features of one family.
    JointOfM { m: usize, feature_corr: f64, joint_r2: f64 },
    /// Target = seasonal wave + spike train; one family follows the wave,
    /// another drives the spikes.
    SeasonalSpike { period: usize, amplitude: f64, spike_amplitude: f64, spike_rate: f64 },
    /// Z → target → X.
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Number of search families besides the target.
    pub n_families: usize,
    pub features_mean: usize,
    pub features_max: usize,
    pub t: usize,
    pub planted: Planted,
    /// Standard deviation of the target's own noise.
    pub noise: f64,
    /// Families that are noisy functions of the target.
    pub n_effects: usize,
    /// Correlation between an effect family's driven feature and the target.
    pub effect_corr: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n_families: 100,
            features_mean: 10,
            features_max: 40,
            t: 1440,
            planted: Planted::Univariate,
            noise: 1.0,
            n_effects: 0,
            effect_corr: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub spec: ScenarioSpec,
    pub table: FamilyTable,
    pub labels: ScenarioLabels,
    pub target: String,
    /// Closed-form population quantities of the generating model.
    pub oracle: BTreeMap<String, f64>,
}

/// Scenario description written next to its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub name: String,
    pub target: String,
    #[serde(default)]
    pub condition: Vec<String>,
    pub query: String,
    pub index: TimeIndex,
    /// Period for a seasonal pseudocause of the target, when one applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seasonal_period: Option<usize>,
    pub spec: ScenarioSpec,
    #[serde(default)]
    pub oracle: BTreeMap<String, f64>,
}

impl Scenario {
    pub fn manifest(&self) -> ScenarioManifest {
        ScenarioManifest {
            name: self.name.clone(),
            target: self.target.clone(),
            condition: Vec::new(),
            query: SCENARIO_QUERY.to_string(),
            index: self.table.index,
            seasonal_period: match self.spec.planted {
                Planted::SeasonalSpike { period, .. } => Some(period),
                _ => None,
            },
            spec: self.spec.clone(),
            oracle: self.oracle.clone(),
        }
    }

    pub fn cause(&self) -> Option<&str> {
        self.labels.causes().next()
    }

    /// One record per cell: metric = family key, tag `feature` = column id.
    pub fn to_records(&self) -> Vec<MetricRecord> {
        to_records(&self.table)
    }
}

fn feature_tag(name: &str) -> &str {
    name.rsplit_once("feature=")
        .map(|(_, rest)| rest.trim_end_matches('}'))
        .unwrap_or(name)
}

/// Flattens a table produced by this module into records.
pub fn to_records(table: &FamilyTable) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for family in table.families() {
        for (j, name) in family.feature_names.iter().enumerate() {
            let tags = BTreeMap::from([("feature".to_string(), feature_tag(name).to_string())]);
            for (slot, v) in family.matrix.column(j).iter().enumerate() {
                out.push(MetricRecord {
                    ts: table.index.ts_at(slot),
                    metric: family.key.clone(),
                    tags: tags.clone(),
                    value: *v,
                });
            }
        }
    }
    out
}

struct Gen {
    rng: ChaCha8Rng,
    t: usize,
}

impl Gen {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn noise(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.normal()).collect();
        DMatrix::from_vec(rows, cols, data)
    }

    fn series(&mut self) -> Vec<f64> {
        (0..self.t).map(|_| self.normal()).collect()
    }

    fn width(&mut self, mean: usize, max: usize) -> usize {
        let max = max.max(1);
        if mean >= max {
            return max;
        }
        if mean <= 1 {
            return 1;
        }
        let extra: f64 = Poisson::new((mean - 1) as f64).expect("positive rate").sample(&mut self.rng);
        (1 + extra as usize).min(max)
    }
}

fn family(key: &str, matrix: DMatrix<f64>) -> FeatureFamily {
    let f = matrix.ncols();
    let digits = (f.max(2) - 1).to_string().len().max(2);
    let names = (0..f).map(|j| format!("{key}{{feature=f{j:0digits$}}}")).collect();
    FeatureFamily::from_columns(key, names, matrix, "synth").expect("synthetic family is well formed")
}

fn family_key(i: usize, n: usize) -> String {
    let digits = (n.max(2) - 1).to_string().len().max(3);
    format!("fam{i:0digits$}")
}

/// Standardised copy of a series (population moments).
fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / sd).collect()
}

/// Builds the scenario described by `spec`. Every non-planted family is iid
/// standard normal noise; the planted families sit at seeded positions.
pub fn generate(spec: &ScenarioSpec) -> Scenario {
    assert!(spec.t >= 4, "scenario needs at least four time steps");
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        t: spec.t,
    };
    let t = spec.t;
    let n = spec.n_families;
    let mut widths: Vec<usize> = (0..n).map(|_| g.width(spec.features_mean, spec.features_max)).collect();
    let mut slots: Vec<usize> = (0..n).collect();
    // Seeded shuffle decides which families carry planted structure.
    for i in (1..slots.len()).rev() {
        let j = g.rng.random_range(0..=i);
        slots.swap(i, j);
    }
    let mut matrices: Vec<Option<DMatrix<f64>>> = vec![None; n];
    let mut labels = ScenarioLabels::default();
    let mut oracle = BTreeMap::new();
    let mut next_slot = slots.into_iter();
    let mut take_slot = |labels: &mut ScenarioLabels, label: Label| {
        let i = next_slot.next().expect("not enough families for the planted structure");
        if label != Label::Irrelevant {
            labels.set(family_key(i, n), label);
        }
        i
    };

    let y: Vec<f64>;
    let name;
    match &spec.planted {
        Planted::Null => {
            name = "null";
            y = g.series();
        }
        Planted::Univariate => {
            name = "planted";
            let c = take_slot(&mut labels, Label::Cause);
            let m = g.noise(t, widths[c]);
            let j = g.rng.random_range(0..widths[c]);
            y = (0..t).map(|r| m[(r, j)] + spec.noise * g.normal()).collect();
            matrices[c] = Some(m);
            oracle.insert("cause_corr".into(), 1.0 / (1.0 + spec.noise * spec.noise).sqrt());
        }
        Planted::JointOfM { m, feature_corr, joint_r2 } => {
            name = "joint";
            let (m, rho, r2) = (*m, *feature_corr, *joint_r2);
            let c = take_slot(&mut labels, Label::Cause);
            // x_i = (u_i + c·s)/√(1+c²) with a shared suppressor s also
            // observed; Y = w·Σu_i + ε. Then corr(x_i, Y) = ρ while the family
            // explains r² of Y jointly.
            let w2 = r2 / (m as f64 * (1.0 - r2));
            let c2 = r2 / (m as f64 * rho * rho) - 1.0;
            assert!(c2 >= 0.0, "feature correlation too large for the joint r²");
            let (w, cs) = (w2.sqrt(), c2.sqrt());
            let u = g.noise(t, m);
            let s = g.series();
            let mut fam = DMatrix::zeros(t, m + 1);
            for r in 0..t {
                for i in 0..m {
                    fam[(r, i)] = (u[(r, i)] + cs * s[r]) / (1.0 + c2).sqrt();
                }
                fam[(r, m)] = s[r];
            }
            y = (0..t).map(|r| w * u.row(r).sum() + g.normal()).collect();
            widths[c] = m + 1;
            matrices[c] = Some(fam);
            oracle.insert("cause_feature_corr".into(), w / ((1.0 + c2) * (m as f64 * w2 + 1.0)).sqrt());
            oracle.insert("cause_joint_r2".into(), m as f64 * w2 / (m as f64 * w2 + 1.0));
        }
        Planted::SeasonalSpike {
            period,
            amplitude,
            spike_amplitude,
            spike_rate,
        } => {
            name = "seasonal";
            let conf = take_slot(&mut labels, Label::Irrelevant);
            let cause = take_slot(&mut labels, Label::Cause);
            let wave: Vec<f64> = (0..t).map(|r| (2.0 * PI * r as f64 / *period as f64).sin()).collect();
            let bern = Bernoulli::new(spike_rate.clamp(0.0, 1.0)).expect("valid rate");
            let spikes: Vec<f64> = (0..t).map(|_| if bern.sample(&mut g.rng) { 1.0 } else { 0.0 }).collect();
            let mut cf = g.noise(t, widths[conf]);
            let jc = g.rng.random_range(0..widths[conf]);
            for r in 0..t {
                cf[(r, jc)] = wave[r] + 0.5 * cf[(r, jc)];
            }
            let mut sf = g.noise(t, widths[cause]);
            let js = g.rng.random_range(0..widths[cause]);
            for r in 0..t {
                sf[(r, js)] = spikes[r] + 0.3 * sf[(r, js)];
            }
            y = (0..t)
                .map(|r| amplitude * wave[r] + spike_amplitude * spikes[r] + spec.noise * g.normal())
                .collect();
            matrices[conf] = Some(cf);
            matrices[cause] = Some(sf);
            oracle.insert("seasonal_variance".into(), amplitude * amplitude / 2.0);
            oracle.insert("spike_variance".into(), spike_amplitude * spike_amplitude * spike_rate * (1.0 - spike_rate));
            oracle.insert("confounder_index".into(), conf as f64);
        }
        Planted::Chain => {
            name = "chain";
            let zi = take_slot(&mut labels, Label::Cause);
            let xi = take_slot(&mut labels, Label::Effect);
            let z = g.series();
            y = z.iter().map(|v| v + spec.noise * g.normal()).collect();
            let x: Vec<f64> = y.iter().map(|v| v + spec.noise * g.normal()).collect();
            widths[zi] = 1;
            widths[xi] = 1;
            matrices[zi] = Some(DMatrix::from_vec(t, 1, z));
            matrices[xi] = Some(DMatrix::from_vec(t, 1, x));
            let s2 = spec.noise * spec.noise;
            oracle.insert("zy_r2".into(), 1.0 / (1.0 + s2));
            oracle.insert("zx_r2".into(), 1.0 / (1.0 + 2.0 * s2));
            oracle.insert("zx_given_y_partial_r2".into(), 0.0);
        }
    }

    // Effects: one column driven by the standardised target.
    if spec.n_effects > 0 {
        let yu = unit(&y);
        let a = spec.effect_corr.clamp(0.0, 0.999);
        let b = (1.0 - a * a).sqrt();
        for _ in 0..spec.n_effects {
            let e = take_slot(&mut labels, Label::Effect);
            let mut m = g.noise(t, widths[e]);
            let j = g.rng.random_range(0..widths[e]);
            for r in 0..t {
                m[(r, j)] = a * yu[r] + b * m[(r, j)];
            }
            matrices[e] = Some(m);
        }
        oracle.insert("effect_corr".into(), a);
    }

    let index = TimeIndex::new(0, t as i64, 1).expect("t ≥ 1");
    let mut table = FamilyTable::new(index);
    for (i, m) in matrices.into_iter().enumerate() {
        let m = m.unwrap_or_else(|| g.noise(t, widths[i]));
        table.insert(family(&family_key(i, n), m)).expect("unique keys");
    }
    table
        .insert(family(TARGET_KEY, DMatrix::from_vec(t, 1, y)))
        .expect("target key is unique");
    Scenario {
        name: name.to_string(),
        spec: spec.clone(),
        table,
        labels,
        target: TARGET_KEY.to_string(),
        oracle,
    }
}

pub fn gen_null(spec: &ScenarioSpec) -> Scenario {
    generate(&ScenarioSpec {
        planted: Planted::Null,
        n_effects: 0,
        ..spec.clone()
    })
}

pub fn gen_planted_cause(spec: &ScenarioSpec) -> Scenario {
    generate(spec)
}

pub fn gen_seasonal_spike(spec: &ScenarioSpec) -> Scenario {
    generate(spec)
}

pub fn gen_chain(spec: &ScenarioSpec) -> Scenario {
    generate(&ScenarioSpec {
        planted: Planted::Chain,
        ..spec.clone()
    })
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = ["null", "planted", "weak", "joint", "seasonal", "chain"];

/// The labelled evaluation suite; every member has a planted cause.
pub const SUITE: [&str; 5] = ["planted", "weak", "joint", "seasonal", "chain"];

/// Desk-scale presets used by the CLI and the evaluation suite.
pub fn preset(name: &str, seed: u64) -> Option<ScenarioSpec> {
    let base = ScenarioSpec {
        seed,
        ..Default::default()
    };
    Some(match name {
        "null" => ScenarioSpec {
            planted: Planted::Null,
            ..base
        },
        "planted" => ScenarioSpec {
            n_effects: 1,
            effect_corr: 0.4,
            ..base
        },
        "weak" => ScenarioSpec {
            noise: 2.0,
            n_effects: 2,
            effect_corr: 0.35,
            ..base
        },
        "joint" => ScenarioSpec {
            planted: Planted::JointOfM {
                m: 10,
                feature_corr: 0.15,
                joint_r2: 0.6,
            },
            n_effects: 6,
            effect_corr: 0.3,
            ..base
        },
        "seasonal" => ScenarioSpec {
            planted: Planted::SeasonalSpike {
                period: 60,
                amplitude: 3.0,
                spike_amplitude: 4.0,
                spike_rate: 0.02,
            },
            noise: 0.5,
            ..base
        },
        "chain" => ScenarioSpec {
            planted: Planted::Chain,
            noise: 0.5,
            ..base
        },
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::pearson_matrix;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let a = DMatrix::from_column_slice(a.len(), 1, a);
        let b = DMatrix::from_column_slice(b.len(), 1, b);
        pearson_matrix(&a, &b)[(0, 0)]
    }

    fn col(s: &Scenario, key: &str, j: usize) -> Vec<f64> {
        s.table.get(key).unwrap().matrix.column(j).iter().copied().collect()
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = preset("planted", 3).unwrap();
        assert_eq!(generate(&spec), generate(&spec));
        let other = generate(&ScenarioSpec { seed: 4, ..spec });
        assert_ne!(other.table, generate(&preset("planted", 3).unwrap()).table);
    }

    #[test]
    fn null_has_no_causes() {
        let s = gen_null(&ScenarioSpec::default());
        assert_eq!(s.labels.causes().count(), 0);
        assert_eq!(s.table.len(), 101);
        let y = col(&s, TARGET_KEY, 0);
        let mut worst: f64 = 0.0;
        for f in s.table.families().filter(|f| f.key != TARGET_KEY) {
            for j in 0..f.width() {
                let x: Vec<f64> = f.matrix.column(j).iter().copied().collect();
                worst = worst.max(corr(&x, &y).abs());
            }
        }
        // ~1000 null pairs at T=1440: the maximum sits near 3.3/√T ≈ 0.09
        assert!(worst < 0.15, "{worst}");
    }

    #[test]
    fn univariate_plant_matches_population_correlation() {
        let s = generate(&ScenarioSpec {
            seed: 1,
            ..Default::default()
        });
        let cause = s.cause().unwrap().to_string();
        let rho = pearson_matrix(&s.table.get(&cause).unwrap().matrix, &s.table.get(TARGET_KEY).unwrap().matrix);
        let best = rho.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((best - s.oracle["cause_corr"]).abs() < 4.0 / (1440f64).sqrt());
    }

    #[test]
    fn joint_construction_population_values() {
        let spec = preset("joint", 2).unwrap();
        let s = generate(&spec);
        assert!((s.oracle["cause_feature_corr"] - 0.15).abs() < 1e-12);
        assert!((s.oracle["cause_joint_r2"] - 0.6).abs() < 1e-12);
        let cause = s.cause().unwrap().to_string();
        let fam = &s.table.get(&cause).unwrap().matrix;
        assert_eq!(fam.ncols(), 11);
        let rho = pearson_matrix(fam, &s.table.get(TARGET_KEY).unwrap().matrix);
        let mean_abs = rho.rows(0, 10).iter().map(|v| v.abs()).sum::<f64>() / 10.0;
        assert!((mean_abs - 0.15).abs() < 0.05, "{mean_abs}");
        let y = col(&s, TARGET_KEY, 0);
        let r2 = crate::stats::ols_r2(fam, &y).unwrap();
        assert!((r2 - 0.6).abs() < 0.05, "{r2}");
        assert_eq!(s.labels.0.values().filter(|l| **l == Label::Effect).count(), 6);
    }

    #[test]
    fn chain_population_values() {
        let s = gen_chain(&preset("chain", 5).unwrap());
        let z = s.cause().unwrap().to_string();
        let x = s.labels.0.iter().find(|(_, l)| **l == Label::Effect).unwrap().0.clone();
        let r = corr(&col(&s, &z, 0), &col(&s, &x, 0));
        assert!((r * r - s.oracle["zx_r2"]).abs() < 0.05);
    }

    #[test]
    fn records_reproduce_the_table() {
        let s = generate(&ScenarioSpec {
            n_families: 5,
            t: 50,
            seed: 9,
            ..Default::default()
        });
        let records = s.to_records();
        let ast = crate::query::parse_query(SCENARIO_QUERY).unwrap();
        let result = crate::query::evaluate_query(&ast, &records, &s.table.index).unwrap();
        let back = crate::query::to_family_table(&result, &s.table.index).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), s.table.keys().collect::<Vec<_>>());
        for f in s.table.families() {
            let g = back.get(&f.key).unwrap();
            assert_eq!(g.feature_names, f.feature_names);
            assert_eq!(g.matrix, f.matrix);
        }
    }

    #[test]
    fn widths_respect_bounds() {
        let s = generate(&ScenarioSpec {
            features_mean: 100,
            features_max: 100,
            n_families: 10,
            t: 20,
            ..Default::default()
        });
        assert!(s.table.families().filter(|f| f.key != TARGET_KEY).all(|f| f.width() == 100));
        let s = generate(&ScenarioSpec {
            n_families: 200,
            t: 10,
            ..Default::default()
        });
        let w: Vec<usize> = s.table.families().filter(|f| f.key != TARGET_KEY).map(|f| f.width()).collect();
        assert!(w.iter().all(|&v| (1..=40).contains(&v)));
        let mean = w.iter().sum::<usize>() as f64 / w.len() as f64;
        assert!((mean - 10.0).abs() < 1.0, "{mean}");
    }
}
