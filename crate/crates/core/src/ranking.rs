//! Ranking of scored hypotheses and the evaluation metrics used to compare
//! scoring methods over labelled scenarios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Hypothesis, Method, ScoreReport};
use crate::scoring::ScoringConfig;

pub const DEFAULT_TOP_K: usize = 20;

/// Substitute gain for failures inside harmonic means.
pub const FAILURE_GAIN: f64 = 0.001;

/// Cutoffs reported by [`summarize`].
pub const SUCCESS_CUTOFFS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedReport {
    pub k: usize,
    /// Sorted by score descending, ties by family key ascending.
    pub entries: Vec<ScoreReport>,
}

fn order(a: &ScoreReport, b: &ScoreReport) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.family().cmp(b.family()))
}

/// Sorts reports by decreasing score (ties by family key) and keeps the top `k`.
pub fn rank(mut reports: Vec<ScoreReport>, k: usize) -> RankedReport {
    reports.sort_by(order);
    reports.truncate(k);
    RankedReport { k, entries: reports }
}

impl RankedReport {
    /// 1-based rank of a family within the cutoff.
    pub fn position(&self, family: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.family() == family).map(|i| i + 1)
    }

    pub fn families(&self) -> Vec<&str> {
        self.entries.iter().map(ScoreReport::family).collect()
    }

    /// One JSON object per line, in rank order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("score reports serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, k: usize) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(RankedReport { k, entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Cause,
    Effect,
    Irrelevant,
}

/// Family key → label; unlisted families are irrelevant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScenarioLabels(pub BTreeMap<String, Label>);

impl ScenarioLabels {
    pub fn label(&self, family: &str) -> Label {
        self.0.get(family).copied().unwrap_or(Label::Irrelevant)
    }

    pub fn set(&mut self, family: impl Into<String>, label: Label) {
        self.0.insert(family.into(), label);
    }

    pub fn causes(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter(|(_, l)| **l == Label::Cause).map(|(k, _)| k.as_str())
    }
}

/// Rank discount applied to the first cause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discount {
    /// `1/r`.
    #[default]
    Reciprocal,
    /// `1/log₂(1 + r)`, which also gives 1 at rank 1.
    Log,
}

impl Discount {
    pub fn gain(self, rank: usize) -> f64 {
        match self {
            Discount::Reciprocal => 1.0 / rank as f64,
            Discount::Log => 1.0 / (1.0 + rank as f64).log2(),
        }
    }
}

/// 1-based rank of the first cause within the cutoff.
pub fn first_cause_rank(ranked: &RankedReport, labels: &ScenarioLabels) -> Option<usize> {
    ranked
        .entries
        .iter()
        .take(ranked.k)
        .position(|e| labels.label(e.family()) == Label::Cause)
        .map(|i| i + 1)
}

/// `1/r` for the first cause within the cutoff, 0 when there is none.
pub fn discounted_gain(ranked: &RankedReport, labels: &ScenarioLabels) -> f64 {
    discounted_gain_with(ranked, labels, Discount::Reciprocal)
}

pub fn discounted_gain_with(ranked: &RankedReport, labels: &ScenarioLabels, discount: Discount) -> f64 {
    first_cause_rank(ranked, labels).map_or(0.0, |r| discount.gain(r))
}

/// 1 when a cause appears in the top `k`, else 0.
pub fn success_at_k(ranked: &RankedReport, labels: &ScenarioLabels, k: usize) -> u8 {
    u8::from(first_cause_rank(ranked, labels).is_some_and(|r| r <= k))
}

/// Result of one method on one labelled scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    /// Rank of the first cause, `None` for a failure.
    pub rank: Option<usize>,
    pub gain: f64,
}

impl ScenarioOutcome {
    pub fn from_rank(rank: Option<usize>) -> Self {
        ScenarioOutcome {
            rank,
            gain: rank.map_or(0.0, |r| Discount::Reciprocal.gain(r)),
        }
    }

    /// Recovers the rank from a published `1/r` gain (0 = failure).
    pub fn from_gain(gain: f64) -> Self {
        let rank = (gain > 0.0).then(|| (1.0 / gain).round() as usize);
        ScenarioOutcome { rank, gain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenarios: usize,
    pub failures: usize,
    pub mean_gain: f64,
    /// Failures enter as [`FAILURE_GAIN`].
    pub harmonic_gain: f64,
    /// Sample standard deviation, failures counted as 0.
    pub stdev_gain: f64,
    /// Cutoff → fraction of scenarios with a cause in the top k.
    pub success: BTreeMap<usize, f64>,
}

pub fn summarize(outcomes: &[ScenarioOutcome]) -> Summary {
    let n = outcomes.len();
    let nf = n.max(1) as f64;
    let mean = outcomes.iter().map(|o| o.gain).sum::<f64>() / nf;
    let harmonic = if n == 0 {
        0.0
    } else {
        nf / outcomes.iter().map(|o| 1.0 / o.gain.max(FAILURE_GAIN)).sum::<f64>()
    };
    let stdev = if n < 2 {
        0.0
    } else {
        (outcomes.iter().map(|o| (o.gain - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    };
    let success = SUCCESS_CUTOFFS
        .iter()
        .map(|&k| (k, outcomes.iter().filter(|o| o.rank.is_some_and(|r| r <= k)).count() as f64 / nf))
        .collect();
    Summary {
        scenarios: n,
        failures: outcomes.iter().filter(|o| o.rank.is_none()).count(),
        mean_gain: mean,
        harmonic_gain: harmonic,
        stdev_gain: stdev,
        success,
    }
}

/// Family widths and series length needed to cost a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypothesisDims {
    pub n_x: usize,
    pub n_y: usize,
    /// Total width of the conditioning families.
    pub n_z: usize,
    pub t: usize,
}

impl HypothesisDims {
    pub fn of(h: &Hypothesis, table: &crate::model::FamilyTable) -> Result<Self, crate::model::ModelError> {
        let mut n_z = 0;
        for z in &h.z {
            n_z += table.get(z)?.width();
        }
        Ok(HypothesisDims {
            n_x: table.get(&h.x)?.width(),
            n_y: table.get(&h.y)?.width(),
            n_z,
            t: table.index.len(),
        })
    }
}

/// Cost of regressing a width-`n_b` block on a width-`n_a` block over `t`
/// rows: the cheaper of the primal and dual solves.
fn regression_cost(n_a: usize, n_b: usize, t: usize) -> f64 {
    let (a, b, t) = (n_a as f64, n_b as f64, t as f64);
    b * (t * a * a).min(t * t * a)
}

/// Asymptotic CPU cost of scoring one hypothesis, in abstract units.
pub fn estimate_cost(dims: HypothesisDims, config: &ScoringConfig) -> f64 {
    let HypothesisDims { n_x, n_y, n_z, t } = dims;
    let kl = (config.k_folds * config.lambda_grid.len()) as f64;
    match config.method {
        Method::CorrMean | Method::CorrMax => (n_x * n_y * t) as f64,
        Method::L2 => kl * (regression_cost(n_x, n_y, t) + regression_cost(n_y, n_z, t) + regression_cost(n_z, n_x, t)),
        Method::L2Proj(d) => kl * (t * d) as f64 * (n_x + n_y + n_z + d) as f64,
    }
}
