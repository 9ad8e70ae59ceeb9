use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::model::FeatureFamily;
use crate::seed::fnv1a;

/// How a pseudocause is derived from its source series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PseudocauseKind {
    /// Mean value per phase of `period` grid steps, tiled over the range.
    Seasonal { period: usize },
    /// Centered moving average over `window` grid steps.
    Trend { window: usize },
    /// A user-supplied series of the session's length.
    CustomSeries { values: Vec<f64> },
}

/// A conditioning series derived from a family, usually the target itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pseudocause {
    pub key: String,
    pub source: String,
    #[serde(flatten)]
    pub kind: PseudocauseKind,
    pub series: Vec<f64>,
}

impl PseudocauseKind {
    fn label(&self) -> String {
        match self {
            PseudocauseKind::Seasonal { period } => format!("seasonal({period})"),
            PseudocauseKind::Trend { window } => format!("trend({window})"),
            PseudocauseKind::CustomSeries { values } => {
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                format!("custom-series({:08x})", fnv1a(&bytes) as u32)
            }
        }
    }
}

impl Pseudocause {
    /// Single-column family whose only metric is the pseudocause key, so it
    /// never overlaps the family it was derived from.
    pub fn to_family(&self) -> FeatureFamily {
        let t = self.series.len();
        FeatureFamily::from_columns(
            self.key.clone(),
            vec![self.key.clone()],
            DMatrix::from_column_slice(t, 1, &self.series),
            "pseudocause",
        )
        .expect("pseudocause series is finite and non-empty")
    }
}

pub fn seasonal_profile(y: &[f64], period: usize) -> Result<Vec<f64>, EngineError> {
    let t = y.len();
    if period < 2 || period > t / 2 {
        return Err(EngineError::BadPeriod { period, len: t });
    }
    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for (i, v) in y.iter().enumerate() {
        sums[i % period] += v;
        counts[i % period] += 1;
    }
    let profile: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Ok((0..t).map(|i| profile[i % period]).collect())
}

/// Centered moving average; the window is truncated at the series ends.
pub fn moving_average(y: &[f64], window: usize) -> Result<Vec<f64>, EngineError> {
    let t = y.len();
    if window < 1 || window > t {
        return Err(EngineError::BadPeriod { period: window, len: t });
    }
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    let mut prefix = vec![0.0; t + 1];
    for i in 0..t {
        prefix[i + 1] = prefix[i] + y[i];
    }
    Ok((0..t)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(t);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect())
}

/// Derives a pseudocause from the first column of `family`.
pub fn make_pseudocause(family: &FeatureFamily, kind: PseudocauseKind) -> Result<Pseudocause, EngineError> {
    let y: Vec<f64> = family.matrix.column(0).iter().copied().collect();
    let series = match &kind {
        PseudocauseKind::Seasonal { period } => seasonal_profile(&y, *period)?,
        PseudocauseKind::Trend { window } => moving_average(&y, *window)?,
        PseudocauseKind::CustomSeries { values: series } => {
            if series.len() != y.len() {
                return Err(EngineError::BadRequest(format!(
                    "custom series has {} points, the session range has {}",
                    series.len(),
                    y.len()
                )));
            }
            if series.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::BadRequest("custom series contains non-finite values".into()));
            }
            series.clone()
        }
    };
    Ok(Pseudocause {
        key: format!("pseudocause:{}{{{}}}", kind.label(), family.key),
        source: family.key.clone(),
        kind,
        series,
    })
}
