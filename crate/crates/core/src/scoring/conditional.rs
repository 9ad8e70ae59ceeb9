use std::borrow::Cow;

use nalgebra::DMatrix;

use super::corr::is_constant;
use super::cv::{cv_select, ridge_cv};
use super::ridge::ridge_fit_standardized;
use super::{ScoringConfig, ScoringError};
use crate::model::PlotData;

/// Conditional score together with what the diagnostic plot needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOutcome {
    pub score: f64,
    /// λ chosen for the final residual-on-residual regression.
    pub lambda: Option<f64>,
    pub plot: PlotData,
}

fn all_constant(m: &DMatrix<f64>) -> bool {
    m.column_iter().all(|c| is_constant(c.iter().copied()))
}

/// Removes from `m` what `z` explains, via a cross-validated ridge fit.
/// Returns `m` itself when there is nothing to condition on.
pub fn residualize<'a>(
    m: &'a DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
    config: &ScoringConfig,
) -> Result<Cow<'a, DMatrix<f64>>, ScoringError> {
    match z {
        Some(z) if z.ncols() > 0 => {
            if all_constant(m) {
                return Ok(Cow::Owned(DMatrix::zeros(m.nrows(), m.ncols())));
            }
            Ok(Cow::Owned(ridge_cv(z, m, config)?.residuals))
        }
        _ => Ok(Cow::Borrowed(m)),
    }
}

/// Cross-validated r² of Y on X after removing Z from both; equal to the
/// plain CV score when Z is absent.
pub fn conditional_score(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
    config: &ScoringConfig,
) -> Result<f64, ScoringError> {
    conditional_outcome(x, y, z, config).map(|o| o.score)
}

pub fn conditional_outcome(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
    config: &ScoringConfig,
) -> Result<ConditionalOutcome, ScoringError> {
    if x.nrows() != y.nrows() || z.is_some_and(|z| z.nrows() != y.nrows()) {
        return Err(ScoringError::DimensionMismatch("families cover different time ranges".into()));
    }
    if all_constant(y) {
        return Err(ScoringError::DegenerateTarget);
    }
    let ry = residualize(y, z, config)?;
    let observed: Vec<f64> = ry.column(0).iter().copied().collect();
    let flat = |observed: Vec<f64>| {
        let mean = observed.iter().sum::<f64>() / observed.len().max(1) as f64;
        ConditionalOutcome {
            score: 0.0,
            lambda: None,
            plot: PlotData {
                predicted: vec![mean; observed.len()],
                observed,
            },
        }
    };
    // Z explains the target completely, or X carries no variation at all.
    if all_constant(&ry) || all_constant(x) {
        return Ok(flat(observed));
    }
    let rx = residualize(x, z, config)?;
    if all_constant(&rx) {
        return Ok(flat(observed));
    }
    let (lambda, score) = cv_select(&rx, &ry, config)?;
    let fit = ridge_fit_standardized(&rx, &ry, lambda)?;
    Ok(ConditionalOutcome {
        score,
        lambda: Some(lambda),
        plot: PlotData {
            observed,
            predicted: fit.predictions.column(0).iter().copied().collect(),
        },
    })
}
