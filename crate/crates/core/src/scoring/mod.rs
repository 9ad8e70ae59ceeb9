//! Hypothesis scoring: univariate correlation summaries, cross-validated
//! ridge r², conditioning by residual regression, and random projections.

mod conditional;
mod corr;
mod cv;
mod projection;
mod ridge;

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conditional::{conditional_outcome, conditional_score, residualize, ConditionalOutcome};
pub use corr::{corr_max, corr_max_of, corr_mean, corr_mean_of, pearson_matrix};
pub use cv::{cv_curve, cv_score, cv_select, effective_folds, fold_partition, ridge_cv};
pub use projection::{projection_matrix, random_project};
pub use ridge::{least_squares, ridge_fit, ridge_fit_standardized, RegressionResult, Standardizer};

use crate::model::{validate_hypothesis, Diagnostics, FamilyTable, Hypothesis, Method, ModelError, PlotData, ScoreReport};
use crate::seed::{family_seed, mix};
use crate::stats::score_pvalue;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("target has no variance")]
    DegenerateTarget,
    #[error("insufficient data: {rows} rows, need at least {needed}")]
    InsufficientData { rows: usize, needed: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Five points spaced geometrically over `[1e-3, 1e6]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..5).map(|i| 10f64.powf(-3.0 + 9.0 * i as f64 / 4.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub method: Method,
    pub k_folds: usize,
    pub lambda_grid: Vec<f64>,
    /// Independent projections averaged by projection methods.
    pub proj_samples: usize,
    pub seed: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            method: Method::L2,
            k_folds: 5,
            lambda_grid: default_lambda_grid(),
            proj_samples: 3,
            seed: 0,
        }
    }
}

impl ScoringConfig {
    pub fn new(method: Method) -> Self {
        ScoringConfig {
            method,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn proj_dim(&self) -> Option<usize> {
        match self.method {
            Method::L2Proj(d) => Some(d),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<(), ScoringError> {
        let bad = |m: String| Err(ScoringError::InvalidConfig(m));
        if self.k_folds < 2 {
            return bad(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda grid is empty".into());
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("lambda grid values must be finite and positive".into());
        }
        if self.lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lambda grid must be strictly ascending".into());
        }
        if self.proj_dim() == Some(0) {
            return bad("projection dimension must be at least 1".into());
        }
        if self.proj_samples == 0 {
            return bad("proj_samples must be at least 1".into());
        }
        Ok(())
    }
}

/// Method-level result before it is attached to a hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub p_value: f64,
    pub plot: PlotData,
    pub diagnostics: Diagnostics,
}

fn univariate(x: &DMatrix<f64>, y: &DMatrix<f64>, z: Option<&DMatrix<f64>>, config: &ScoringConfig) -> Result<Scored, ScoringError> {
    if y.column_iter().all(|c| corr::is_constant(c.iter().copied())) {
        return Err(ScoringError::DegenerateTarget);
    }
    let ry = residualize(y, z, config)?;
    let rx = residualize(x, z, config)?;
    let rho = pearson_matrix(&rx, &ry);
    let (score, pairs) = match config.method {
        Method::CorrMean => (corr_mean_of(&rho), 1.0),
        _ => (corr_max_of(&rho), rho.len() as f64),
    };
    // Plot the target against a least-squares line through its most
    // correlated candidate feature.
    let observed: Vec<f64> = ry.column(0).iter().copied().collect();
    let best = (0..rho.nrows()).max_by(|&a, &b| rho[(a, 0)].abs().total_cmp(&rho[(b, 0)].abs()).then(b.cmp(&a)));
    let n = observed.len() as f64;
    let my = observed.iter().sum::<f64>() / n;
    let predicted = match best {
        Some(i) if rho[(i, 0)] != 0.0 => {
            let col = rx.column(i);
            let mx = col.mean();
            let sxx: f64 = col.iter().map(|v| (v - mx).powi(2)).sum();
            let sxy: f64 = col.iter().zip(&observed).map(|(a, b)| (a - mx) * (b - my)).sum();
            let b = sxy / sxx;
            col.iter().map(|v| my + b * (v - mx)).collect()
        }
        _ => vec![my; observed.len()],
    };
    let t = x.nrows();
    let (p, valid) = score_pvalue(score * score, t, 2);
    Ok(Scored {
        score,
        p_value: (p * pairs).min(1.0),
        plot: PlotData { observed, predicted },
        diagnostics: Diagnostics {
            n: t,
            p: 2,
            p_value_valid: valid,
            chosen_lambda: None,
            sample_scores: Vec::new(),
        },
    })
}

/// Scores already-stacked matrices. `seed` drives the projection draws.
pub fn score_matrices(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
    config: &ScoringConfig,
    seed: u64,
) -> Result<Scored, ScoringError> {
    config.check()?;
    if x.nrows() < 4 {
        return Err(ScoringError::InsufficientData { rows: x.nrows(), needed: 4 });
    }
    let t = x.nrows();
    match config.method {
        Method::CorrMean | Method::CorrMax => univariate(x, y, z, config),
        Method::L2 => {
            let out = conditional_outcome(x, y, z, config)?;
            let p = x.ncols().max(2);
            let (p_value, valid) = score_pvalue(out.score, t, p);
            Ok(Scored {
                score: out.score,
                p_value,
                plot: out.plot,
                diagnostics: Diagnostics {
                    n: t,
                    p,
                    p_value_valid: valid,
                    chosen_lambda: out.lambda,
                    sample_scores: Vec::new(),
                },
            })
        }
        Method::L2Proj(d) => {
            let mut scores = Vec::with_capacity(config.proj_samples);
            let mut last = None;
            for s in 0..config.proj_samples {
                let sample_seed = mix(seed, s as u64);
                let xp = random_project(x, d, mix(sample_seed, 0));
                let yp = random_project(y, d, mix(sample_seed, 1));
                let zp = z.map(|z| random_project(z, d, mix(sample_seed, 2)));
                let out = conditional_outcome(&xp, &yp, zp.as_deref(), config)?;
                scores.push(out.score);
                last = Some(out);
            }
            let out = last.expect("proj_samples checked positive");
            let score = scores.iter().sum::<f64>() / scores.len() as f64;
            let p = x.ncols().min(d).max(2);
            let (p_value, valid) = score_pvalue(score, t, p);
            Ok(Scored {
                score,
                p_value,
                plot: out.plot,
                diagnostics: Diagnostics {
                    n: t,
                    p,
                    p_value_valid: valid,
                    chosen_lambda: out.lambda,
                    sample_scores: scores,
                },
            })
        }
    }
}

/// Validates the hypothesis, stacks its families and scores it. The
/// projection seed is derived from the master seed and the candidate key.
pub fn score_hypothesis(h: &Hypothesis, table: &FamilyTable, config: &ScoringConfig) -> Result<ScoreReport, ScoringError> {
    let started = Instant::now();
    validate_hypothesis(h, table)?;
    let x = &table.get(&h.x)?.matrix;
    let y = &table.get(&h.y)?.matrix;
    let z = table.stack(&h.z)?;
    let scored = score_matrices(x, y, z.as_ref(), config, family_seed(config.seed, &h.x))?;
    Ok(ScoreReport {
        hypothesis: h.clone(),
        score: scored.score,
        method: config.method,
        p_value: scored.p_value,
        plot: Some(scored.plot),
        diagnostics: scored.diagnostics,
        timing_ms: started.elapsed().as_millis() as u64,
    })
}
