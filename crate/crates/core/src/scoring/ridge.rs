use nalgebra::{DMatrix, DVector};

use super::corr::is_constant;
use super::ScoringError;

/// Fitted regression of a `T×F_y` target on `T×F_x` predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    /// `F_x × F_y`, in the units of the original predictors.
    pub coefficients: DMatrix<f64>,
    /// Per-output intercept (zero for raw fits).
    pub intercept: DVector<f64>,
    pub predictions: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
    /// Cross-validated r² for CV fits; in-sample r² for fixed-λ fits.
    pub cv_r2: f64,
    pub chosen_lambda: f64,
}

/// Per-column z-scoring. Constant columns keep scale 1 so they map to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows().max(1) as f64;
        let mut mean = DVector::zeros(m.ncols());
        let mut scale = DVector::from_element(m.ncols(), 1.0);
        for (j, col) in m.column_iter().enumerate() {
            mean[j] = col.sum() / n;
            if is_constant(col.iter().copied()) {
                continue;
            }
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                scale[j] = var.sqrt();
            }
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, s) = (self.mean[j], self.scale[j]);
            col.apply(|v| *v = (*v - mu) / s);
        }
        out
    }
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub(crate) fn sub_row(m: &mut DMatrix<f64>, row: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(-row[j]);
    }
}

fn add_row(m: &mut DMatrix<f64>, row: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(row[j]);
    }
}

/// Solves `(XᵀX + penalty·I) β = XᵀY`, switching to the equivalent dual
/// system `β = Xᵀ(XXᵀ + penalty·I)⁻¹Y` when X is wider than tall.
pub(crate) fn solve_penalised(x: &DMatrix<f64>, y: &DMatrix<f64>, penalty: f64) -> Result<DMatrix<f64>, ScoringError> {
    let fail = || ScoringError::NumericalFailure(format!("regularised system not positive definite (penalty {penalty:e})"));
    if x.ncols() <= x.nrows() {
        let mut a = x.transpose() * x;
        for i in 0..a.nrows() {
            a[(i, i)] += penalty;
        }
        let b = x.transpose() * y;
        Ok(a.cholesky().ok_or_else(fail)?.solve(&b))
    } else {
        let mut k = x * x.transpose();
        for i in 0..k.nrows() {
            k[(i, i)] += penalty;
        }
        let alpha = k.cholesky().ok_or_else(fail)?.solve(y);
        Ok(x.transpose() * alpha)
    }
}

/// Mean over non-constant outputs of in-sample `1 − RSS/TSS`.
pub(crate) fn mean_r2(y: &DMatrix<f64>, pred: &DMatrix<f64>) -> Option<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for j in 0..y.ncols() {
        let col = y.column(j);
        if is_constant(col.iter().copied()) {
            continue;
        }
        let mean = col.mean();
        let tss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let rss: f64 = col.iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += 1.0 - rss / tss;
        used += 1;
    }
    (used > 0).then(|| total / used as f64)
}

/// Ridge fit of Y on X as given (no standardisation, no intercept), for the
/// loss `(1/T)‖Y − Xβ‖² + λ‖β‖²`.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RegressionResult, ScoringError> {
    if x.nrows() != y.nrows() {
        return Err(ScoringError::DimensionMismatch(format!("{} predictor rows vs {} target rows", x.nrows(), y.nrows())));
    }
    if !(lambda > 0.0) {
        return Err(ScoringError::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let t = x.nrows() as f64;
    let coefficients = solve_penalised(x, y, t * lambda)?;
    let predictions = x * &coefficients;
    let residuals = y - &predictions;
    Ok(RegressionResult {
        cv_r2: mean_r2(y, &predictions).unwrap_or(0.0),
        coefficients,
        intercept: DVector::zeros(y.ncols()),
        predictions,
        residuals,
        chosen_lambda: lambda,
    })
}

/// Ridge fit on z-scored predictors and centred targets, reported back in
/// original units with an intercept.
pub fn ridge_fit_standardized(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RegressionResult, ScoringError> {
    if x.nrows() != y.nrows() {
        return Err(ScoringError::DimensionMismatch(format!("{} predictor rows vs {} target rows", x.nrows(), y.nrows())));
    }
    let sx = Standardizer::fit(x);
    let xs = sx.apply(x);
    let my = column_means(y);
    let mut yc = y.clone();
    sub_row(&mut yc, &my);
    let t = x.nrows() as f64;
    let beta_s = solve_penalised(&xs, &yc, t * lambda)?;
    let mut predictions = &xs * &beta_s;
    add_row(&mut predictions, &my);
    let residuals = y - &predictions;
    let mut coefficients = beta_s;
    for (i, mut row) in coefficients.row_iter_mut().enumerate() {
        row /= sx.scale[i];
    }
    let intercept = &my - coefficients.transpose() * &sx.mean;
    Ok(RegressionResult {
        cv_r2: mean_r2(y, &predictions).unwrap_or(0.0),
        coefficients,
        intercept,
        predictions,
        residuals,
        chosen_lambda: lambda,
    })
}

/// Ordinary least squares without intercept (the λ → 0 limit), solved by SVD.
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<RegressionResult, ScoringError> {
    if x.nrows() != y.nrows() {
        return Err(ScoringError::DimensionMismatch(format!("{} predictor rows vs {} target rows", x.nrows(), y.nrows())));
    }
    let coefficients = x
        .clone()
        .svd(true, true)
        .solve(y, 1e-14)
        .map_err(|e| ScoringError::NumericalFailure(e.to_string()))?;
    let predictions = x * &coefficients;
    let residuals = y - &predictions;
    Ok(RegressionResult {
        cv_r2: mean_r2(y, &predictions).unwrap_or(0.0),
        coefficients,
        intercept: DVector::zeros(y.ncols()),
        predictions,
        residuals,
        chosen_lambda: 0.0,
    })
}
