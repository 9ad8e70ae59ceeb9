use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::corr::is_constant;
use super::ridge::{column_means, ridge_fit_standardized, sub_row, RegressionResult};
use super::{ScoringConfig, ScoringError};

/// Number of folds actually used for `t` rows: the configured count, reduced
/// for short series so that every fold keeps at least two rows.
pub fn effective_folds(t: usize, k: usize) -> usize {
    k.min((t / 2).max(2))
}

/// Splits `0..t` into `k` contiguous blocks whose sizes differ by at most one.
pub fn fold_partition(t: usize, k: usize) -> Result<Vec<Range<usize>>, ScoringError> {
    if t < 4 {
        return Err(ScoringError::InsufficientData { rows: t, needed: 4 });
    }
    let k = effective_folds(t, k.max(2));
    let (base, extra) = (t / k, t % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

fn check_shapes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(), ScoringError> {
    if x.nrows() != y.nrows() {
        return Err(ScoringError::DimensionMismatch(format!("{} predictor rows vs {} target rows", x.nrows(), y.nrows())));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(ScoringError::DimensionMismatch("empty predictor or target matrix".into()));
    }
    if y.column_iter().all(|c| is_constant(c.iter().copied())) {
        return Err(ScoringError::DegenerateTarget);
    }
    Ok(())
}

fn rows_except(m: &DMatrix<f64>, r: &Range<usize>) -> DMatrix<f64> {
    m.clone().remove_rows(r.start, r.len())
}

/// Validation r² of one fold, averaged over the outputs that vary on the
/// validation block.
struct FoldScorer {
    /// Output columns (of the validation block) that carry variance.
    used: Vec<usize>,
    tss: Vec<f64>,
}

impl FoldScorer {
    fn new(yv: &DMatrix<f64>) -> Self {
        let mut used = Vec::new();
        let mut tss = Vec::new();
        for (j, col) in yv.column_iter().enumerate() {
            if is_constant(col.iter().copied()) {
                continue;
            }
            let m = col.mean();
            used.push(j);
            tss.push(col.iter().map(|v| (v - m).powi(2)).sum());
        }
        FoldScorer { used, tss }
    }

    fn r2(&self, yv: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for (&j, &tss) in self.used.iter().zip(&self.tss) {
            let rss: f64 = yv.column(j).iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            total += 1.0 - rss / tss;
        }
        total / self.used.len() as f64
    }
}

/// Mean validation r² over folds for each λ of the grid (unclamped).
/// Predictors are z-scored and targets centred with training-fold statistics.
pub fn cv_curve(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &ScoringConfig) -> Result<Vec<f64>, ScoringError> {
    check_shapes(x, y)?;
    let t = x.nrows();
    let folds = fold_partition(t, config.k_folds)?;
    let grid = &config.lambda_grid;
    let f = x.ncols();

    // Global centring is invisible to the per-fold standardisation but keeps
    // the Gram-update arithmetic below well conditioned.
    let mut xc = x.clone();
    sub_row(&mut xc, &column_means(x));
    let mut yc = y.clone();
    sub_row(&mut yc, &column_means(y));

    let primal_everywhere = folds.iter().all(|r| f <= t - r.len());
    let full = primal_everywhere.then(|| {
        let g = xc.transpose() * &xc;
        let c = xc.transpose() * &yc;
        let var: Vec<f64> = (0..f).map(|j| g[(j, j)] / t as f64).collect();
        (g, c, column_sums(&xc), column_sums(&yc), var)
    });

    let mut sums = vec![0.0; grid.len()];
    let mut counted = 0usize;
    for r in &folds {
        let yv = yc.rows(r.start, r.len()).into_owned();
        let scorer = FoldScorer::new(&yv);
        if scorer.used.is_empty() {
            continue;
        }
        let xv = xc.rows(r.start, r.len()).into_owned();
        let n = (t - r.len()) as f64;
        let preds = match &full {
            Some((g, c, sx, sy, var)) => {
                // Training Gram as full minus validation block, then centred
                // and scaled with the training means and deviations.
                let mut gc = g - xv.transpose() * &xv;
                let mut cc = c - xv.transpose() * &yv;
                let mx = (sx - column_sums(&xv)) / n;
                let my = (sy - column_sums(&yv)) / n;
                gc -= &mx * mx.transpose() * n;
                cc -= &mx * my.transpose() * n;
                let scale: Vec<f64> = (0..f)
                    .map(|j| {
                        let v = gc[(j, j)] / n;
                        if var[j] > 0.0 && v > 1e-12 * var[j] {
                            v.sqrt()
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect();
                for i in 0..f {
                    for j in 0..f {
                        gc[(i, j)] /= scale[i] * scale[j];
                    }
                    for j in 0..cc.ncols() {
                        cc[(i, j)] /= scale[i];
                    }
                }
                let mut xs = xv.clone();
                for (j, mut col) in xs.column_iter_mut().enumerate() {
                    let (mu, s) = (mx[j], scale[j]);
                    col.apply(|v| *v = (*v - mu) / s);
                }
                grid.iter()
                    .map(|&lam| {
                        let mut a = gc.clone();
                        for i in 0..f {
                            a[(i, i)] += n * lam;
                        }
                        let chol = a.cholesky().ok_or_else(|| {
                            ScoringError::NumericalFailure(format!("fold system not positive definite at lambda {lam:e}"))
                        })?;
                        let mut p = &xs * chol.solve(&cc);
                        add_row(&mut p, &my);
                        Ok(p)
                    })
                    .collect::<Result<Vec<_>, ScoringError>>()?
            }
            None => {
                let xtr = rows_except(&xc, r);
                let ytr = rows_except(&yc, r);
                let sx = super::ridge::Standardizer::fit(&xtr);
                let xs_tr = sx.apply(&xtr);
                let xs_v = sx.apply(&xv);
                let my = column_means(&ytr);
                let mut ytr_c = ytr;
                sub_row(&mut ytr_c, &my);
                let (k, kv) = if f <= xtr.nrows() {
                    (None, None)
                } else {
                    (Some(&xs_tr * xs_tr.transpose()), Some(&xs_v * xs_tr.transpose()))
                };
                grid.iter()
                    .map(|&lam| {
                        let mut p = match (&k, &kv) {
                            (Some(k), Some(kv)) => {
                                let mut a = k.clone();
                                for i in 0..a.nrows() {
                                    a[(i, i)] += n * lam;
                                }
                                let chol = a.cholesky().ok_or_else(|| {
                                    ScoringError::NumericalFailure(format!("fold system not positive definite at lambda {lam:e}"))
                                })?;
                                kv * chol.solve(&ytr_c)
                            }
                            _ => &xs_v * super::ridge::solve_penalised(&xs_tr, &ytr_c, n * lam)?,
                        };
                        add_row(&mut p, &my);
                        Ok(p)
                    })
                    .collect::<Result<Vec<_>, ScoringError>>()?
            }
        };
        for (s, p) in sums.iter_mut().zip(&preds) {
            *s += scorer.r2(&yv, p);
        }
        counted += 1;
    }
    if counted == 0 {
        return Ok(vec![0.0; grid.len()]);
    }
    Ok(sums.into_iter().map(|s| s / counted as f64).collect())
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn add_row(m: &mut DMatrix<f64>, row: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(row[j]);
    }
}

/// Best λ of the grid and its clamped CV score. Ties go to the smaller λ.
pub fn cv_select(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &ScoringConfig) -> Result<(f64, f64), ScoringError> {
    let curve = cv_curve(x, y, config)?;
    let mut best = 0;
    for (i, v) in curve.iter().enumerate() {
        if *v > curve[best] {
            best = i;
        }
    }
    let score = if curve[best].is_finite() { curve[best].clamp(0.0, 1.0) } else { 0.0 };
    Ok((config.lambda_grid[best], score))
}

/// Cross-validated ridge r² of Y on X, in [0, 1].
pub fn cv_score(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &ScoringConfig) -> Result<f64, ScoringError> {
    cv_select(x, y, config).map(|(_, s)| s)
}

/// Selects λ by cross-validation, then refits on all rows.
pub fn ridge_cv(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &ScoringConfig) -> Result<RegressionResult, ScoringError> {
    let (lambda, score) = cv_select(x, y, config)?;
    let mut fit = ridge_fit_standardized(x, y, lambda)?;
    fit.cv_r2 = score;
    Ok(fit)
}
