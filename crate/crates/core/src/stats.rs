//! Null distribution of r² under independence, its Wherry adjustment,
//! Chebyshev p-values, multiple-testing control and ridge degrees of freedom.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    DomainError(String),
}

fn check_np(n: usize, p: usize) -> Result<(), StatsError> {
    if p >= n {
        return Err(StatsError::DomainError(format!("need p < n, got n={n}, p={p}")));
    }
    Ok(())
}

/// Beta law of the OLS r² when the target is independent of the `p − 1`
/// non-constant predictors (p counts the intercept).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub n: usize,
    pub p: usize,
    pub a: f64,
    pub b: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn null_r2_model(n: usize, p: usize) -> Result<NullModel, StatsError> {
    if p <= 1 || p >= n {
        return Err(StatsError::DomainError(format!("need 1 < p < n, got n={n}, p={p}")));
    }
    let (nf, pf) = (n as f64, p as f64);
    let mean = (pf - 1.0) / (nf - 1.0);
    Ok(NullModel {
        n,
        p,
        a: (pf - 1.0) / 2.0,
        b: (nf - pf) / 2.0,
        mean,
        variance: mean * (1.0 - mean) / (1.0 + (nf - 1.0) / 2.0),
    })
}

/// `1 − (1 − r²)(n − 1)/(n − p)`; may be negative.
pub fn wherry_adjust(r2: f64, n: usize, p: usize) -> Result<f64, StatsError> {
    check_np(n, p)?;
    Ok(1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - p as f64))
}

/// Mean of the adjusted r² under the null.
pub const ADJ_NULL_MEAN: f64 = 0.0;

/// Variance of the adjusted r² under the null: `2(p−1)/(n−p) · 1/(n+1)`.
pub fn adj_null_variance(n: usize, p: usize) -> Result<f64, StatsError> {
    check_np(n, p)?;
    let (nf, pf) = (n as f64, p as f64);
    Ok(2.0 * (pf - 1.0) / (nf - pf) / (nf + 1.0))
}

/// Chebyshev bound on `P(r²_adj ≥ s)` under the null:
/// `(2(p−1)/((n−p)(n−1))) / s²`, capped at 1.
pub fn chebyshev_pvalue(s: f64, n: usize, p: usize) -> Result<f64, StatsError> {
    if !(s > 0.0) {
        return Err(StatsError::DomainError(format!("score must be positive, got {s}")));
    }
    check_np(n, p)?;
    let (nf, pf) = (n as f64, p as f64);
    let var = 2.0 * (pf - 1.0) / ((nf - pf) * (nf - 1.0));
    Ok((var / (s * s)).min(1.0))
}

/// P-value attached to a score report, with a validity flag. Scores of zero
/// get p = 1; when `p ≥ n` the theory does not apply and p = 1 is reported
/// as invalid.
pub fn score_pvalue(score: f64, n: usize, p: usize) -> (f64, bool) {
    if p >= n {
        return (1.0, false);
    }
    if !(score > 0.0) {
        return (1.0, true);
    }
    match chebyshev_pvalue(score, n, p) {
        Ok(v) => (v, true),
        Err(_) => (1.0, false),
    }
}

/// Indices with `p ≤ α/k`, ascending.
pub fn bonferroni(pvals: &[f64], alpha: f64) -> Vec<usize> {
    let k = pvals.len() as f64;
    (0..pvals.len()).filter(|&i| pvals[i] <= alpha / k).collect()
}

/// Benjamini–Hochberg step-up: with sorted p-values, find the largest rank i
/// with `p_(i) ≤ iα/k` and reject every hypothesis at or below it. Returns
/// indices into `pvals`, ascending.
pub fn benjamini_hochberg(pvals: &[f64], alpha: f64) -> Vec<usize> {
    let k = pvals.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let cutoff = (1..=k).rev().find(|&i| pvals[order[i - 1]] <= i as f64 * alpha / k as f64);
    let mut out: Vec<usize> = match cutoff {
        Some(c) => order[..c].to_vec(),
        None => Vec::new(),
    };
    out.sort_unstable();
    out
}

/// `Σ_j (2d_j²/(d_j²+λ) − 1/n − (d_j²/(d_j²+λ))²)` over the eigenvalues
/// `d_j²` of XᵀX.
pub fn ridge_effective_df(eigenvalues: &[f64], lambda: f64, n: usize) -> f64 {
    let inv_n = 1.0 / n as f64;
    eigenvalues
        .iter()
        .map(|&d2| {
            let h = if d2 + lambda > 0.0 { d2 / (d2 + lambda) } else { 0.0 };
            2.0 * h - inv_n - h * h
        })
        .sum()
}

/// In-sample OLS r² of a single target on `x` plus an intercept.
pub fn ols_r2(x: &DMatrix<f64>, y: &[f64]) -> Option<f64> {
    let n = y.len();
    if x.nrows() != n || n == 0 {
        return None;
    }
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let yc = nalgebra::DVector::from_iterator(n, y.iter().map(|v| v - my));
    let tss = yc.norm_squared();
    if tss == 0.0 {
        return None;
    }
    let gram = xc.transpose() * &xc;
    let beta = gram.cholesky()?.solve(&(xc.transpose() * &yc));
    let rss = (&yc - &xc * beta).norm_squared();
    Some(1.0 - rss / tss)
}

/// Two-sided one-sample Kolmogorov–Smirnov statistic against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS statistic `d` from `n` samples, using the
/// Kolmogorov distribution with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
