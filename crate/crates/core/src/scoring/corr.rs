use nalgebra::{DMatrix, DVector};

/// True when a column carries no variation at double precision.
pub(crate) fn is_constant(values: impl Iterator<Item = f64>) -> bool {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let scale = lo.abs().max(hi.abs());
    hi - lo <= 1e-12 * scale
}

/// Centres each column; returns the centred copy and the column norms, with
/// norm 0 reported for constant columns.
fn centred(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut out = m.clone();
    let mut norms = DVector::zeros(m.ncols());
    for (j, mut col) in out.column_iter_mut().enumerate() {
        if is_constant(col.iter().copied()) {
            col.fill(0.0);
            continue;
        }
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        norms[j] = col.norm();
    }
    (out, norms)
}

/// Pearson correlation between every column of `x` and every column of `y`
/// (`F_x × F_y`). Constant columns correlate 0 with everything.
pub fn pearson_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(x.nrows(), y.nrows(), "row count mismatch");
    let (xc, xn) = centred(x);
    let (yc, yn) = centred(y);
    let mut rho = xc.transpose() * &yc;
    for i in 0..rho.nrows() {
        for j in 0..rho.ncols() {
            let denom = xn[i] * yn[j];
            rho[(i, j)] = if denom > 0.0 {
                (rho[(i, j)] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    rho
}

pub fn corr_mean_of(rho: &DMatrix<f64>) -> f64 {
    if rho.is_empty() {
        return 0.0;
    }
    rho.iter().map(|r| r.abs()).sum::<f64>() / rho.len() as f64
}

pub fn corr_max_of(rho: &DMatrix<f64>) -> f64 {
    rho.iter().fold(0.0, |m, r| m.max(r.abs()))
}

/// Mean absolute pairwise correlation.
pub fn corr_mean(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    corr_mean_of(&pearson_matrix(x, y))
}

/// Max absolute pairwise correlation.
pub fn corr_max(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    corr_max_of(&pearson_matrix(x, y))
}
