use std::borrow::Cow;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random `n × d` matrix of iid standard normals, filled column by column.
pub fn projection_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    DMatrix::from_vec(n, d, data)
}

/// Projects the columns of `m` (T×n) down to `d` when `n > d`; narrower
/// inputs pass through untouched.
pub fn random_project(m: &DMatrix<f64>, d: usize, seed: u64) -> Cow<'_, DMatrix<f64>> {
    assert!(d >= 1, "projection dimension must be positive");
    if m.ncols() <= d {
        return Cow::Borrowed(m);
    }
    Cow::Owned(m * projection_matrix(m.ncols(), d, seed))
}
