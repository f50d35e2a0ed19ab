//! Seeded random initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::matrix::{Matrix, Real};

/// Entries drawn uniformly from `[-scale, scale)`.
pub fn random_matrix<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        T::lit(rng.random_range(-scale..scale))
    })
}

/// Uniform fan-in scaling: entries in `[-1/√rows, 1/√rows)` for a weight
/// that multiplies inputs of width `rows`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    random_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}
