//! Shared inputs for the criterion benchmarks.

use linattn_core::init::random_matrix;
use linattn_core::{FeatureMap, FeatureMapKind, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Head width used by every benchmark, for keys and values alike.
pub const HEAD_DIM: usize = 32;

/// Random queries, keys and values for one head of length `n`.
pub struct Inputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Upstream gradient with the shape of the output.
    pub g: Matrix,
}

impl Inputs {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            q: random_matrix(&mut rng, n, HEAD_DIM, 1.0),
            k: random_matrix(&mut rng, n, HEAD_DIM, 1.0),
            v: random_matrix(&mut rng, n, HEAD_DIM, 1.0),
            g: random_matrix(&mut rng, n, HEAD_DIM, 1.0),
        }
    }

    /// `(φ(Q), φ(K))` under elu+1.
    pub fn features(&self) -> (Matrix, Matrix) {
        let fm = FeatureMap::new(FeatureMapKind::Elu1, HEAD_DIM);
        (fm.apply_rows(&self.q).unwrap(), fm.apply_rows(&self.k).unwrap())
    }
}
