//! Latin hypercube sampling on [-1, 1]^p.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{FieldMatchError, Result};

/// One point per axis-stratum per dimension, deterministic given the seed.
pub fn lhs_sample(dim: usize, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if dim == 0 || n == 0 {
        return Err(FieldMatchError::InvalidArgument(
            "lhs_sample needs n >= 1 and dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, dim);
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        strata.shuffle(&mut rng);
        for i in 0..n {
            let u: f64 = rng.random();
            let unit = (strata[i] as f64 + u) / n as f64;
            out[(i, j)] = 2.0 * unit - 1.0;
        }
    }
    Ok(out)
}
