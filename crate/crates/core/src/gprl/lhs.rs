use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Latin hypercube design with `n` points (rows) over the box `bounds`.
///
/// Each axis is cut into `n` equal strata and every stratum receives exactly
/// one point; the position inside a stratum is uniform.
pub fn latin_hypercube(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("latin hypercube needs at least one point"));
    }
    if bounds.is_empty() {
        return Err(Error::invalid("latin hypercube needs at least one dimension"));
    }
    if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::invalid(format!("degenerate bounds [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, bounds.len());
    let mut strata: Vec<usize> = (0..n).collect();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        strata.shuffle(&mut rng);
        for (i, &k) in strata.iter().enumerate() {
            let u = (k as f64 + rng.random::<f64>()) / n as f64;
            out[(i, d)] = (lo + (hi - lo) * u).min(hi);
        }
    }
    Ok(out)
}
