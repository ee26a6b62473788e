//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `u64` seed. Independent
//! substreams are derived by hashing `(seed, tag)` so that two consumers of
//! the same seed never share random numbers by accident.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a tag.
pub fn substream(seed: u64, tag: u64) -> u64 {
    mix(mix(seed) ^ mix(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of i.i.d. standard normal entries, filled row by row.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Standard normal matrix whose rows are stratified over the unit square
/// pairs used by the Box-Muller transform.
///
/// Coordinates `(2j, 2j+1)` of row `i` come from a jittered cell of an
/// `a x b` grid with `a = floor(sqrt(rows))` and `a b >= rows`. Each
/// coordinate pair uses its own random permutation of the cells and keeps the
/// first `rows`. Every row is still exactly `N(0, I)` in distribution, but
/// smooth low-dimensional integrands converge much faster than with i.i.d.
/// draws.
pub fn stratified_gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    if rows == 0 || cols == 0 {
        return m;
    }
    let side_a = ((rows as f64).sqrt().floor() as usize).max(1);
    let side_b = rows.div_ceil(side_a);
    let cells = side_a * side_b;
    let pairs = cols.div_ceil(2);
    for p in 0..pairs {
        let mut order: Vec<usize> = (0..cells).collect();
        for i in (1..cells).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for (i, &cell) in order.iter().enumerate().take(rows) {
            let (a, b) = (cell / side_b, cell % side_b);
            let u1: f64 = (a as f64 + rng.random::<f64>()) / side_a as f64;
            let u2: f64 = (b as f64 + rng.random::<f64>()) / side_b as f64;
            // 1 - u1 lies in (0, 1] so the logarithm is finite.
            let r = (-2.0 * (1.0 - u1).max(f64::MIN_POSITIVE).ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            m[(i, 2 * p)] = r * theta.cos();
            if 2 * p + 1 < cols {
                m[(i, 2 * p + 1)] = r * theta.sin();
            }
        }
    }
    m
}
