//! Seed-derived random streams.
//!
//! Every batch element, particle or worker draws from its own stream so
//! results do not depend on how work is split up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream `index` of the generator family keyed by `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a child seed; used to give sub-tasks unrelated seeds.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut rng = stream(seed, tag ^ 0x9e37_79b9_7f4a_7c15);
    rng.random()
}

/// Standard Gumbel(0, 1) draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Index drawn from unnormalized nonnegative weights.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}
