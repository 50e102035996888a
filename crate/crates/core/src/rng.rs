//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream that is
//! keyed by a master seed and a stream index, so independent work units
//! (trials, samples) can be generated in any order with identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for sub-stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws an index from a cumulative distribution (last entry ~1).
pub(crate) fn draw_cumulative<R: Rng + ?Sized>(rng: &mut R, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random();
    for (i, &c) in cumulative.iter().enumerate() {
        if u < c {
            return i;
        }
    }
    // u landed in the rounding slack above the final partial sum: fall back
    // to the last state with positive mass
    let mut prev = 0.0;
    let mut last = 0;
    for (i, &c) in cumulative.iter().enumerate() {
        if c > prev {
            last = i;
        }
        prev = c;
    }
    last
}

pub(crate) fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}
