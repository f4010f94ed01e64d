//! Deterministic random streams and sharded parallel evaluation.
//!
//! Every parallel computation in the crate splits its index range into
//! fixed-size shards. Shard `i` draws from stream `i` of a ChaCha generator
//! keyed by the run seed, and partial results are combined in shard order,
//! so outputs are bitwise identical regardless of the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::ops::Range;

pub type Rng = ChaCha8Rng;

pub const SHARD_SIZE: usize = 2048;

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent sub-seed, e.g. one per trial.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn shards(n: usize, shard: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(shard))
        .map(|i| i * shard..((i + 1) * shard).min(n))
        .collect()
}

/// Runs `f` over each shard of `0..n` in parallel with its own stream and
/// returns the per-shard results in shard order.
pub fn par_shards<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>, &mut Rng) -> T + Sync,
{
    shards(n, SHARD_SIZE)
        .into_par_iter()
        .enumerate()
        .map(|(i, range)| {
            let mut rng = stream(seed, i as u64);
            f(range, &mut rng)
        })
        .collect()
}

/// Parallel map over a slice in fixed shards, flattened back in order.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    items
        .par_chunks(SHARD_SIZE)
        .map(|chunk| chunk.iter().map(&f).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Parallel sum over a slice with a fixed combination order.
pub fn par_sum<T, F>(items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync,
{
    items
        .par_chunks(SHARD_SIZE)
        .map(|chunk| chunk.iter().map(&f).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Parallel map over fixed shards of a slice, one result per shard in order.
pub fn par_chunks<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync,
{
    items.par_chunks(SHARD_SIZE).map(|c| f(c)).collect()
}
