//! Seed derivation and deterministic random streams.
//!
//! Every random draw in an experiment comes from a ChaCha8 stream seeded
//! through [`rand::SeedableRng::seed_from_u64`] with a 64-bit value produced by
//! [`mix_seed`]. `mix_seed` folds its inputs with the SplitMix64 finalizer:
//!
//! ```text
//! h = 0x6A09E667F3BCC909
//! for p in parts: h = splitmix64(h ^ splitmix64(p))
//! ```
//!
//! where `splitmix64(x)` adds the golden gamma `0x9E3779B97F4A7C15` and applies
//! the standard xor-shift-multiply finalizer. The first part of every derived
//! seed is a [`Stream`] tag, so that e.g. the noise for client 3 in round 7 and
//! the batch order for the same pair never share a stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The SplitMix64 increment.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const MIX_INIT: u64 = 0x6A09_E667_F3BC_C909;

/// One SplitMix64 step: `x + gamma` followed by the finalizer.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(MIX_INIT, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthesize = 1,
    Partition = 2,
    Noise = 3,
    Sampling = 4,
    Batching = 5,
    PairSeed = 6,
    TestSplit = 7,
}

/// Seed for `(experiment seed, purpose, extra words...)`.
pub fn derive_seed(seed: u64, stream: Stream, extra: &[u64]) -> u64 {
    let mut parts = Vec::with_capacity(extra.len() + 2);
    parts.push(stream as u64);
    parts.push(seed);
    parts.extend_from_slice(extra);
    mix_seed(&parts)
}

/// A ChaCha8 generator for an already-derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A ChaCha8 generator for `(seed, purpose, extra...)`.
pub fn stream(seed: u64, purpose: Stream, extra: &[u64]) -> ChaCha8Rng {
    rng_from(derive_seed(seed, purpose, extra))
}

/// Uniform index in `0..bound` by 64x64 multiply-high. The bias is at most
/// `bound / 2^64`, irrelevant at the sizes used here.
pub fn below<R: RngCore>(rng: &mut R, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// Fisher-Yates shuffle, walking from the back: `swap(i, below(i + 1))`.
pub fn shuffle<R: RngCore, T>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Uniform draw in `[0, 1)` from the top 53 bits of one word.
pub fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}


#[cfg(test)]
mod draw_tests {
    use super::*;

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = rng_from(3);
        let mut v: Vec<usize> = (0..100).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = rng_from(9);
        for bound in 1..50 {
            assert!(below(&mut rng, bound) < bound);
        }
        let u = unit_f64(&mut rng);
        assert!((0.0..1.0).contains(&u));
    }
}
