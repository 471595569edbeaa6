//! Additive pairwise masking: the aggregator learns the sum of the client
//! vectors and nothing else.
//!
//! This is the honest-but-curious masked-sum construction. It stands in for
//! homomorphic encryption or a general MPC protocol; neither is implemented.
//!
//! 1. Each client encodes its (already privatized) update in fixed point:
//!    `round(v * 2^scale_bits)` as a two's-complement `u64`.
//! 2. Every unordered pair of participants `i < j` shares a 64-bit seed. Client
//!    `i` adds `prg(seed_ij, round, k)` to coordinate `k`; client `j` subtracts
//!    the same word. Arithmetic is modulo 2^64, so the masks cancel exactly in
//!    the sum over all participants.
//! 3. The aggregator adds all shares and decodes the result.
//!
//! The pad generator is counter based:
//!
//! ```text
//! prg(seed, round, k) = splitmix64(splitmix64(seed ^ splitmix64(round)) ^ k)
//! ```
//!
//! Pair seeds are derived from the experiment seed, simulating a key agreement.
//! There is no dropout recovery: a missing share aborts the round.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::rng::{self, splitmix64, Stream};
use crate::ParamVector;

#[derive(Debug, Error, PartialEq)]
pub enum SecureSumError {
    #[error("coordinate {index} = {value} is outside the fixed-point range")]
    Overflow { index: usize, value: f64 },
    #[error("invalid scale_bits {0} (must be at most 32)")]
    InvalidScale(u32),
    #[error("no pair seed for clients {0} and {1}")]
    MissingSeed(u32, u32),
    #[error("client {0} is not among the round's participants")]
    NotParticipant(u32),
    #[error("share from client {0} is missing")]
    MissingShare(u32),
    #[error("duplicate share from client {0}")]
    DuplicateShare(u32),
    #[error("unexpected share from client {0}")]
    UnexpectedShare(u32),
    #[error("share for round {got} received in round {expected}")]
    RoundMismatch { expected: u32, got: u32 },
    #[error("share length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no shares")]
    Empty,
}

/// Magnitude bound for encodable reals.
pub const MAX_ABS_VALUE: f64 = (1u64 << 30) as f64;

/// Real <-> `u64` fixed point with `scale_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    scale_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self { scale_bits: 24 }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32) -> Result<Self, SecureSumError> {
        if scale_bits > 32 {
            return Err(SecureSumError::InvalidScale(scale_bits));
        }
        Ok(Self { scale_bits })
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    pub fn encode_value(&self, v: f64) -> Option<u64> {
        if v.is_nan() || v.abs() >= MAX_ABS_VALUE {
            return None;
        }
        Some(((v * self.scale()).round() as i64) as u64)
    }

    pub fn decode_value(&self, word: u64) -> f64 {
        (word as i64) as f64 / self.scale()
    }

    pub fn encode(&self, v: &ParamVector) -> Result<Vec<u64>, SecureSumError> {
        v.iter()
            .enumerate()
            .map(|(index, &value)| {
                self.encode_value(value)
                    .ok_or(SecureSumError::Overflow { index, value })
            })
            .collect()
    }

    pub fn decode(&self, words: &[u64]) -> ParamVector {
        ParamVector::new(words.iter().map(|&w| self.decode_value(w)).collect())
            .expect("decoded fixed point is finite")
    }
}

/// Seeds shared by each unordered client pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseSeedMatrix {
    clients: u32,
    // Upper triangle, row-major over i < j.
    seeds: Vec<u64>,
}

impl PairwiseSeedMatrix {
    /// Derive all pair seeds for `clients` parties from one experiment seed.
    pub fn derive(experiment_seed: u64, clients: u32) -> Self {
        let mut seeds = Vec::new();
        for i in 0..clients {
            for j in i + 1..clients {
                seeds.push(rng::derive_seed(
                    experiment_seed,
                    Stream::PairSeed,
                    &[i as u64, j as u64],
                ));
            }
        }
        Self { clients, seeds }
    }

    pub fn clients(&self) -> u32 {
        self.clients
    }

    fn slot(&self, i: u32, j: u32) -> usize {
        let (n, i, j) = (self.clients as usize, i as usize, j as usize);
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }

    /// Seed shared by `a` and `b`, in either order.
    pub fn get(&self, a: u32, b: u32) -> Option<u64> {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        if i == j || j >= self.clients {
            return None;
        }
        Some(self.seeds[self.slot(i, j)])
    }
}

/// Pad word `k` for one pair in one round.
pub fn prg_word(pair_seed: u64, round: u32, index: u64) -> u64 {
    splitmix64(splitmix64(pair_seed ^ splitmix64(round as u64)) ^ index)
}

/// A client's masked contribution. Carries no plaintext coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedShare {
    pub client_id: u32,
    pub round: u32,
    pub masked_values: Vec<u64>,
}

/// Mask `encoded` for `client` among `participants` in `round`.
pub fn mask(
    encoded: &[u64],
    client: u32,
    seeds: &PairwiseSeedMatrix,
    participants: &[u32],
    round: u32,
) -> Result<MaskedShare, SecureSumError> {
    if !participants.contains(&client) {
        return Err(SecureSumError::NotParticipant(client));
    }
    let mut masked = encoded.to_vec();
    for &other in participants.iter().filter(|&&p| p != client) {
        let seed = seeds
            .get(client, other)
            .ok_or(SecureSumError::MissingSeed(client, other))?;
        let add = client < other;
        for (k, word) in masked.iter_mut().enumerate() {
            let pad = prg_word(seed, round, k as u64);
            *word = if add {
                word.wrapping_add(pad)
            } else {
                word.wrapping_sub(pad)
            };
        }
    }
    Ok(MaskedShare {
        client_id: client,
        round,
        masked_values: masked,
    })
}

/// Coordinatewise sum of the shares modulo 2^64, after checking that exactly
/// the expected participants contributed to `round`.
pub fn modular_sum(
    shares: &[MaskedShare],
    participants: &[u32],
    round: u32,
) -> Result<Vec<u64>, SecureSumError> {
    let first = shares.first().ok_or(SecureSumError::Empty)?;
    let expected: BTreeSet<u32> = participants.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for share in shares {
        if share.round != round {
            return Err(SecureSumError::RoundMismatch {
                expected: round,
                got: share.round,
            });
        }
        if !expected.contains(&share.client_id) {
            return Err(SecureSumError::UnexpectedShare(share.client_id));
        }
        if !seen.insert(share.client_id) {
            return Err(SecureSumError::DuplicateShare(share.client_id));
        }
        if share.masked_values.len() != first.masked_values.len() {
            return Err(SecureSumError::LengthMismatch {
                expected: first.masked_values.len(),
                got: share.masked_values.len(),
            });
        }
    }
    if let Some(&missing) = expected.difference(&seen).next() {
        return Err(SecureSumError::MissingShare(missing));
    }
    let mut sum = vec![0u64; first.masked_values.len()];
    for share in shares {
        for (acc, w) in sum.iter_mut().zip(&share.masked_values) {
            *acc = acc.wrapping_add(*w);
        }
    }
    Ok(sum)
}

/// Decoded sum of all participants' updates. Any protocol violation aborts
/// without releasing a partial result.
pub fn unmask_sum(
    shares: &[MaskedShare],
    participants: &[u32],
    round: u32,
    codec: &FixedPointCodec,
) -> Result<ParamVector, SecureSumError> {
    Ok(codec.decode(&modular_sum(shares, participants, round)?))
}
