//! Seeded random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream keyed by the master
//! seed, a purpose tag and up to three integer ids (client, round, ...). There
//! is no global generator, so any component can be replayed in isolation and
//! clients can be advanced in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Local gradient noise / minibatches, keyed by (round, client).
    LocalSteps = 1,
    /// Participant sampling, keyed by round.
    Selection = 2,
    /// Synthetic problem generation, keyed by client.
    Problem = 3,
    /// Dataset partitioning.
    Partition = 4,
    /// Initial point.
    Init = 5,
    /// Free-form streams for tests and studies.
    Aux = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, purpose, ids)`.
pub fn stream(seed: u64, purpose: Purpose, ids: &[u64]) -> Stream {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &id in ids {
        h = splitmix64(h ^ splitmix64(id.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn local_stream(seed: u64, round: usize, client: usize) -> Stream {
    stream(seed, Purpose::LocalSteps, &[round as u64, client as u64])
}
