//! Deterministic per-consumer random streams.
//!
//! Every stochastic consumer draws from its own generator derived from
//! `(master seed, label, round)`, so adding or removing draws in one consumer
//! never shifts another's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, label: &str, round: u64) -> u64 {
    mix(mix(mix(master) ^ label_hash(label)) ^ round)
}

pub fn stream(master: u64, label: &str, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, round))
}
