//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a single master seed through named
//! sub-streams. Streams are keyed by a string label (plus an optional index),
//! so adding a new consumer never perturbs the draws seen by existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used as the mixing primitive for seed derivation.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `value` into the running seed `state`.
pub fn mix(state: u64, value: u64) -> u64 {
    splitmix64(state ^ value.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// FNV-1a over raw bytes; stable across platforms and releases.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives named deterministic RNG streams from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSpring {
    master: u64,
}

impl SeedSpring {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Seed for the stream with the given label and index.
    pub fn seed_for(&self, label: &str, index: u64) -> u64 {
        let mut s = mix(self.master, hash_bytes(label.as_bytes()));
        s = mix(s, index);
        s
    }

    /// RNG for a named stream.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        self.substream(label, 0)
    }

    /// RNG for a named stream with a counter, e.g. one per sweep cell.
    pub fn substream(&self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed_for(label, index))
    }

    /// A spring whose streams are all distinct from this one's.
    pub fn child(&self, label: &str, index: u64) -> SeedSpring {
        SeedSpring::new(self.seed_for(label, index))
    }
}
