//! Deterministic random streams derived from one master seed.
//!
//! Each stream is identified by `(master, stream kind, index)` and seeded
//! with three rounds of the SplitMix64 finalizer:
//!
//! ```text
//! seed = mix(mix(mix(master) ^ kind) ^ index)
//! ```
//!
//! The index is the agent number (or 0 for team-level streams), so agent
//! `k`'s streams do not depend on how many agents the team has.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    PolicyInit = 1,
    ValueInit = 2,
    Rollout = 3,
    EnvReset = 4,
    Shuffle = 5,
    CriticInit = 6,
    DvnInit = 7,
    Replay = 8,
    ActorNoise = 9,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(mix(master) ^ stream as u64) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
