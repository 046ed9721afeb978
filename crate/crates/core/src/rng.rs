//! Seed derivation.
//!
//! Every random entity (a client's training loop, the server's generator in
//! round `t`, a held-out set) draws from its own ChaCha stream whose seed is a
//! pure function of the master seed and a tag path. Results therefore do not
//! depend on the order in which entities are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    World = 1,
    Partition = 2,
    ClientData = 3,
    Heldout = 4,
    ClientInit = 5,
    Pretrain = 6,
    Generator = 7,
    Synthesis = 8,
    Augment = 9,
    FineTune = 10,
    Retrain = 11,
    Eval = 12,
    CrossAttention = 13,
    Probe = 14,
}

pub fn derive_seed(master: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(master: u64, stream: Stream, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, stream, path))
}
