//! Named random streams derived from one run seed.
//!
//! Every consumer of randomness (data generation, initialization, dropout,
//! shuffling) asks for its own stream by name, so changing how one
//! component draws numbers never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_seed(&self, name: &str, index: u64) -> u64 {
        splitmix(splitmix(self.seed ^ fnv1a(name.as_bytes())) ^ splitmix(index))
    }

    pub fn stream(&self, name: &str) -> Rng {
        self.indexed(name, 0)
    }

    /// Stream `name` at position `index`, e.g. the dropout stream of a step.
    pub fn indexed(&self, name: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.stream_seed(name, index))
    }
}
