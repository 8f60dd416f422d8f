//! Seeded generators. Every random stream is derived from a user seed plus a
//! fixed stream tag, so independent stages never share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mix two integers into a new seed (splitmix64 finaliser).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub mod stream {
    pub const EXPERT: u64 = 1;
    pub const NEGATIVE: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const RECON_INIT: u64 = 4;
    pub const MC: u64 = 5;
    pub const REDTEAM: u64 = 6;
    pub const VERIFY: u64 = 7;
}
