//! Seed derivation and keyed random streams.
//!
//! Every random source is a ChaCha8 generator keyed by a 64-bit seed and a
//! stream role, so trials and roles never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream roles. Distinct roles give independent streams for one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Events = 1,
    Background = 2,
    Field = 3,
    Filler = 4,
    Bootstrap = 5,
    Aux = 6,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 finalizer; a bijection on u64.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trial seed: `mix64(master + (2*trial + 1) * GOLDEN)`. For a fixed master
/// the argument is injective in the trial id (GOLDEN is odd), and `mix64` is a
/// bijection, so distinct trials never collide.
pub fn derive_trial_seed(master: u64, trial: u64) -> u64 {
    mix64(master.wrapping_add(trial.wrapping_mul(2).wrapping_add(1).wrapping_mul(GOLDEN)))
}

pub fn stream(seed: u64, role: Role) -> ChaCha8Rng {
    keyed(seed, role as u64)
}

/// Generator for an arbitrary numeric sub-stream.
pub fn keyed(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}
