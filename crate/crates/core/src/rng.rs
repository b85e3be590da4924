//! Seeded randomness. Every stochastic routine takes an explicit generator.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = rand_xoshiro::Xoshiro256PlusPlus;

/// Generator for one named stage of a run; stages with the same seed but
/// different tags draw independent streams.
pub fn stage_rng(seed: u64, tag: &str) -> Rng {
    // FNV-1a over the tag, mixed into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
