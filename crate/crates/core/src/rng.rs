//! Seeded random source.
//!
//! All sampling goes through ChaCha8, a counter-based generator whose output
//! is identical on every platform. Independent streams are derived from a
//! base seed and a stream index, which is how parallel workers and dataset
//! attempts get their own reproducible randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomSource = ChaCha8Rng;

pub fn seeded(seed: u64) -> RandomSource {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> RandomSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, 3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| stream(7, 3).random()).collect();
        assert_eq!(a, b);
        let x: u64 = stream(7, 3).random();
        let y: u64 = stream(7, 4).random();
        assert_ne!(x, y);
    }

    #[test]
    fn pinned_first_draw() {
        // Guards against silent changes of the generator algorithm.
        let v: u64 = seeded(0).random();
        assert_eq!(v, 0xb585_f767_a79a_3b6c);
    }
}
