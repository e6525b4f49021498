//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`Rng`]; sub-streams are
//! derived from a base seed and a label so that results do not depend on
//! the order in which independent tasks run.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from `base`, a stream label and an index.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn derived(base: u64, label: &str, index: u64) -> Rng {
    seeded(derive_seed(base, label, index))
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_streams_differ_by_label_and_index() {
        let a = derive_seed(7, "source", 0);
        assert_ne!(a, derive_seed(7, "target", 0));
        assert_ne!(a, derive_seed(7, "source", 1));
        assert_ne!(a, derive_seed(8, "source", 0));
        assert_eq!(a, derive_seed(7, "source", 0));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = seeded(3);
        let mut p = permutation(&mut rng, 100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
