//! Portable seeded randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 64-bit seed and a stream label, so results are reproducible across runs
//! and platforms. Normal variates use `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type PortableRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix64(seed ^ fnv1a(label.as_bytes()))
}

pub fn stream(seed: u64, label: &str) -> PortableRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Stream for an indexed draw, e.g. the noise of training step `index`.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> PortableRng {
    ChaCha8Rng::seed_from_u64(mix64(derive_seed(seed, label) ^ mix64(index)))
}

pub fn normal_vec(rng: &mut PortableRng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

pub fn normal_vec_f64(rng: &mut PortableRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_repeat_and_separate() {
        let a: Vec<u64> = (0..4).map(|_| stream(1, "x").random()).collect();
        let mut r = stream(1, "x");
        assert_eq!(r.random::<u64>(), a[0]);
        assert_ne!(stream(1, "y").random::<u64>(), a[0]);
        assert_ne!(stream(2, "x").random::<u64>(), a[0]);
        let i0 = indexed_stream(1, "x", 0).random::<u64>();
        assert_eq!(i0, indexed_stream(1, "x", 0).random::<u64>());
        assert_ne!(i0, indexed_stream(1, "x", 1).random::<u64>());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn normals_have_unit_moments() {
        let v = normal_vec_f64(&mut stream(3, "n"), 20_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }
}
