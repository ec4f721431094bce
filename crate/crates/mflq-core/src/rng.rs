//! Per-path, per-noise-source Gaussian streams.
//!
//! Every (seed, path, source) triple owns an independent ChaCha8 stream: the key is
//! derived from `(seed, path)` and the source selects the ChaCha stream id, so
//! adding followers never reshuffles the increments of existing ones and the
//! draws do not depend on how paths are scheduled. An agent's initial state takes
//! the first draws of its own stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Noise source index of the leader's Brownian motion.
pub const LEADER_SOURCE: u64 = 0;

/// Follower `i` (0-based) draws from source `i + 1`.
pub fn follower_source(i: usize) -> u64 {
    i as u64 + 1
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit mix of a seed and two indices.
pub fn hash64(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17))
}

/// Standard normal stream for one noise source of one path.
///
/// Antithetic partners share `(seed, base_path, source)` and flip the sign.
#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    sign: f64,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64, source: u64, antithetic: bool) -> Self {
        let (base, sign) = if antithetic { (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 }) } else { (path, 1.0) };
        let mut key = [0u8; 32];
        for (j, chunk) in key.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&hash64(seed, base, j as u64).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(source);
        NormalStream { rng, sign }
    }

    #[inline]
    pub fn next(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sign * z
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = NormalStream::new(7, 3, 2, false);
        let mut b = NormalStream::new(7, 3, 2, false);
        for _ in 0..100 {
            assert_eq!(a.next().to_bits(), b.next().to_bits());
        }
    }

    #[test]
    fn antithetic_pairs_mirror() {
        let mut a = NormalStream::new(7, 4, 1, true);
        let mut b = NormalStream::new(7, 5, 1, true);
        for _ in 0..50 {
            assert_eq!(a.next(), -b.next());
        }
    }

    #[test]
    fn distinct_sources_are_uncorrelated() {
        let n = 20_000;
        let mut a = NormalStream::new(1, 0, 1, false);
        let mut b = NormalStream::new(1, 0, 2, false);
        let mut c = NormalStream::new(1, 1, 1, false);
        let (mut sab, mut sac, mut saa, mut sum) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x, y, z) = (a.next(), b.next(), c.next());
            sab += x * y;
            sac += x * z;
            saa += x * x;
            sum += x;
        }
        let nf = n as f64;
        assert!((sab / nf).abs() < 0.05);
        assert!((sac / nf).abs() < 0.05);
        assert!((saa / nf - 1.0).abs() < 0.05);
        assert!((sum / nf).abs() < 0.05);
    }
}
