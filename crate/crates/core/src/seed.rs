//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator seeded from
//! `hash64(master_seed, stream_tag, indices...)`. The hash folds each
//! word through the SplitMix64 finalizer, so streams for different
//! clients, classes or rounds are independent and adding a client never
//! shifts another client's data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Stream tags mixed into derived seeds.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const DATA: u64 = 4;
    pub const LOCAL: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const PARTITION: u64 = 7;
    pub const HEAD: u64 = 8;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn hash64(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn rng_from(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash64(words))
}

/// Incremental variant of [`hash64`] used for checksums.
pub struct Hasher64 {
    state: u64,
}

impl Hasher64 {
    pub fn new(seed: u64) -> Self {
        Hasher64 { state: splitmix64(seed) }
    }

    pub fn write_u64(&mut self, w: u64) {
        self.state = splitmix64(self.state ^ splitmix64(w));
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        self.write_u64(bytes.len() as u64);
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(buf));
        }
    }

    pub fn write_tensor(&mut self, t: &Tensor) {
        for &d in t.shape() {
            self.write_u64(d as u64);
        }
        for v in t.data() {
            self.write_u64(v.to_bits());
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_order_sensitive() {
        assert_ne!(hash64(&[1, 2]), hash64(&[2, 1]));
        assert_eq!(hash64(&[1, 2]), hash64(&[1, 2]));
        assert_ne!(hash64(&[0]), hash64(&[0, 0]));
    }
}
