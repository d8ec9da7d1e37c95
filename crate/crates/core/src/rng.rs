//! Counter-addressed random streams.
//!
//! Every random draw in the crate is a pure function of a seed and an
//! integer key, so results do not depend on evaluation order or thread count.
//! A [`KeyedStream`] wraps a ChaCha8 generator; `(stream, index)` selects the
//! `index`-th 64-bit word of ChaCha stream `stream`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maps 64 random bits to a uniform double in `[0, 1)`.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Debug)]
pub struct KeyedStream {
    base: ChaCha8Rng,
}

impl KeyedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The `index`-th 64-bit word of stream `stream`.
    pub fn word(&self, stream: u64, index: u64) -> u64 {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(index) << 1);
        rng.next_u64()
    }

    pub fn uniform(&self, stream: u64, index: u64) -> f64 {
        unit_f64(self.word(stream, index))
    }

    /// A sequential generator positioned at word 0 of `stream`. Its `n`-th
    /// `next_u64` equals `self.word(stream, n)`.
    pub fn sequential(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(0);
        rng
    }
}

/// Derives an independent child seed from `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    KeyedStream::new(seed).word(stream, index)
}
