//! Seedable randomness.
//!
//! All randomness in the crate flows through [`DetRng`], a ChaCha8 stream
//! cipher used as a counter-based generator: a 64-bit seed fixes the key, a
//! 64-bit stream id selects an independent keystream. Simulations derive one
//! stream per trial chunk from `(seed, chunk)` so results do not depend on
//! execution order. ChaCha8 is also a reasonable deployment generator; seed
//! it from an OS entropy source in that case.

use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct DetRng(ChaCha8Rng);

impl DetRng {
    pub fn seeded(seed: u64) -> Self {
        DetRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream `stream` under `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        DetRng(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.0.random()
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.0.random_range(lo..=hi)
    }

    /// Uniform in `[-half_width, half_width]`; exactly 0.0 for a zero width.
    pub fn symmetric_f32(&mut self, half_width: f32) -> f32 {
        if half_width == 0.0 {
            return 0.0;
        }
        self.0.random_range(-half_width..=half_width)
    }

    pub fn coin(&mut self) -> bool {
        self.0.random()
    }

    /// Uniform in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// `amount` distinct indices from `0..n`, uniformly without
    /// replacement, sorted ascending.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        let mut v = index::sample(&mut self.0, n, amount.min(n)).into_vec();
        v.sort_unstable();
        v
    }
}
