//! Counter-based, splittable random number generator.
//!
//! Every draw is a pure function of `(seed, stream_id, draw_index)`, so trials
//! can be farmed out to any number of workers and still produce bit-identical
//! streams: each unit of work derives its own substream instead of sharing
//! mutable state.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_SALT: u64 = 0x243f_6a88_85a3_08d3;

/// SplitMix64 finalizer (variant 13).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

/// A deterministic stream of pseudo-random values identified by
/// `(seed, stream_id)`; the draw counter advances with each call.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    base: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let base = mix64(seed ^ mix64(stream_id.wrapping_mul(GAMMA) ^ STREAM_SALT));
        RngStream {
            seed,
            stream_id,
            base,
            counter: 0,
        }
    }

    /// Derive a statistically independent child stream. Children of distinct
    /// indices (and grandchildren through repeated derivation) never share a
    /// draw sequence.
    pub fn substream(&self, index: u64) -> RngStream {
        let child_id = mix64(self.stream_id ^ index.wrapping_add(1).wrapping_mul(GAMMA));
        RngStream::new(self.seed, child_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.base.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Always consumes exactly two draws.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in [0, n) without modulo bias (Lemire reduction).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
