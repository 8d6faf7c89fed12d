//! Documented PRNG so that data streams can be reproduced outside Rust.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by the golden-ratio
//! increment `0x9E3779B97F4A7C15` and passed through the SplitMix finalizer.
//!
//! * `next_f64`: top 53 bits of `next_u64` scaled by `2^-53`, in `[0, 1)`.
//! * `normal`: Box–Muller using two consecutive uniforms
//!   `u1 = 1 - next_f64()`, `u2 = next_f64()`, returning
//!   `sqrt(-2 ln u1) * cos(2 pi u2)`; the sine partner is discarded.
//! * `below(n)`: high 64 bits of the 128-bit product `next_u64() * n`.
//! * `shuffle`: Fisher–Yates from the last index down, `j = below(i + 1)`.
//! * Sub-streams: `SplitMix64::stream(seed, tag)` seeds a fresh generator
//!   with `mix(seed ^ mix(tag))`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent generator for a named purpose within one seed.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Self::new(mix(seed ^ mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
