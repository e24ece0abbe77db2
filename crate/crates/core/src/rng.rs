//! Deterministic splittable PRNG used everywhere randomness is needed.
//!
//! The generator is splitmix64: `state += 0x9E3779B97F4A7C15` per draw,
//! followed by the Stafford mix13 finalizer. It is seeded with a single
//! `u64`, produces identical streams on every platform, and supports
//! cheap derivation of independent child streams via [`Rng::fork`], so
//! batch items can be generated in parallel without sharing state.

/// Splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Derive an independent child stream keyed by `stream`.
    ///
    /// Forking does not advance this generator, so `fork(k)` is a pure
    /// function of (seed, k) — the basis for order-independent parallel
    /// generation.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng {
            state: mix(self.state ^ mix(stream.wrapping_add(GOLDEN))),
        }
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller, scaled by `std`.
    pub fn gauss(&mut self, std: f32) -> f32 {
        let u1 = (self.next_f64()).max(1e-12);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        (std as f64 * r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Sample an index proportionally to `weights` (need not be normalized).
    pub fn categorical(&mut self, weights: &[f32]) -> usize {
        let total: f32 = weights.iter().sum();
        let mut dart = self.next_f32() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Pick one element of a slice.
    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}
