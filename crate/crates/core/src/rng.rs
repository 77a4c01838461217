//! Seeded 64-bit linear congruential generator.
//!
//! Every seeded procedure in the crate (k-means++ seeding, fixture and weight
//! generation) draws from this generator so results are reproducible across
//! platforms and across independent implementations of the same algorithms.
//!
//! State update (all arithmetic modulo 2^64):
//!
//! ```text
//! state <- state * 6364136223846793005 + 1442695040888963407
//! ```
//!
//! The initial state is the seed itself. `next_u64` advances once and returns
//! the new state. `next_f64` advances once and maps the top 53 bits to
//! `[0, 1)` as `(state >> 11) * 2^-53`.

const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
const INCREMENT: u64 = 1_442_695_040_888_963_407;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MULTIPLIER).wrapping_add(INCREMENT);
        self.state
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        let i = (self.next_f64() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Standard normal via Box-Muller, consuming exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
