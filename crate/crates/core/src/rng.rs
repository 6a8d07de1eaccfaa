//! Seedable, portable random number generation.
//!
//! The generator is xorshift64* (Marsaglia's xorshift with Vigna's
//! multiplicative output scramble). It is fully specified here so "seed 0"
//! means the same bit stream in any reimplementation, on any platform:
//!
//! ```text
//! state ^= state >> 12
//! state ^= state << 25
//! state ^= state >> 27
//! output = state * 0x2545F4914F6CDD1D   (wrapping)
//! ```
//!
//! Seeds pass through one round of splitmix64 first, which both decorrelates
//! consecutive integer seeds and maps seed 0 away from the xorshift fixed
//! point at state 0.

/// One splitmix64 step; also used to derive per-stream sub-seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct PortableRng {
    state: u64,
}

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        let mut state = splitmix64(seed);
        if state == 0 {
            // splitmix64 maps exactly one input to zero; nudge it off the
            // xorshift absorbing state.
            state = 0x9E37_79B9_7F4A_7C15;
        }
        PortableRng { state }
    }

    /// Sub-generator for an independent stream (e.g. step `index` of a
    /// batch stream). Deterministic in (self.seed-lineage, index).
    pub fn derive(seed: u64, index: u64) -> Self {
        PortableRng::new(seed ^ splitmix64(index.wrapping_add(1)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be nonzero; uses rejection sampling
    /// so the distribution is exact.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }
}
