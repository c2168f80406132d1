//! Portable pseudo-random numbers.
//!
//! Every random draw in the crate goes through [`XorShift64Star`] so results
//! are reproducible bit-for-bit on any platform and easy to re-implement in
//! another language:
//!
//! ```text
//! splitmix64(z):                      xorshift64*(x):
//!   z += 0x9E3779B97F4A7C15             x ^= x >> 12
//!   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   x ^= x << 25
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB   x ^= x >> 27
//!   return z ^ (z >> 31)                return x * 0x2545F4914F6CDD1D
//! ```
//!
//! All arithmetic is wrapping on `u64`. A generator seeded with `s` starts
//! from `splitmix64(s)` (replaced by `0x9E3779B97F4A7C15` if that is zero).
//! Uniform floats take the top 53 bits: `(next >> 11) * 2^-53`.
//! A per-item stream `(seed, index)` is seeded with
//! `splitmix64(seed) ^ splitmix64(index ^ 0xD1B54A32D192ED03)`.

/// One step of the splitmix64 mixer.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let s = splitmix64(seed);
        Self {
            state: if s == 0 { 0x9E37_79B9_7F4A_7C15 } else { s },
        }
    }

    /// Independent stream for item `index` under `seed`.
    pub fn for_item(seed: u64, index: u64) -> Self {
        let s = splitmix64(seed) ^ splitmix64(index ^ 0xD1B5_4A32_D192_ED03);
        Self {
            state: if s == 0 { 0x9E37_79B9_7F4A_7C15 } else { s },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        lo + (self.next_f64() * span as f64) as u64 % span
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw (Box–Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
