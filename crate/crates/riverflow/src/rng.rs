//! Named, reproducible random streams.
//!
//! All randomness in a run flows from one root seed through named sub-streams
//! ("data", "init", "shuffle", "holdout", ...), so any component can be
//! reproduced in isolation. The generator is ChaCha8, a counter-based stream
//! cipher RNG: the root seed seeds the key and the FNV-1a hash of the stream
//! name selects the stream. Derived values are defined exactly so other
//! implementations can reproduce them:
//!
//! * `next_f64`: draw u64, take the top 53 bits, scale by 2^-53 -> [0, 1).
//! * `uniform(lo, hi)`: `lo + (hi - lo) * next_f64()`.
//! * `normal()`: Box-Muller on two `next_f64` draws (u clamped away from 0).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a, used to map stream names to ChaCha stream ids.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic sub-seed for an independent unit of work (a fold, a grid
/// cell): FNV-1a over the root seed's little-endian bytes followed by the
/// label bytes.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut bytes = root.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

/// A named sub-stream of the run's root seed.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(root_seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
        rng.set_stream(fnv1a64(name.as_bytes()));
        Stream { rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u = self.next_f64();
        if u < 1e-300 {
            u = 1e-300;
        }
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling keeps the draw exactly uniform.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
