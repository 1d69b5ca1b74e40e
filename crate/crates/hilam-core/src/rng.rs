//! Deterministic random number generation with named streams.
//!
//! Every consumer of randomness (weight init, data sampling, rollouts) gets
//! its own stream derived from the run seed, so adding draws to one consumer
//! never shifts the values seen by another. State is four u64 words
//! (xoshiro256**) seeded through splitmix64, which keeps seeds reproducible
//! across languages at the manifest level.

use serde::{Deserialize, Serialize};

/// Which consumer a generator belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Dataset generation and batch sampling.
    Data,
    /// Evaluation rollouts.
    Rollout,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x494e4954,   // "INIT"
            Stream::Data => 0x44415441,   // "DATA"
            Stream::Rollout => 0x524f4c4c, // "ROLL"
        }
    }
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xoshiro256** generator with an explicit (seed, stream, salt) identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Derive a generator for `stream`, with `salt` distinguishing multiple
    /// consumers inside the same stream (e.g. per-rollout generators).
    pub fn new(seed: u64, stream: Stream, salt: u64) -> Self {
        let mut mix = seed ^ stream.tag().rotate_left(32) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut s = [0u64; 4];
        for w in &mut s {
            *w = splitmix64(&mut mix);
        }
        // All-zero state is a fixed point of xoshiro; splitmix64 cannot emit
        // four zeros in a row, but guard anyway.
        if s == [0; 4] {
            s[0] = 1;
        }
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Requires n > 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "rng.below: empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Current state words, recorded in checkpoint manifests.
    pub fn state(&self) -> [u64; 4] {
        self.s
    }
}
