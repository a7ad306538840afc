//! Seed derivation and recorded random draws.
//!
//! Every random number consumed by an episode flows through a [`DrawSource`].
//! Live episodes use [`RecordingRng`], which logs each raw `u64`; replaying
//! that log through [`TraceReplay`] reproduces the episode exactly.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed hash of a sequence of words; order-sensitive.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(parts.len() as u64), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

/// Domain tags keep streams for different purposes apart.
pub mod stream {
    pub const QUERY: u64 = 0x51_5545_5259;
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const SPARSIFY: u64 = 0x5350_4152_5345;
    pub const EVAL: u64 = 0x4556_414c;
    pub const INIT: u64 = 0x494e_4954;
}

pub trait DrawSource {
    fn next_u64(&mut self) -> u64;

    /// Uniform in `[0, 1)` with 53 bits of precision.
    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`; `n` must be positive.
    fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl<D: DrawSource + ?Sized> DrawSource for &mut D {
    fn next_u64(&mut self) -> u64 {
        (**self).next_u64()
    }
}

/// ChaCha stream that remembers every draw.
#[derive(Clone, Debug)]
pub struct RecordingRng {
    inner: ChaCha8Rng,
    trace: Vec<u64>,
}

impl RecordingRng {
    pub fn new(seed: u64) -> Self {
        RecordingRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
        }
    }

    pub fn trace(&self) -> &[u64] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<u64> {
        self.trace
    }
}

impl DrawSource for RecordingRng {
    fn next_u64(&mut self) -> u64 {
        let x = self.inner.next_u64();
        self.trace.push(x);
        x
    }
}

/// Plain seeded stream, for draws that are not part of an episode.
#[derive(Clone, Debug)]
pub struct SeededStream(ChaCha8Rng);

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl DrawSource for SeededStream {
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
}

/// Replays a recorded trace. Reading past the end yields zeros and sets
/// [`overrun`](Self::overrun).
#[derive(Clone, Debug)]
pub struct TraceReplay<'a> {
    draws: &'a [u64],
    pos: usize,
    overrun: bool,
}

impl<'a> TraceReplay<'a> {
    pub fn new(draws: &'a [u64]) -> Self {
        TraceReplay {
            draws,
            pos: 0,
            overrun: false,
        }
    }

    pub fn overrun(&self) -> bool {
        self.overrun
    }

    pub fn consumed_all(&self) -> bool {
        !self.overrun && self.pos == self.draws.len()
    }
}

impl DrawSource for TraceReplay<'_> {
    fn next_u64(&mut self) -> u64 {
        match self.draws.get(self.pos) {
            Some(&x) => {
                self.pos += 1;
                x
            }
            None => {
                self.overrun = true;
                0
            }
        }
    }
}
