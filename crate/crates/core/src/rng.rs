//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream. A stream is identified by a 64-bit
//! key; its 256-bit ChaCha seed is the concatenation of four SplitMix64
//! outputs started from that key. Splitting a stream with a label derives a
//! child key as `mix(parent_key ^ mix(label + 0x9E37_79B9_7F4A_7C15))`, so
//! children depend only on the parent key and the label, never on how many
//! values the parent has already produced. Gaussian draws use the Ziggurat
//! sampler from `rand_distr`, which is deterministic for a fixed keystream.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Mat;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(x: u64) -> u64 {
    let mut s = x;
    splitmix64(&mut s)
}

/// A deterministic random stream with cheap labelled splitting.
#[derive(Clone, Debug)]
pub struct SeedStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        let mut state = seed;
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            key: seed,
            rng: ChaCha8Rng::from_seed(bytes),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream for `label`; independent of the parent's position.
    pub fn split(&self, label: u64) -> Self {
        Self::new(mix(self.key ^ mix(label.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_mat(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, self.normal_vec(rows * cols))
    }
}
