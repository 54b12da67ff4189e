use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::real::Real;

/// Well-known substream tags so independent consumers never share draws.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const GAMMA: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const EVALUATION: u64 = 7;
    pub const PROBES: u64 = 8;
    pub const NORMALIZER: u64 = 9;
    pub const ENTROPY: u64 = 10;
    pub const GENERATION: u64 = 11;
}

/// Counter-based generator (ChaCha20) addressed by `(seed, stream)`.
///
/// Identical seed and call sequence give bit-identical output. `substream`
/// derives statistically independent generators without consuming draws.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, decimal encoded (it is a 128-bit counter).
    pub word_pos: String,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent generator for `tag`; does not advance `self`.
    pub fn substream(&self, tag: u64) -> RngState {
        let stream = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `rows x cols` batch of i.i.d. standard normal draws.
    pub fn gauss_sample<T: Real>(&mut self, rows: usize, cols: usize) -> Batch<T> {
        let data = (0..rows * cols).map(|_| T::lit(self.normal())).collect();
        Batch::new(rows, cols, data).expect("shape consistent by construction")
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Option<RngState> {
        let pos: u128 = snap.word_pos.parse().ok()?;
        let mut r = Self::with_stream(snap.seed, snap.stream);
        r.inner.set_word_pos(pos);
        Some(r)
    }
}

/// Standalone form of [`RngState::gauss_sample`].
pub fn gauss_sample<T: Real>(rng: &mut RngState, rows: usize, cols: usize) -> Batch<T> {
    rng.gauss_sample(rows, cols)
}
