use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Stream labels used across the crate.
pub mod streams {
    pub const INIT: &str = "init";
    pub const DATA: &str = "data";
    pub const BATCH: &str = "batch";
    pub const PSEUDO: &str = "pseudo";
}

/// Counter-based generator keyed by `(seed, label)`.
///
/// The seed becomes the ChaCha key and the label selects the ChaCha stream, so
/// two generators with different labels never share draws and a given pair
/// always reproduces the same sequence regardless of what else has been drawn.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    label: String,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(fnv1a(label.as_bytes()));
        Self {
            seed,
            label: label.to_owned(),
            inner,
        }
    }

    /// Independent child stream `"{label}/{sub}"`.
    pub fn derive(&self, sub: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.label, sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
