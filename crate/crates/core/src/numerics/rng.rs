//! Keyed deterministic random streams.
//!
//! Every consumer of randomness derives its own stream from the run's root
//! seed and a [`StreamKey`]. Streams are never shared between clients or
//! threads, so draws do not depend on scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Identifies one stream: a purpose tag plus three integer coordinates
/// (typically client, round, task; the backbone uses layer and role).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub tag: &'static str,
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

impl StreamKey {
    pub const fn new(tag: &'static str, a: u64, b: u64, c: u64) -> Self {
        StreamKey { tag, a, b, c }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn derive_seed(root: u64, key: &StreamKey) -> [u8; 32] {
    let mut state = root;
    let mut mix = |v: u64| {
        state ^= v;
        splitmix64(&mut state)
    };
    mix(fnv1a(key.tag.as_bytes()));
    mix(key.a);
    mix(key.b);
    mix(key.c);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// A ChaCha8 stream seeded from `(root_seed, key)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    root_seed: u64,
    key: StreamKey,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, key: StreamKey) -> Self {
        RngStream {
            root_seed,
            key,
            inner: ChaCha8Rng::from_seed(derive_seed(root_seed, &key)),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn open_unit(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        self.shuffle(&mut v);
        v
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
