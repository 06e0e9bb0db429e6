//! Splittable random streams.
//!
//! Every stream is addressed by a key path rooted at the global seed, e.g.
//! `seed/prompt:q03/stage1/rep:17`. The path is hashed into a ChaCha20 key,
//! so a stream depends only on its address and never on the order in which
//! other streams were consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha20Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamKey {
    seed: u64,
    path: Vec<String>,
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    /// Key for per-prompt work with a purpose tag.
    pub fn for_prompt(seed: u64, prompt_id: &str, purpose: &str) -> Self {
        Self::root(seed)
            .child(&format!("prompt:{prompt_id}"))
            .child(purpose)
    }

    pub fn child(&self, tag: &str) -> Self {
        let mut path = self.path.clone();
        path.push(tag.to_string());
        Self {
            seed: self.seed,
            path,
        }
    }

    pub fn index(&self, i: u64) -> Self {
        self.child(&format!("#{i}"))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"anchorlab-stream-v1");
        h.update(self.seed.to_le_bytes());
        for tag in &self.path {
            h.update((tag.len() as u64).to_le_bytes());
            h.update(tag.as_bytes());
        }
        h.finalize().into()
    }

    pub fn stream(&self) -> Stream {
        ChaCha20Rng::from_seed(self.digest())
    }
}

impl std::fmt::Display for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.seed)?;
        for tag in &self.path {
            write!(f, "/{tag}")?;
        }
        Ok(())
    }
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform(rng: &mut Stream) -> f64 {
    rng.random::<f64>()
}

/// Fisher-Yates selection of `m` distinct indices out of `0..n`, in draw order.
pub fn sample_without_replacement(rng: &mut Stream, n: usize, m: usize) -> Vec<usize> {
    assert!(m <= n, "cannot draw {m} of {n} without replacement");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.random_range(0..n - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}
