//! Named random sub-streams derived from one root seed.
//!
//! Every stage draws from its own stream so that, for example, changing the
//! number of MC-dropout passes never perturbs patient generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a generator for `(root, name, index)`.
pub fn stream(root: u64, name: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    Rng::from_seed(seed)
}

/// A root seed plus a stream name; convenient to pass around.
#[derive(Debug, Clone)]
pub struct SeedStream {
    pub root: u64,
    pub name: String,
}

impl SeedStream {
    pub fn new(root: u64, name: impl Into<String>) -> Self {
        Self {
            root,
            name: name.into(),
        }
    }

    pub fn at(&self, index: u64) -> Rng {
        stream(self.root, &self.name, index)
    }

    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream::new(self.root, format!("{}/{}", self.name, name))
    }
}
