//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hash::hash_bytes;

pub type Rng64 = ChaCha8Rng;

/// Root of all randomness in a run. Each consumer asks for a named
/// substream, so adding a new consumer never perturbs existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed_for(&self, name: &str) -> u64 {
        hash_bytes(self.root, name.as_bytes())
    }

    pub fn rng(&self, name: &str) -> Rng64 {
        Rng64::seed_from_u64(self.seed_for(name))
    }

    /// A child stream, e.g. one per evaluation worker.
    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream::new(self.seed_for(name))
    }
}
