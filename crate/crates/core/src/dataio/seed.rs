use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hierarchical seed derivation.
///
/// A stream is identified by `(master_seed, path)`; the same identifier always
/// yields the same ChaCha stream, so work keyed by (replication, fold, learner)
/// draws the same numbers regardless of how it is scheduled.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTree {
    master_seed: u64,
    path: Vec<u64>,
}

impl SeedTree {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self {
            master_seed: self.master_seed,
            path,
        }
    }

    /// Single 64-bit digest of the node, for APIs that take a plain seed.
    pub fn derive_u64(&self) -> u64 {
        let mut h = splitmix64(self.master_seed ^ 0x5EED_7EE5_0000_0001);
        for (depth, &label) in self.path.iter().enumerate() {
            h = splitmix64(h ^ splitmix64(label.wrapping_add((depth as u64 + 1) << 56)));
        }
        h
    }

    pub fn seed_bytes(&self) -> [u8; 32] {
        let mut state = self.derive_u64();
        let mut out = [0u8; 32];
        for chunk in out.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        out
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed_bytes())
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
