use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A named, seeded source of randomness.
///
/// Equal `(seed, label)` pairs always produce the same draw sequence, on every
/// platform. Child streams are derived by extending the label, so adding a new
/// consumer never perturbs the draws of an existing one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        RngStream {
            seed,
            label: label.into(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn derive(&self, child: impl std::fmt::Display) -> RngStream {
        RngStream {
            seed: self.seed,
            label: format!("{}/{}", self.label, child),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.label.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }
}
