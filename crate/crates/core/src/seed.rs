//! Per-subsystem random streams derived from one root seed.
//!
//! Each stream is a ChaCha8 generator keyed by
//! `SHA-256(root_seed as u64 LE || subsystem name)`, so adding draws in one
//! subsystem never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const AUGMENT: &str = "augment";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const PROBE: &str = "probe";
pub const KMEANS: &str = "kmeans";
pub const CORPUS: &str = "corpus";

pub fn derive_seed(root: u64, subsystem: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(subsystem.as_bytes());
    h.finalize().into()
}

pub fn subsystem_rng(root: u64, subsystem: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, subsystem))
}

/// Stream `index` of a subsystem, for draws that must be a pure function
/// of (seed, index), e.g. the shuffle of a given epoch.
pub fn indexed_rng(root: u64, subsystem: &str, index: u64) -> ChaCha8Rng {
    let mut rng = subsystem_rng(root, subsystem);
    rng.set_stream(index);
    rng
}

/// Serialisable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub const BYTES: usize = 32 + 8 + 16;

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTES);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != Self::BYTES {
            return None;
        }
        Some(Self {
            seed: b[..32].try_into().ok()?,
            stream: u64::from_le_bytes(b[32..40].try_into().ok()?),
            word_pos: u128::from_le_bytes(b[40..56].try_into().ok()?),
        })
    }
}
