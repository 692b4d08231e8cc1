//! Deterministic seed derivation.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! root seed, a purpose tag, and integer indices. Streams are stateless
//! functions of those inputs, which is what makes checkpoint resume and
//! parallel execution bit-reproducible: nothing depends on draw order
//! elsewhere in the program.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte seed from (root, tag, indices).
pub fn derive_seed(root: u64, tag: &str, idxs: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0xFF]);
    h.update(tag.as_bytes());
    for &i in idxs {
        h.update([0xFE]);
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

/// A ChaCha stream for (root, tag, indices).
pub fn substream(root: u64, tag: &str, idxs: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, tag, idxs))
}

/// A u64 sub-seed, for handing onward as another root.
pub fn subseed(root: u64, tag: &str, idxs: &[u64]) -> u64 {
    let bytes = derive_seed(root, tag, idxs);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
