//! Dual-granularity relation modeling for scene graphs.
//!
//! The crate covers the full desk-scale pipeline: a synthetic long-tail
//! scene-graph dataset, a deterministic featurizer standing in for a frozen
//! detector backbone, hybrid-attention encoders for predicate- and
//! triplet-level cues with supervised-contrastive constraints, a second
//! training stage that calibrates tail-class feature distributions from
//! similar head classes and fine-tunes the relation classifier on a
//! balanced real+synthetic set, and the recall-based evaluation suite.

pub mod attention;
pub mod dkt;
pub mod error;
pub mod featurizer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthgraph;
pub mod tensor;
pub mod train;

pub use error::DrmError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DrmError>;

/// Derive a fresh 64-bit seed from a root seed and a purpose tag.
///
/// Keeps independent RNG streams (data generation, init, augmentation,
/// sampling) decoupled while staying fully reproducible.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "init"), derive_seed(7, "augment"));
        assert_ne!(derive_seed(7, "init"), derive_seed(8, "init"));
    }
}
