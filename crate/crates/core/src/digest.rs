//! Content digests and named seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 32-hex-char digest over an ordered list of fields.
///
/// Each field is length-prefixed, so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn content_id(fields: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    let digest = hasher.finalize();
    hex::encode(&digest[..16])
}

/// Derive an independent sub-seed from a root seed and a stream name.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A portable, seeded RNG for the named stream.
pub fn named_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(root, name))
}

/// Deterministic uniform draw in `[0, 1)` for a named event.
pub fn unit_draw(root: u64, name: &str) -> f64 {
    (sub_seed(root, name) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_id_is_32_hex() {
        let id = content_id(&["a", "b"]);
        assert_eq!(id.len(), 32);
        assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn field_boundaries_matter() {
        assert_ne!(content_id(&["ab", "c"]), content_id(&["a", "bc"]));
    }

    #[test]
    fn sub_seeds_differ_by_name() {
        assert_ne!(sub_seed(7, "mix"), sub_seed(7, "review"));
        assert_eq!(sub_seed(7, "mix"), sub_seed(7, "mix"));
        let u = unit_draw(1, "x");
        assert!((0.0..1.0).contains(&u));
    }
}
