//! SHA-256 digests with a small length-prefixed multi-part helper so
//! commitments and key-derivation hashes are unambiguous.

use sha2::{Digest, Sha256};

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub struct MessageDigest(pub [u8; 32]);

impl MessageDigest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// SHA-256 of a single byte string.
pub fn sha256(data: &[u8]) -> MessageDigest {
    let mut hasher = Sha256::new();
    hasher.update(data);
    MessageDigest(hasher.finalize().into())
}

/// Domain-separated SHA-256 over several parts. Each part is preceded by
/// its 4-byte big-endian length, and the tag by its 1-byte length, so no
/// two distinct inputs collide structurally.
pub fn sha256_parts(tag: &str, parts: &[&[u8]]) -> MessageDigest {
    let mut hasher = Sha256::new();
    hasher.update([tag.len() as u8]);
    hasher.update(tag.as_bytes());
    for part in parts {
        hasher.update((part.len() as u32).to_be_bytes());
        hasher.update(part);
    }
    MessageDigest(hasher.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_published_empty_string_digest() {
        assert_eq!(
            sha256(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn parts_are_framed_not_concatenated() {
        let a = sha256_parts("t", &[b"ab", b"c"]);
        let b = sha256_parts("t", &[b"a", b"bc"]);
        let c = sha256_parts("u", &[b"ab", b"c"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, sha256_parts("t", &[b"ab", b"c"]));
    }
}
