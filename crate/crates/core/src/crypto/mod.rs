//! Cryptographic primitives: a runtime-parameterized short-Weierstrass
//! group, SHA-256 digests, plain single-signer ECDSA, and a Paillier
//! homomorphic scheme sized to absorb the blinding used by two-party
//! signing.
//!
//! Curve parameters are plain values rather than compile-time types, so
//! production code runs on secp256k1 while tests can substitute a curve
//! small enough for exhaustive checks.

mod curve;
mod ecdsa;
mod hash;
mod paillier;
mod primes;

pub use curve::{CurveParams, GroupPoint, Scalar};
pub use ecdsa::{digest_scalar, ecdsa_sign, ecdsa_verify, normalize_low_s, EcdsaSignature};
pub use hash::{sha256, sha256_parts, MessageDigest};
pub use paillier::{
    he_keygen, required_modulus_bits, Ciphertext, HePublicKey, HomomorphicKeyPair,
};
pub use primes::gen_prime;

use thiserror::Error;

/// Failures from primitive operations. Protocol-level retry policy
/// (fresh nonces on a zero r or s) lives with the caller.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("point is not on the curve")]
    PointNotOnCurve,
    #[error("the point at infinity has no wire encoding")]
    InfinityEncoding,
    #[error("scalar out of range for this group")]
    ScalarOutOfRange,
    #[error("value must be nonzero")]
    ZeroValue,
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error("ciphertext does not decrypt under this key")]
    NotDecryptable,
    #[error("modulus has no square root path for this field")]
    UnsupportedField,
    #[error("curve parameters are inconsistent: {0}")]
    BadParameters(&'static str),
}
