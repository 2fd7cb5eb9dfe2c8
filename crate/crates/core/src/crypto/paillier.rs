//! Paillier encryption: additively homomorphic over Z_N with support for
//! multiplying a ciphertext by a plaintext scalar. The two-party signer
//! relies on both operations plus a modulus large enough that its
//! blinded intermediate value never wraps.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use super::curve::{mod_inv, CurveParams};
use super::primes::gen_prime;
use super::CryptoError;

/// Public half: the modulus N (and cached N^2).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HePublicKey {
    modulus: BigUint,
    modulus_sq: BigUint,
}

#[derive(Clone, PartialEq, Eq, Debug)]
struct HePrivateKey {
    lambda: BigUint,
    mu: BigUint,
}

/// Full keypair. Only the decrypting side of the two-party protocol
/// holds one of these; its counterparty sees just the public key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HomomorphicKeyPair {
    public: HePublicKey,
    secret: HePrivateKey,
}

/// An encryption of a value in [0, N).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    /// 4-byte big-endian length prefix + big-endian magnitude.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.0.to_bytes_be();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(Ciphertext, usize), CryptoError> {
        if bytes.len() < 4 {
            return Err(CryptoError::Malformed("ciphertext length prefix"));
        }
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if bytes.len() < 4 + len {
            return Err(CryptoError::Malformed("ciphertext body"));
        }
        Ok((
            Ciphertext(BigUint::from_bytes_be(&bytes[4..4 + len])),
            4 + len,
        ))
    }
}

/// Smallest modulus width (bits) safe for two-party signing over the
/// given curve: the blinded plaintext is bounded by n^2 + n + rho*n with
/// rho < n, so anything past 3*log2(n) leaves headroom. A small floor
/// keeps toy curves functional.
pub fn required_modulus_bits(curve: &CurveParams) -> u64 {
    (3 * curve.n.bits() + 16).max(64)
}

/// Generates N = p*q from two primes of half the requested width.
pub fn he_keygen<R: RngCore + ?Sized>(modulus_bits: u64, rng: &mut R) -> HomomorphicKeyPair {
    let half = modulus_bits.div_ceil(2);
    loop {
        let p = gen_prime(half, rng);
        let q = gen_prime(half, rng);
        if p == q {
            continue;
        }
        let modulus = &p * &q;
        let lambda = (&p - BigUint::one()).lcm(&(&q - BigUint::one()));
        // With g = N + 1, decryption reduces to mu = lambda^-1 mod N.
        let mu = match mod_inv(&lambda, &modulus) {
            Some(v) => v,
            None => continue,
        };
        let modulus_sq = &modulus * &modulus;
        return HomomorphicKeyPair {
            public: HePublicKey {
                modulus,
                modulus_sq,
            },
            secret: HePrivateKey { lambda, mu },
        };
    }
}

impl HePublicKey {
    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    /// Rebuilds a public key received over the wire (it is just N).
    pub fn from_modulus(modulus: BigUint) -> HePublicKey {
        let modulus_sq = &modulus * &modulus;
        HePublicKey {
            modulus,
            modulus_sq,
        }
    }

    /// Enc(m; r) = (1 + m*N) * r^N mod N^2 with r uniform in Z_N*.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Ciphertext {
        let m = m % &self.modulus;
        let r = loop {
            let r = rng.gen_biguint_below(&self.modulus);
            if !r.is_zero() && r.gcd(&self.modulus).is_one() {
                break r;
            }
        };
        let gm = (BigUint::one() + m * &self.modulus) % &self.modulus_sq;
        let rn = r.modpow(&self.modulus, &self.modulus_sq);
        Ciphertext((gm * rn) % &self.modulus_sq)
    }

    /// Enc(a) (+) Enc(b) = Enc(a + b mod N).
    pub fn he_add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext((&a.0 * &b.0) % &self.modulus_sq)
    }

    /// Enc(a) (*) t = Enc(a * t mod N).
    pub fn he_scalar_mul(&self, a: &Ciphertext, t: &BigUint) -> Ciphertext {
        Ciphertext(a.0.modpow(t, &self.modulus_sq))
    }
}

impl HomomorphicKeyPair {
    pub fn public(&self) -> &HePublicKey {
        &self.public
    }

    /// Recovers the plaintext. Fails when the ciphertext was not formed
    /// under this key: the intermediate (c^lambda - 1) must be an exact
    /// multiple of N, which holds with negligible probability otherwise.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        let public = &self.public;
        if c.0 >= public.modulus_sq || c.0.is_zero() {
            return Err(CryptoError::NotDecryptable);
        }
        let u = c.0.modpow(&self.secret.lambda, &public.modulus_sq);
        let shifted = (&u + &public.modulus_sq - BigUint::one()) % &public.modulus_sq;
        let (quotient, remainder) = shifted.div_rem(&public.modulus);
        if !remainder.is_zero() {
            return Err(CryptoError::NotDecryptable);
        }
        Ok((quotient * &self.secret.mu) % &public.modulus)
    }
}
