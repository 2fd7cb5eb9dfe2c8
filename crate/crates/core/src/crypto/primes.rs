//! Probable-prime generation for the homomorphic modulus: trial division
//! by a small sieve, then Miller-Rabin with bases drawn from the
//! caller's RNG, so results are reproducible under a seeded generator.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;
use std::sync::OnceLock;

const MILLER_RABIN_ROUNDS: usize = 24;

fn small_primes() -> &'static [u64] {
    static SIEVE: OnceLock<Vec<u64>> = OnceLock::new();
    SIEVE.get_or_init(|| {
        let limit = 2000usize;
        let mut composite = vec![false; limit + 1];
        let mut out = Vec::new();
        for i in 2..=limit {
            if !composite[i] {
                out.push(i as u64);
                let mut j = i * i;
                while j <= limit {
                    composite[j] = true;
                    j += i;
                }
            }
        }
        out
    })
}

/// Miller-Rabin with `rounds` random bases.
pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(
    candidate: &BigUint,
    rounds: usize,
    rng: &mut R,
) -> bool {
    let two = BigUint::from(2u32);
    if candidate < &two {
        return false;
    }
    for &sp in small_primes() {
        let spb = BigUint::from(sp);
        if candidate == &spb {
            return true;
        }
        if (candidate % &spb).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let minus_one = candidate - &one;
    let trailing = minus_one.trailing_zeros().unwrap_or(0);
    let odd_part = &minus_one >> trailing;
    'witness: for _ in 0..rounds {
        let base = rng.gen_biguint_range(&two, &minus_one);
        let mut x = base.modpow(&odd_part, candidate);
        if x == one || x == minus_one {
            continue;
        }
        for _ in 1..trailing {
            x = (&x * &x) % candidate;
            if x == minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Generates a probable prime of exactly `bits` bits.
pub fn gen_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 8, "prime size too small to be useful");
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}
