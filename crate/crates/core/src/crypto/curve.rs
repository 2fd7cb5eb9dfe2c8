//! Short-Weierstrass group arithmetic over a runtime-chosen prime field.
//!
//! Points are affine on the outside; scalar multiplication runs in
//! Jacobian coordinates internally so it performs one field inversion per
//! multiplication instead of one per bit.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use std::sync::OnceLock;

use super::CryptoError;

/// An element of the scalar field (integers mod the group order).
///
/// Values are always kept reduced; construction goes through
/// [`CurveParams`] so the modulus is applied consistently.
#[derive(Clone, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub struct Scalar(BigUint);

impl Scalar {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

/// A point on the curve, affine or the identity.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub enum GroupPoint {
    Infinity,
    Affine { x: BigUint, y: BigUint },
}

impl GroupPoint {
    pub fn is_infinity(&self) -> bool {
        matches!(self, GroupPoint::Infinity)
    }

    /// Affine x coordinate; `None` for the identity.
    pub fn x(&self) -> Option<&BigUint> {
        match self {
            GroupPoint::Infinity => None,
            GroupPoint::Affine { x, .. } => Some(x),
        }
    }

    pub fn y(&self) -> Option<&BigUint> {
        match self {
            GroupPoint::Infinity => None,
            GroupPoint::Affine { y, .. } => Some(y),
        }
    }
}

/// Domain and group parameters: y^2 = x^3 + a*x + b over F_p, a base
/// point of prime order n.
#[derive(Debug)]
pub struct CurveParams {
    pub p: BigUint,
    pub a: BigUint,
    pub b: BigUint,
    pub n: BigUint,
    g: GroupPoint,
    field_bytes: usize,
    scalar_bytes: usize,
}

impl Clone for CurveParams {
    fn clone(&self) -> Self {
        CurveParams {
            p: self.p.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            n: self.n.clone(),
            g: self.g.clone(),
            field_bytes: self.field_bytes,
            scalar_bytes: self.scalar_bytes,
        }
    }
}

impl PartialEq for CurveParams {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.a == other.a && self.b == other.b && self.n == other.n
    }
}
impl Eq for CurveParams {}

fn hex_uint(s: &str) -> BigUint {
    BigUint::parse_bytes(s.as_bytes(), 16).expect("valid hex literal")
}

impl CurveParams {
    /// Builds and validates a parameter set. The base point must lie on
    /// the curve and have order exactly `n`.
    pub fn new(
        p: BigUint,
        a: BigUint,
        b: BigUint,
        gx: BigUint,
        gy: BigUint,
        n: BigUint,
    ) -> Result<Self, CryptoError> {
        let field_bytes = ((p.bits() + 7) / 8) as usize;
        let scalar_bytes = ((n.bits() + 7) / 8) as usize;
        let g = GroupPoint::Affine { x: gx, y: gy };
        let params = CurveParams {
            p,
            a,
            b,
            n,
            g,
            field_bytes,
            scalar_bytes,
        };
        if params.p.bits() < 3 || params.n.bits() < 2 {
            return Err(CryptoError::BadParameters("modulus too small"));
        }
        if !params.is_on_curve(&params.g) {
            return Err(CryptoError::BadParameters("base point not on curve"));
        }
        let order_check = params.mul(&params.g, &Scalar(params.n.clone() % &params.n));
        // n reduces to zero mod n, so multiply by n via the raw routine.
        let full = params.mul_raw(&params.g, &params.n);
        if !order_check.is_infinity() || !full.is_infinity() {
            return Err(CryptoError::BadParameters("base point order mismatch"));
        }
        Ok(params)
    }

    /// The secp256k1 parameter set.
    pub fn secp256k1() -> CurveParams {
        static CACHE: OnceLock<CurveParams> = OnceLock::new();
        CACHE
            .get_or_init(|| {
                CurveParams::new(
                    hex_uint("FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F"),
                    BigUint::zero(),
                    BigUint::from(7u32),
                    hex_uint("79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798"),
                    hex_uint("483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8"),
                    hex_uint("FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141"),
                )
                .expect("secp256k1 constants are valid")
            })
            .clone()
    }

    /// A deliberately tiny (and totally insecure) curve for exhaustive
    /// tests. Found by scanning small coefficients over a fixed prime
    /// until the group order is prime, so the result is deterministic.
    pub fn toy() -> CurveParams {
        static CACHE: OnceLock<CurveParams> = OnceLock::new();
        CACHE
            .get_or_init(|| {
                let p = 1019u32;
                for a in 1u32..32 {
                    for b in 1u32..32 {
                        if let Some(curve) = toy_candidate(p, a, b) {
                            return curve;
                        }
                    }
                }
                unreachable!("small coefficient scan always finds a prime-order curve")
            })
            .clone()
    }

    pub fn generator(&self) -> &GroupPoint {
        &self.g
    }

    /// Width of one serialized field element in bytes.
    pub fn field_bytes(&self) -> usize {
        self.field_bytes
    }

    /// Width of one serialized scalar in bytes.
    pub fn scalar_bytes(&self) -> usize {
        self.scalar_bytes
    }

    // ---- scalar field -------------------------------------------------

    /// Reduces an arbitrary integer into the scalar field.
    pub fn scalar(&self, v: impl Into<BigUint>) -> Scalar {
        Scalar(v.into() % &self.n)
    }

    /// Interprets big-endian bytes, reduced mod n. Used for
    /// hash-to-scalar conversions.
    pub fn scalar_from_bytes_reduced(&self, bytes: &[u8]) -> Scalar {
        Scalar(BigUint::from_bytes_be(bytes) % &self.n)
    }

    /// Decodes a fixed-width big-endian scalar, rejecting values >= n.
    pub fn scalar_decode(&self, bytes: &[u8]) -> Result<Scalar, CryptoError> {
        if bytes.len() != self.scalar_bytes {
            return Err(CryptoError::Malformed("scalar width"));
        }
        let v = BigUint::from_bytes_be(bytes);
        if v >= self.n {
            return Err(CryptoError::ScalarOutOfRange);
        }
        Ok(Scalar(v))
    }

    /// Fixed-width big-endian encoding.
    pub fn scalar_encode(&self, s: &Scalar) -> Vec<u8> {
        let mut out = s.0.to_bytes_be();
        while out.len() < self.scalar_bytes {
            out.insert(0, 0);
        }
        out
    }

    /// Uniform nonzero scalar.
    pub fn random_scalar<R: RngCore + ?Sized>(&self, rng: &mut R) -> Scalar {
        loop {
            let v = rng.gen_biguint_below(&self.n);
            if !v.is_zero() {
                return Scalar(v);
            }
        }
    }

    pub fn scalar_add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &b.0) % &self.n)
    }

    pub fn scalar_sub(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &self.n - &b.0) % &self.n)
    }

    pub fn scalar_mul(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 * &b.0) % &self.n)
    }

    pub fn scalar_neg(&self, a: &Scalar) -> Scalar {
        if a.0.is_zero() {
            Scalar(BigUint::zero())
        } else {
            Scalar(&self.n - &a.0)
        }
    }

    /// Multiplicative inverse mod n; errors on zero.
    pub fn scalar_inv(&self, a: &Scalar) -> Result<Scalar, CryptoError> {
        if a.0.is_zero() {
            return Err(CryptoError::ZeroValue);
        }
        mod_inv(&a.0, &self.n)
            .map(Scalar)
            .ok_or(CryptoError::ZeroValue)
    }

    // ---- field --------------------------------------------------------

    fn fadd(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + b) % &self.p
    }

    fn fsub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        ((a % &self.p) + &self.p - (b % &self.p)) % &self.p
    }

    fn fmul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    fn finv(&self, a: &BigUint) -> Option<BigUint> {
        mod_inv(a, &self.p)
    }

    // ---- group --------------------------------------------------------

    pub fn is_on_curve(&self, point: &GroupPoint) -> bool {
        match point {
            GroupPoint::Infinity => true,
            GroupPoint::Affine { x, y } => {
                if x >= &self.p || y >= &self.p {
                    return false;
                }
                let lhs = self.fmul(y, y);
                let rhs = self.fadd(
                    &self.fadd(&self.fmul(&self.fmul(x, x), x), &self.fmul(&self.a, x)),
                    &self.b,
                );
                lhs == rhs
            }
        }
    }

    pub fn neg(&self, point: &GroupPoint) -> GroupPoint {
        match point {
            GroupPoint::Infinity => GroupPoint::Infinity,
            GroupPoint::Affine { x, y } => {
                if y.is_zero() {
                    GroupPoint::Affine {
                        x: x.clone(),
                        y: y.clone(),
                    }
                } else {
                    GroupPoint::Affine {
                        x: x.clone(),
                        y: &self.p - y,
                    }
                }
            }
        }
    }

    /// Affine point addition.
    pub fn add(&self, p1: &GroupPoint, p2: &GroupPoint) -> GroupPoint {
        match (p1, p2) {
            (GroupPoint::Infinity, _) => p2.clone(),
            (_, GroupPoint::Infinity) => p1.clone(),
            (GroupPoint::Affine { x: x1, y: y1 }, GroupPoint::Affine { x: x2, y: y2 }) => {
                if x1 == x2 {
                    if self.fadd(y1, y2).is_zero() {
                        return GroupPoint::Infinity;
                    }
                    return self.double(p1);
                }
                let dx = self.fsub(x2, x1);
                let dy = self.fsub(y2, y1);
                let lam = self.fmul(&dy, &self.finv(&dx).expect("x1 != x2 so dx invertible"));
                let x3 = self.fsub(&self.fsub(&self.fmul(&lam, &lam), x1), x2);
                let y3 = self.fsub(&self.fmul(&lam, &self.fsub(x1, &x3)), y1);
                GroupPoint::Affine { x: x3, y: y3 }
            }
        }
    }

    pub fn double(&self, point: &GroupPoint) -> GroupPoint {
        match point {
            GroupPoint::Infinity => GroupPoint::Infinity,
            GroupPoint::Affine { x, y } => {
                if y.is_zero() {
                    return GroupPoint::Infinity;
                }
                let three = BigUint::from(3u32);
                let num = self.fadd(&self.fmul(&three, &self.fmul(x, x)), &self.a);
                let den = self.fmul(&BigUint::from(2u32), y);
                let lam = self.fmul(&num, &self.finv(&den).expect("y nonzero so 2y invertible"));
                let x3 = self.fsub(&self.fsub(&self.fmul(&lam, &lam), x), x);
                let y3 = self.fsub(&self.fmul(&lam, &self.fsub(x, &x3)), y);
                GroupPoint::Affine { x: x3, y: y3 }
            }
        }
    }

    /// Scalar multiplication k * P. A zero scalar yields the identity.
    pub fn mul(&self, point: &GroupPoint, k: &Scalar) -> GroupPoint {
        self.mul_raw(point, &k.0)
    }

    /// k * G.
    pub fn mul_g(&self, k: &Scalar) -> GroupPoint {
        self.mul_raw(&self.g.clone(), &k.0)
    }

    fn mul_raw(&self, point: &GroupPoint, k: &BigUint) -> GroupPoint {
        if k.is_zero() || point.is_infinity() {
            return GroupPoint::Infinity;
        }
        let base = Jacobian::from_affine(point);
        let mut acc = Jacobian::infinity();
        for i in (0..k.bits()).rev() {
            acc = self.jac_double(&acc);
            if k.bit(i) {
                acc = self.jac_add(&acc, &base);
            }
        }
        self.jac_to_affine(&acc)
    }

    // ---- Jacobian internals --------------------------------------------

    fn jac_double(&self, pt: &Jacobian) -> Jacobian {
        if pt.is_infinity() || pt.y.is_zero() {
            return Jacobian::infinity();
        }
        let y2 = self.fmul(&pt.y, &pt.y);
        let s = self.fmul(
            &BigUint::from(4u32),
            &self.fmul(&pt.x, &y2),
        );
        let z2 = self.fmul(&pt.z, &pt.z);
        let m = self.fadd(
            &self.fmul(&BigUint::from(3u32), &self.fmul(&pt.x, &pt.x)),
            &self.fmul(&self.a, &self.fmul(&z2, &z2)),
        );
        let x3 = self.fsub(&self.fmul(&m, &m), &self.fadd(&s, &s));
        let y4 = self.fmul(&y2, &y2);
        let y3 = self.fsub(
            &self.fmul(&m, &self.fsub(&s, &x3)),
            &self.fmul(&BigUint::from(8u32), &y4),
        );
        let z3 = self.fmul(&BigUint::from(2u32), &self.fmul(&pt.y, &pt.z));
        Jacobian { x: x3, y: y3, z: z3 }
    }

    fn jac_add(&self, p1: &Jacobian, p2: &Jacobian) -> Jacobian {
        if p1.is_infinity() {
            return p2.clone();
        }
        if p2.is_infinity() {
            return p1.clone();
        }
        let z1z1 = self.fmul(&p1.z, &p1.z);
        let z2z2 = self.fmul(&p2.z, &p2.z);
        let u1 = self.fmul(&p1.x, &z2z2);
        let u2 = self.fmul(&p2.x, &z1z1);
        let s1 = self.fmul(&p1.y, &self.fmul(&z2z2, &p2.z));
        let s2 = self.fmul(&p2.y, &self.fmul(&z1z1, &p1.z));
        if u1 == u2 {
            if s1 != s2 {
                return Jacobian::infinity();
            }
            return self.jac_double(p1);
        }
        let h = self.fsub(&u2, &u1);
        let r = self.fsub(&s2, &s1);
        let h2 = self.fmul(&h, &h);
        let h3 = self.fmul(&h, &h2);
        let u1h2 = self.fmul(&u1, &h2);
        let x3 = self.fsub(
            &self.fsub(&self.fmul(&r, &r), &h3),
            &self.fadd(&u1h2, &u1h2),
        );
        let y3 = self.fsub(
            &self.fmul(&r, &self.fsub(&u1h2, &x3)),
            &self.fmul(&s1, &h3),
        );
        let z3 = self.fmul(&h, &self.fmul(&p1.z, &p2.z));
        Jacobian { x: x3, y: y3, z: z3 }
    }

    fn jac_to_affine(&self, pt: &Jacobian) -> GroupPoint {
        if pt.is_infinity() {
            return GroupPoint::Infinity;
        }
        let zi = self.finv(&pt.z).expect("nonzero z");
        let zi2 = self.fmul(&zi, &zi);
        let x = self.fmul(&pt.x, &zi2);
        let y = self.fmul(&pt.y, &self.fmul(&zi2, &zi));
        GroupPoint::Affine { x, y }
    }

    // ---- wire encoding --------------------------------------------------

    /// Compressed encoding: one parity byte (0x02 even, 0x03 odd)
    /// followed by the big-endian x coordinate at field width. 33 bytes
    /// on secp256k1.
    pub fn point_encode(&self, point: &GroupPoint) -> Result<Vec<u8>, CryptoError> {
        match point {
            GroupPoint::Infinity => Err(CryptoError::InfinityEncoding),
            GroupPoint::Affine { x, y } => {
                let mut out = Vec::with_capacity(1 + self.field_bytes);
                out.push(if y.is_odd() { 0x03 } else { 0x02 });
                let mut xb = x.to_bytes_be();
                while xb.len() < self.field_bytes {
                    xb.insert(0, 0);
                }
                out.extend_from_slice(&xb);
                Ok(out)
            }
        }
    }

    /// Decodes a compressed point, solving for y. Requires p = 3 mod 4
    /// (true for secp256k1 and the toy curve).
    pub fn point_decode(&self, bytes: &[u8]) -> Result<GroupPoint, CryptoError> {
        if bytes.len() != 1 + self.field_bytes {
            return Err(CryptoError::Malformed("point width"));
        }
        let parity = match bytes[0] {
            0x02 => 0u8,
            0x03 => 1u8,
            _ => return Err(CryptoError::Malformed("point prefix")),
        };
        let x = BigUint::from_bytes_be(&bytes[1..]);
        if x >= self.p {
            return Err(CryptoError::PointNotOnCurve);
        }
        if &self.p % 4u32 != BigUint::from(3u32) {
            return Err(CryptoError::UnsupportedField);
        }
        let rhs = self.fadd(
            &self.fadd(&self.fmul(&self.fmul(&x, &x), &x), &self.fmul(&self.a, &x)),
            &self.b,
        );
        let exp = (&self.p + BigUint::one()) >> 2;
        let mut y = rhs.modpow(&exp, &self.p);
        if self.fmul(&y, &y) != rhs {
            return Err(CryptoError::PointNotOnCurve);
        }
        if (y.is_odd() as u8) != parity {
            y = &self.p - &y;
        }
        let point = GroupPoint::Affine { x, y };
        debug_assert!(self.is_on_curve(&point));
        Ok(point)
    }
}

#[derive(Clone)]
struct Jacobian {
    x: BigUint,
    y: BigUint,
    z: BigUint,
}

impl Jacobian {
    fn infinity() -> Jacobian {
        Jacobian {
            x: BigUint::one(),
            y: BigUint::one(),
            z: BigUint::zero(),
        }
    }

    fn from_affine(point: &GroupPoint) -> Jacobian {
        match point {
            GroupPoint::Infinity => Jacobian::infinity(),
            GroupPoint::Affine { x, y } => Jacobian {
                x: x.clone(),
                y: y.clone(),
                z: BigUint::one(),
            },
        }
    }

    fn is_infinity(&self) -> bool {
        self.z.is_zero()
    }
}

/// Modular inverse via extended Euclid; `None` when gcd(a, m) != 1.
pub(crate) fn mod_inv(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from(a % m);
    let m_int = BigInt::from(m.clone());
    let ext = a.extended_gcd(&m_int);
    if !ext.gcd.is_one() {
        return None;
    }
    let mut x = ext.x % &m_int;
    if x < BigInt::zero() {
        x += &m_int;
    }
    Some(x.to_biguint().expect("normalized to nonnegative"))
}

fn toy_candidate(p: u32, a: u32, b: u32) -> Option<CurveParams> {
    // Non-singular check: 4a^3 + 27b^2 != 0 mod p.
    let pb = BigUint::from(p);
    let disc = (4 * a as u64 * a as u64 % p as u64 * a as u64 + 27 * b as u64 * b as u64) % p as u64;
    if disc == 0 {
        return None;
    }
    // Count points by summing quadratic-residue indicators per x.
    let legendre_exp = BigUint::from((p - 1) / 2);
    let mut order: u64 = 1; // identity
    let mut gen: Option<(u32, u32)> = None;
    for x in 0..p {
        let rhs = ((x as u64 * x as u64 % p as u64 * x as u64) + a as u64 * x as u64 + b as u64)
            % p as u64;
        if rhs == 0 {
            order += 1;
            continue;
        }
        let chi = BigUint::from(rhs).modpow(&legendre_exp, &pb);
        if chi == BigUint::one() {
            order += 2;
            if gen.is_none() {
                let sqrt_exp = BigUint::from((p + 1) / 4);
                let y = BigUint::from(rhs).modpow(&sqrt_exp, &pb);
                let y32: u32 = y.try_into().ok()?;
                gen = Some((x, y32));
            }
        }
    }
    if !is_small_prime(order) {
        return None;
    }
    let (gx, gy) = gen?;
    CurveParams::new(
        pb,
        BigUint::from(a),
        BigUint::from(b),
        BigUint::from(gx),
        BigUint::from(gy),
        BigUint::from(order),
    )
    .ok()
}

fn is_small_prime(v: u64) -> bool {
    if v < 2 {
        return false;
    }
    let mut d = 2u64;
    while d * d <= v {
        if v % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Independent affine-only evaluator used as the oracle: no shared
    /// code with the Jacobian path above beyond BigUint itself.
    fn oracle_add(curve: &CurveParams, p1: &GroupPoint, p2: &GroupPoint) -> GroupPoint {
        let p = &curve.p;
        match (p1, p2) {
            (GroupPoint::Infinity, q) => q.clone(),
            (q, GroupPoint::Infinity) => q.clone(),
            (GroupPoint::Affine { x: x1, y: y1 }, GroupPoint::Affine { x: x2, y: y2 }) => {
                let lam = if x1 == x2 {
                    if (y1 + y2) % p == BigUint::zero() {
                        return GroupPoint::Infinity;
                    }
                    let num = (BigUint::from(3u32) * x1 * x1 + &curve.a) % p;
                    let den = (BigUint::from(2u32) * y1) % p;
                    (num * den.modpow(&(p - BigUint::from(2u32)), p)) % p
                } else {
                    let num = ((y2 + p) - y1) % p;
                    let den = ((x2 + p) - x1) % p;
                    (num * den.modpow(&(p - BigUint::from(2u32)), p)) % p
                };
                let x3 = ((&lam * &lam) + BigUint::from(2u32) * p - x1 - x2) % p;
                let y3 = ((&lam * (((x1 + p) - &x3) % p)) + p - (y1 % p)) % p;
                GroupPoint::Affine { x: x3, y: y3 }
            }
        }
    }

    fn oracle_mul(curve: &CurveParams, point: &GroupPoint, k: &BigUint) -> GroupPoint {
        let mut acc = GroupPoint::Infinity;
        let mut addend = point.clone();
        for i in 0..k.bits() {
            if k.bit(i) {
                acc = oracle_add(curve, &acc, &addend);
            }
            addend = oracle_add(curve, &addend, &addend);
        }
        acc
    }

    #[test]
    fn secp256k1_base_point_checks() {
        let curve = CurveParams::secp256k1();
        assert!(curve.is_on_curve(curve.generator()));
        assert_eq!(curve.field_bytes(), 32);
        assert_eq!(curve.scalar_bytes(), 32);
        let n_minus_1 = curve.scalar(&curve.n - BigUint::one());
        let neg_g = curve.mul_g(&n_minus_1);
        assert_eq!(neg_g, curve.neg(curve.generator()));
        assert_eq!(
            curve.add(&neg_g, curve.generator()),
            GroupPoint::Infinity
        );
    }

    #[test]
    fn group_law_matches_oracle_on_secp256k1() {
        let curve = CurveParams::secp256k1();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..8 {
            let k = curve.random_scalar(&mut rng);
            let fast = curve.mul_g(&k);
            let slow = oracle_mul(&curve, curve.generator(), k.value());
            assert_eq!(fast, slow);
            assert!(curve.is_on_curve(&fast));
        }
    }

    #[test]
    fn scalar_mul_is_compatible_with_scalar_field() {
        // a*(b*G) == (a*b mod n)*G on both curves.
        for curve in [CurveParams::toy(), CurveParams::secp256k1()] {
            let mut rng = ChaCha20Rng::seed_from_u64(11);
            for _ in 0..16 {
                let a = curve.random_scalar(&mut rng);
                let b = curve.random_scalar(&mut rng);
                let lhs = curve.mul(&curve.mul_g(&b), &a);
                let rhs = curve.mul_g(&curve.scalar_mul(&a, &b));
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn toy_curve_exhaustive_group_law() {
        let curve = CurveParams::toy();
        assert!(curve.is_on_curve(curve.generator()));
        // Walk the whole group by repeated addition; order must match n
        // and every element must satisfy the curve equation.
        let mut seen = 1u64; // identity
        let mut acc = curve.generator().clone();
        while !acc.is_infinity() {
            assert!(curve.is_on_curve(&acc));
            seen += 1;
            acc = curve.add(&acc, curve.generator());
        }
        assert_eq!(BigUint::from(seen), curve.n);

        // Spot-check associativity and commutativity against the oracle.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..64 {
            let a = curve.random_scalar(&mut rng);
            let b = curve.random_scalar(&mut rng);
            let pa = curve.mul_g(&a);
            let pb = curve.mul_g(&b);
            assert_eq!(curve.add(&pa, &pb), curve.add(&pb, &pa));
            assert_eq!(curve.add(&pa, &pb), oracle_add(&curve, &pa, &pb));
            assert_eq!(curve.mul(&pa, &b), oracle_mul(&curve, &pa, b.value()));
        }
    }

    #[test]
    fn point_codec_round_trip() {
        let toy = CurveParams::toy();
        let mut acc = toy.generator().clone();
        while !acc.is_infinity() {
            let enc = toy.point_encode(&acc).unwrap();
            assert_eq!(enc.len(), 1 + toy.field_bytes());
            assert_eq!(toy.point_decode(&enc).unwrap(), acc);
            acc = toy.add(&acc, toy.generator());
        }

        let curve = CurveParams::secp256k1();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..8 {
            let k = curve.random_scalar(&mut rng);
            let point = curve.mul_g(&k);
            let enc = curve.point_encode(&point).unwrap();
            assert_eq!(enc.len(), 33);
            assert_eq!(curve.point_decode(&enc).unwrap(), point);
        }
    }

    #[test]
    fn point_decode_rejects_bad_input() {
        let curve = CurveParams::secp256k1();
        let enc = curve.point_encode(curve.generator()).unwrap();

        let mut wrong_prefix = enc.clone();
        wrong_prefix[0] = 0x04;
        assert!(curve.point_decode(&wrong_prefix).is_err());

        assert!(curve.point_decode(&enc[..32]).is_err());

        // x with no y^2 solution: scan from G.x + 1 upward.
        let mut x = curve.generator().x().unwrap().clone() + BigUint::one();
        loop {
            let mut cand = vec![0x02];
            let mut xb = x.to_bytes_be();
            while xb.len() < 32 {
                xb.insert(0, 0);
            }
            cand.extend_from_slice(&xb);
            if curve.point_decode(&cand).is_err() {
                break;
            }
            x += BigUint::one();
        }
    }

    #[test]
    fn scalar_codec_and_inverse() {
        let curve = CurveParams::secp256k1();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..32 {
            let s = curve.random_scalar(&mut rng);
            let enc = curve.scalar_encode(&s);
            assert_eq!(enc.len(), 32);
            assert_eq!(curve.scalar_decode(&enc).unwrap(), s);
            let inv = curve.scalar_inv(&s).unwrap();
            assert_eq!(curve.scalar_mul(&s, &inv), curve.scalar(1u32));
        }
        let n_bytes = {
            let mut b = curve.n.to_bytes_be();
            while b.len() < 32 {
                b.insert(0, 0);
            }
            b
        };
        assert!(curve.scalar_decode(&n_bytes).is_err());
        assert!(curve.scalar_inv(&curve.scalar(0u32)).is_err());
    }
}
