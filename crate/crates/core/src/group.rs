//! Safe-prime group arithmetic, distributed ElGamal keys and candidate
//! encoding.
//!
//! All ciphertext components live in the order-`q` subgroup of quadratic
//! residues modulo `p = 2q + 1`. Exponents are reduced modulo `q`; group
//! operations are performed modulo `p`.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prime;

/// Cap on safe-prime candidates examined by [`setup_group`].
const MAX_SETUP_CANDIDATES: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupError {
    #[error("bit length {0} is below the minimum of 16")]
    BitLengthTooSmall(u64),
    #[error("no safe prime found after {0} candidates")]
    SetupExhausted(usize),
    #[error("modulus p is not prime")]
    ModulusNotPrime,
    #[error("subgroup order q is not prime")]
    OrderNotPrime,
    #[error("p is not 2q + 1")]
    NotSafePrime,
    #[error("generator does not generate the order-q subgroup")]
    BadGenerator,
    #[error("public constant lambda is outside [1, q-1]")]
    LambdaOutOfRange,
    #[error("value is not an element of the order-q subgroup")]
    NotInSubgroup,
    #[error("secret exponent is outside [1, q-1]")]
    ExponentOutOfRange,
    #[error("server index {0} appears more than once")]
    DuplicateIndex(usize),
    #[error("server index {0} is missing")]
    MissingIndex(usize),
    #[error("no key shares supplied")]
    NoShares,
    #[error("candidate {0} cannot be encoded injectively in this group")]
    CandidateOutOfRange(u32),
}

/// Public parameters of the cyclic group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    #[serde(with = "crate::hex")]
    pub p: BigUint,
    #[serde(with = "crate::hex")]
    pub q: BigUint,
    #[serde(with = "crate::hex")]
    pub g: BigUint,
    /// Public constant exponent used by the consistency relation.
    #[serde(with = "crate::hex")]
    pub lambda: BigUint,
}

impl GroupParams {
    /// Builds parameters and checks every invariant.
    pub fn new(p: BigUint, q: BigUint, g: BigUint, lambda: BigUint) -> Result<Self, GroupError> {
        let params = Self { p, q, g, lambda };
        params.validate()?;
        Ok(params)
    }

    /// The `p = 23, q = 11, g = 2` desk-scale group with the given lambda.
    pub fn toy(lambda: u32) -> Self {
        Self::new(23u32.into(), 11u32.into(), 2u32.into(), lambda.into()).expect("toy parameters are valid")
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed0f9a11);
        if !prime::is_probable_prime(&self.p, prime::MR_ROUNDS, &mut rng) {
            return Err(GroupError::ModulusNotPrime);
        }
        if !prime::is_probable_prime(&self.q, prime::MR_ROUNDS, &mut rng) {
            return Err(GroupError::OrderNotPrime);
        }
        if self.p != (&self.q << 1) + 1u32 {
            return Err(GroupError::NotSafePrime);
        }
        if self.g.is_one() || !self.in_subgroup(&self.g) {
            return Err(GroupError::BadGenerator);
        }
        if self.lambda.is_zero() || self.lambda >= self.q {
            return Err(GroupError::LambdaOutOfRange);
        }
        Ok(())
    }

    /// Modulus for used seals; the same prime as the ElGamal group.
    pub fn seal_modulus(&self) -> &BigUint {
        &self.p
    }

    pub fn in_subgroup(&self, x: &BigUint) -> bool {
        !x.is_zero() && *x < self.p && x.modpow(&self.q, &self.p).is_one()
    }

    pub fn pow(&self, base: &BigUint, exponent: &BigUint) -> BigUint {
        base.modpow(exponent, &self.p)
    }

    pub fn g_pow(&self, exponent: &BigUint) -> BigUint {
        self.g.modpow(exponent, &self.p)
    }

    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    /// Multiplicative inverse mod p; `None` for zero.
    pub fn inv(&self, a: &BigUint) -> Option<BigUint> {
        let a = a % &self.p;
        if a.is_zero() {
            return None;
        }
        Some(a.modpow(&(&self.p - 2u32), &self.p))
    }

    pub fn div(&self, a: &BigUint, b: &BigUint) -> Option<BigUint> {
        self.inv(b).map(|inv| self.mul(a, &inv))
    }

    pub fn product<'a>(&self, values: impl IntoIterator<Item = &'a BigUint>) -> BigUint {
        values.into_iter().fold(BigUint::one(), |acc, v| self.mul(&acc, v))
    }

    pub fn exp_add(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + b) % &self.q
    }

    pub fn exp_sub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        let b = b % &self.q;
        (a + &self.q - b) % &self.q
    }

    pub fn exp_mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.q
    }

    pub fn exp_inv(&self, a: &BigUint) -> Option<BigUint> {
        let a = a % &self.q;
        if a.is_zero() {
            return None;
        }
        Some(a.modpow(&(&self.q - 2u32), &self.q))
    }

    pub fn exp_sum<'a>(&self, values: impl IntoIterator<Item = &'a BigUint>) -> BigUint {
        values.into_iter().fold(BigUint::zero(), |acc, v| self.exp_add(&acc, v))
    }

    /// Integer representative of a group element, reduced to an exponent.
    pub fn representative(&self, element: &BigUint) -> BigUint {
        element % &self.q
    }

    /// Exponent `a(a + lambda) mod q` tying the third ciphertext of a
    /// revised triple to the plaintext of the first.
    pub fn consistency_exponent(&self, element: &BigUint) -> BigUint {
        let a = self.representative(element);
        let shifted = self.exp_add(&a, &self.lambda);
        self.exp_mul(&a, &shifted)
    }

    /// Uniform exponent in `[1, q-1]`.
    pub fn random_exponent<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_range(&BigUint::one(), &self.q)
    }

    /// Uniform exponent in `[0, q-1]`.
    pub fn random_exponent_or_zero<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.q)
    }

    /// Uniform element of the order-q subgroup.
    pub fn random_element<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        let e = self.random_exponent_or_zero(rng);
        self.g_pow(&e)
    }

    pub fn ensure_subgroup(&self, x: &BigUint) -> Result<(), GroupError> {
        if self.in_subgroup(x) {
            Ok(())
        } else {
            Err(GroupError::NotInSubgroup)
        }
    }
}

/// Generates safe-prime parameters of `bit_length` bits, deterministically
/// for a fixed seed.
pub fn setup_group(bit_length: u64, rng_seed: u64) -> Result<GroupParams, GroupError> {
    if bit_length < 16 {
        return Err(GroupError::BitLengthTooSmall(bit_length));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let (p, q) =
        prime::find_safe_prime(bit_length, MAX_SETUP_CANDIDATES, &mut rng).ok_or(GroupError::SetupExhausted(MAX_SETUP_CANDIDATES))?;
    let two = BigUint::from(2u32);
    let g = loop {
        let h = rng.gen_biguint_range(&two, &(&p - 1u32));
        let g = h.modpow(&two, &p);
        if !g.is_one() {
            break g;
        }
    };
    let lambda = rng.gen_biguint_range(&BigUint::one(), &q);
    GroupParams::new(p, q, g, lambda)
}

/// One mix-server's ElGamal key pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyShare {
    pub server_index: usize,
    #[serde(with = "crate::hex")]
    pub x: BigUint,
    #[serde(with = "crate::hex")]
    pub y: BigUint,
}

impl KeyShare {
    pub fn from_secret(params: &GroupParams, server_index: usize, x: BigUint) -> Result<Self, GroupError> {
        if x.is_zero() || x >= params.q {
            return Err(GroupError::ExponentOutOfRange);
        }
        let y = params.g_pow(&x);
        Ok(Self { server_index, x, y })
    }

    pub fn public(&self) -> PublicShare {
        PublicShare { server_index: self.server_index, y: self.y.clone() }
    }
}

/// The public half of a [`KeyShare`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicShare {
    pub server_index: usize,
    #[serde(with = "crate::hex")]
    pub y: BigUint,
}

pub fn keygen<R: RngCore + ?Sized>(params: &GroupParams, index: usize, rng: &mut R) -> KeyShare {
    let x = params.random_exponent(rng);
    KeyShare::from_secret(params, index, x).expect("sampled in range")
}

/// Joint public key `y* = prod y(q)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedKey {
    #[serde(with = "crate::hex")]
    pub y_star: BigUint,
}

/// Combines public shares; indices must be exactly `1..=Q`.
pub fn combine_keys(params: &GroupParams, shares: &[PublicShare]) -> Result<CombinedKey, GroupError> {
    if shares.is_empty() {
        return Err(GroupError::NoShares);
    }
    let mut seen = vec![false; shares.len() + 1];
    for share in shares {
        let i = share.server_index;
        if i == 0 || i > shares.len() {
            return Err(GroupError::MissingIndex((1..=shares.len()).find(|&k| !shares.iter().any(|s| s.server_index == k)).unwrap_or(1)));
        }
        if seen[i] {
            return Err(GroupError::DuplicateIndex(i));
        }
        seen[i] = true;
    }
    Ok(CombinedKey { y_star: params.product(shares.iter().map(|s| &s.y)) })
}

/// ElGamal ciphertext `(g^r, m * y*^r)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ciphertext {
    #[serde(with = "crate::hex")]
    pub a: BigUint,
    #[serde(with = "crate::hex")]
    pub b: BigUint,
}

impl Ciphertext {
    pub fn new(a: impl Into<BigUint>, b: impl Into<BigUint>) -> Self {
        Self { a: a.into(), b: b.into() }
    }

    /// Componentwise `(a^e, b^e)`.
    pub fn pow(&self, params: &GroupParams, e: &BigUint) -> Self {
        Self { a: params.pow(&self.a, e), b: params.pow(&self.b, e) }
    }

    /// Componentwise product.
    pub fn mul(&self, params: &GroupParams, other: &Self) -> Self {
        Self { a: params.mul(&self.a, &other.a), b: params.mul(&self.b, &other.b) }
    }

    pub fn in_subgroup(&self, params: &GroupParams) -> bool {
        params.in_subgroup(&self.a) && params.in_subgroup(&self.b)
    }
}

pub fn encrypt(params: &GroupParams, y_star: &BigUint, m: &BigUint, r: &BigUint) -> Result<Ciphertext, GroupError> {
    params.ensure_subgroup(m)?;
    Ok(encrypt_unchecked(params, y_star, m, r))
}

pub(crate) fn encrypt_unchecked(params: &GroupParams, y_star: &BigUint, m: &BigUint, r: &BigUint) -> Ciphertext {
    Ciphertext { a: params.g_pow(r), b: params.mul(m, &params.pow(y_star, r)) }
}

pub fn reencrypt(params: &GroupParams, y_star: &BigUint, c: &Ciphertext, k: &BigUint) -> Ciphertext {
    Ciphertext { a: params.mul(&c.a, &params.g_pow(k)), b: params.mul(&c.b, &params.pow(y_star, k)) }
}

/// Strips one key share: `(a, b * a^-x)`.
pub fn partial_decrypt(params: &GroupParams, c: &Ciphertext, share: &KeyShare) -> Ciphertext {
    partial_decrypt_with(params, c, &share.x)
}

pub fn partial_decrypt_with(params: &GroupParams, c: &Ciphertext, x: &BigUint) -> Ciphertext {
    let mask = params.pow(&c.a, x);
    let b = params.div(&c.b, &mask).expect("subgroup elements are invertible");
    Ciphertext { a: c.a.clone(), b }
}

/// A candidate's subgroup encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCode {
    pub candidate_id: u32,
    #[serde(with = "crate::hex")]
    pub element: BigUint,
}

/// `(id + 2)^2 mod p`. Injective while `id + 2 <= (p - 1) / 2`.
pub fn encode_candidate(params: &GroupParams, id: u32) -> Result<CandidateCode, GroupError> {
    let root = BigUint::from(id) + 2u32;
    if root > (&params.p - 1u32) >> 1 {
        return Err(GroupError::CandidateOutOfRange(id));
    }
    Ok(CandidateCode { candidate_id: id, element: (&root * &root) % &params.p })
}

/// Lookup table over a configured candidate list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateTable {
    codes: Vec<CandidateCode>,
}

impl CandidateTable {
    pub fn new(params: &GroupParams, count: u32) -> Result<Self, GroupError> {
        let codes = (0..count).map(|id| encode_candidate(params, id)).collect::<Result<_, _>>()?;
        Ok(Self { codes })
    }

    pub fn codes(&self) -> &[CandidateCode] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn encode(&self, id: u32) -> Option<&BigUint> {
        self.codes.get(id as usize).map(|c| &c.element)
    }

    /// `None` signals an element matching no candidate.
    pub fn decode(&self, element: &BigUint) -> Option<u32> {
        self.codes.iter().find(|c| &c.element == element).map(|c| c.candidate_id)
    }
}

pub fn decode_candidate(table: &CandidateTable, element: &BigUint) -> Option<u32> {
    table.decode(element)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn n(v: u32) -> BigUint {
        BigUint::from(v)
    }

    fn toy() -> GroupParams {
        GroupParams::toy(5)
    }

    #[test]
    fn toy_params_validate() {
        // 2^11 mod 23 = 2048 mod 23 = 1
        assert_eq!(n(2).modpow(&n(11), &n(23)), n(1));
        assert!(toy().validate().is_ok());
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(GroupParams::new(n(15), n(7), n(4), n(1)), Err(GroupError::ModulusNotPrime));
        assert_eq!(GroupParams::new(n(29), n(11), n(2), n(1)), Err(GroupError::NotSafePrime));
        assert_eq!(GroupParams::new(n(23), n(11), n(5), n(1)), Err(GroupError::BadGenerator));
        assert_eq!(GroupParams::new(n(23), n(11), n(1), n(1)), Err(GroupError::BadGenerator));
        assert_eq!(GroupParams::new(n(23), n(11), n(2), n(0)), Err(GroupError::LambdaOutOfRange));
        assert_eq!(GroupParams::new(n(23), n(11), n(2), n(11)), Err(GroupError::LambdaOutOfRange));
    }

    #[test]
    fn setup_is_deterministic() {
        let a = setup_group(16, 9).unwrap();
        let b = setup_group(16, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.p, (&a.q << 1) + 1u32);
        assert_eq!(a.p.bits(), 16);
        assert_eq!(setup_group(15, 9), Err(GroupError::BitLengthTooSmall(15)));
    }

    #[test]
    fn keygen_examples() {
        let params = toy();
        assert_eq!(KeyShare::from_secret(&params, 1, n(3)).unwrap().y, n(8));
        assert_eq!(KeyShare::from_secret(&params, 2, n(5)).unwrap().y, n(9));
        assert_eq!(KeyShare::from_secret(&params, 1, n(0)), Err(GroupError::ExponentOutOfRange));
    }

    #[test]
    fn combine_examples() {
        let params = toy();
        let a = KeyShare::from_secret(&params, 1, n(3)).unwrap().public();
        let b = KeyShare::from_secret(&params, 2, n(5)).unwrap().public();
        assert_eq!(combine_keys(&params, &[a.clone(), b.clone()]).unwrap().y_star, n(3));
        assert_eq!(combine_keys(&params, std::slice::from_ref(&a)).unwrap().y_star, n(8));
        let dup = PublicShare { server_index: 1, y: b.y.clone() };
        assert_eq!(combine_keys(&params, &[a, dup]), Err(GroupError::DuplicateIndex(1)));
        assert_eq!(combine_keys(&params, &[b]), Err(GroupError::MissingIndex(1)));
    }

    #[test]
    fn encrypt_examples() {
        let params = toy();
        let y = n(3);
        assert_eq!(encrypt(&params, &y, &n(4), &n(5)).unwrap(), Ciphertext::new(9u32, 6u32));
        assert_eq!(encrypt(&params, &y, &n(4), &n(0)).unwrap(), Ciphertext::new(1u32, 4u32));
        // 5^11 mod 23 = 22, so 5 is a non-residue
        assert_eq!(n(5).modpow(&n(11), &n(23)), n(22));
        assert_eq!(encrypt(&params, &y, &n(5), &n(1)), Err(GroupError::NotInSubgroup));
    }

    #[test]
    fn reencrypt_examples() {
        let params = toy();
        let y = n(3);
        let c = Ciphertext::new(9u32, 6u32);
        assert_eq!(reencrypt(&params, &y, &c, &n(2)), Ciphertext::new(13u32, 8u32));
        assert_eq!(reencrypt(&params, &y, &c, &n(0)), c);
        let twice = reencrypt(&params, &y, &reencrypt(&params, &y, &c, &n(1)), &n(2));
        assert_eq!(twice, reencrypt(&params, &y, &c, &n(3)));
    }

    #[test]
    fn partial_decrypt_examples() {
        let params = toy();
        let c = Ciphertext::new(9u32, 6u32);
        let first = partial_decrypt_with(&params, &c, &n(3));
        assert_eq!(first, Ciphertext::new(9u32, 9u32));
        assert_eq!(partial_decrypt_with(&params, &first, &n(5)), Ciphertext::new(9u32, 4u32));
        assert_eq!(partial_decrypt_with(&params, &c, &n(0)), c);
    }

    #[test]
    fn candidate_examples() {
        let params = toy();
        assert_eq!(encode_candidate(&params, 0).unwrap().element, n(4));
        assert_eq!(encode_candidate(&params, 1).unwrap().element, n(9));
        let table = CandidateTable::new(&params, 2).unwrap();
        assert_eq!(decode_candidate(&table, &n(13)), None);
        assert_eq!(table.decode(&n(9)), Some(1));
        // 11^2 and 12^2 collide mod 23; id 9 is the last injective slot
        assert!(encode_candidate(&params, 9).is_ok());
        assert_eq!(encode_candidate(&params, 10), Err(GroupError::CandidateOutOfRange(10)));
    }

    #[test]
    fn exhaustive_toy_round_trip() {
        let params = toy();
        let qr: Vec<BigUint> = (1u32..23).map(n).filter(|m| params.in_subgroup(m)).collect();
        assert_eq!(qr.len(), 11);
        for x1 in 1u32..11 {
            for x2 in 1u32..11 {
                let s1 = KeyShare::from_secret(&params, 1, n(x1)).unwrap();
                let s2 = KeyShare::from_secret(&params, 2, n(x2)).unwrap();
                let y = combine_keys(&params, &[s1.public(), s2.public()]).unwrap().y_star;
                for m in &qr {
                    for r in 0u32..11 {
                        let c = encrypt(&params, &y, m, &n(r)).unwrap();
                        let forward = partial_decrypt(&params, &partial_decrypt(&params, &c, &s1), &s2);
                        let backward = partial_decrypt(&params, &partial_decrypt(&params, &c, &s2), &s1);
                        assert_eq!(&forward.b, m);
                        assert_eq!(forward, backward);
                    }
                }
            }
        }
    }

    #[test]
    fn exponent_reduction() {
        let params = toy();
        for e in 0u32..60 {
            assert_eq!(params.g_pow(&n(e % 11)), params.g_pow(&n(e)));
        }
    }

    proptest! {
        #[test]
        fn reencryption_preserves_plaintext(m in 1u32..23, x in 1u32..11, r in 0u32..11, k in 0u32..11) {
            let params = toy();
            let m = params.mul(&n(m), &n(m));
            let y = params.g_pow(&n(x));
            let c = encrypt(&params, &y, &m, &n(r)).unwrap();
            let c2 = reencrypt(&params, &y, &c, &n(k));
            prop_assert!(c2.in_subgroup(&params));
            prop_assert_eq!(partial_decrypt_with(&params, &c2, &n(x)).b, m);
        }

        #[test]
        fn partial_decryptions_compose(m in 1u32..23, x1 in 1u32..11, x2 in 1u32..11, r in 0u32..11) {
            let params = toy();
            let m = params.mul(&n(m), &n(m));
            let y = params.g_pow(&params.exp_add(&n(x1), &n(x2)));
            let c = encrypt(&params, &y, &m, &n(r)).unwrap();
            let once = partial_decrypt_with(&params, &partial_decrypt_with(&params, &c, &n(x1)), &n(x2));
            prop_assert_eq!(once.b, m);
        }
    }
}
