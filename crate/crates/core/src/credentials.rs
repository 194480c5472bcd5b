//! Modeled anonymous tag credentials: an authority-signed pseudokey
//! `P = g^Z`, blinded shows, used seals `U^Z` with equality proofs, a seal
//! registry and a revocation list.
//!
//! The authority sees `P` at show time, so shows are unlinkable only to
//! parties that see the board alone.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::group::GroupParams;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("{0} is not on the roll")]
    NotOnRoll(String),
    #[error("{voter} already holds a credential (receipt {receipt_digest})")]
    AlreadyIssued { voter: String, receipt_digest: String },
    #[error("seal base must be a subgroup element other than 1")]
    DegenerateBase,
    #[error("secret exponent must lie in [1, q-1]")]
    DegenerateExponent,
    #[error("authority signature does not verify")]
    BadSignature,
    #[error("credential has been revoked")]
    Revoked,
    #[error("equality proof does not verify")]
    InvalidProof,
    #[error("no unused pseudokey remains in this group")]
    PseudokeysExhausted,
}

fn challenge(params: &GroupParams, domain: &str, values: &[&BigUint], message: &[u8]) -> BigUint {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_bytes());
    for v in values {
        let bytes = v.to_bytes_be();
        hasher.update((bytes.len() as u64).to_be_bytes());
        hasher.update(&bytes);
    }
    hasher.update((message.len() as u64).to_be_bytes());
    hasher.update(message);
    BigUint::from_bytes_be(&hasher.finalize()) % &params.q
}

/// Schnorr signature `(c, s)` with `c = H(g^s y^-c, y, m)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    #[serde(with = "crate::hex")]
    pub challenge: BigUint,
    #[serde(with = "crate::hex")]
    pub response: BigUint,
}

pub fn sign<R: RngCore + ?Sized>(params: &GroupParams, secret: &BigUint, message: &[u8], rng: &mut R) -> Signature {
    let public = params.g_pow(secret);
    let k = params.random_exponent(rng);
    let commitment = params.g_pow(&k);
    let c = challenge(params, "svrm-sig", &[&commitment, &public], message);
    Signature { response: params.exp_add(&k, &params.exp_mul(&c, secret)), challenge: c }
}

pub fn verify_signature(params: &GroupParams, public: &BigUint, message: &[u8], sig: &Signature) -> bool {
    if !params.in_subgroup(public) || sig.challenge >= params.q || sig.response >= params.q {
        return false;
    }
    let Some(y_inv_c) = params.inv(&params.pow(public, &sig.challenge)) else { return false };
    let commitment = params.mul(&params.g_pow(&sig.response), &y_inv_c);
    challenge(params, "svrm-sig", &[&commitment, public], message) == sig.challenge
}

/// Non-interactive proof that `log_base1 value1 = log_base2 value2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqualityProof {
    #[serde(with = "crate::hex")]
    pub challenge: BigUint,
    #[serde(with = "crate::hex")]
    pub response: BigUint,
}

pub fn prove_equality<R: RngCore + ?Sized>(
    params: &GroupParams,
    bases: (&BigUint, &BigUint),
    values: (&BigUint, &BigUint),
    witness: &BigUint,
    rng: &mut R,
) -> EqualityProof {
    let k = params.random_exponent(rng);
    let t1 = params.pow(bases.0, &k);
    let t2 = params.pow(bases.1, &k);
    let c = challenge(params, "svrm-dleq", &[bases.0, values.0, bases.1, values.1, &t1, &t2], &[]);
    EqualityProof { response: params.exp_add(&k, &params.exp_mul(&c, witness)), challenge: c }
}

pub fn verify_equality(params: &GroupParams, bases: (&BigUint, &BigUint), values: (&BigUint, &BigUint), proof: &EqualityProof) -> bool {
    if ![bases.0, bases.1, values.0, values.1].iter().all(|v| params.in_subgroup(v))
        || bases.0.is_one()
        || bases.1.is_one()
        || proof.challenge >= params.q
        || proof.response >= params.q
    {
        return false;
    }
    let recover = |base: &BigUint, value: &BigUint| {
        let denom = params.pow(value, &proof.challenge);
        params.div(&params.pow(base, &proof.response), &denom)
    };
    let (Some(t1), Some(t2)) = (recover(bases.0, values.0), recover(bases.1, values.1)) else { return false };
    challenge(params, "svrm-dleq", &[bases.0, values.0, bases.1, values.1, &t1, &t2], &[]) == proof.challenge
}

/// The public part of a credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    #[serde(with = "crate::hex")]
    pub pseudokey: BigUint,
    pub signature: Signature,
}

impl Credential {
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"svrm-credential");
        hasher.update(self.pseudokey.to_bytes_be());
        hasher.update(self.signature.challenge.to_bytes_be());
        hasher.update(self.signature.response.to_bytes_be());
        crate::mixnet::to_hex(&hasher.finalize())
    }
}

/// A credential together with the voter's secret `Z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldCredential {
    pub credential: Credential,
    pub z: BigUint,
}

/// The voter's signature over the credential digest, made with `Z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub voter: String,
    pub signature: Signature,
}

impl Receipt {
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"svrm-receipt");
        hasher.update(self.voter.as_bytes());
        hasher.update(self.signature.challenge.to_bytes_be());
        hasher.update(self.signature.response.to_bytes_be());
        crate::mixnet::to_hex(&hasher.finalize())
    }
}

/// Blinded show `(h, T) = (g^W, P^W)` with a proof that `T = h^Z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownTag {
    #[serde(with = "crate::hex")]
    pub h: BigUint,
    #[serde(with = "crate::hex")]
    pub tag: BigUint,
    pub proof: EqualityProof,
}

/// `U^Z` with a proof of equal logarithm against a reference pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedSeal {
    #[serde(with = "crate::hex")]
    pub base: BigUint,
    #[serde(with = "crate::hex")]
    pub seal: BigUint,
    pub proof: EqualityProof,
}

#[derive(Debug, Clone)]
pub struct Authority {
    secret: BigUint,
    pub public: BigUint,
    roll: BTreeSet<String>,
    receipts: BTreeMap<String, Receipt>,
    issued: BTreeSet<BigUint>,
    revoked: BTreeSet<BigUint>,
}

impl Authority {
    pub fn new<R: RngCore + ?Sized>(params: &GroupParams, roll: impl IntoIterator<Item = String>, rng: &mut R) -> Self {
        let secret = params.random_exponent(rng);
        Self {
            public: params.g_pow(&secret),
            secret,
            roll: roll.into_iter().collect(),
            receipts: BTreeMap::new(),
            issued: BTreeSet::new(),
            revoked: BTreeSet::new(),
        }
    }

    /// Issues a credential for `voter`, with `Z` drawn from the voter's
    /// generator `voter_rng`.
    pub fn issue<R: RngCore + ?Sized, S: RngCore + ?Sized>(
        &mut self,
        params: &GroupParams,
        voter: &str,
        voter_rng: &mut R,
        rng: &mut S,
    ) -> Result<(HeldCredential, Receipt), CredentialError> {
        if !self.roll.contains(voter) {
            return Err(CredentialError::NotOnRoll(voter.into()));
        }
        if let Some(receipt) = self.receipts.get(voter) {
            return Err(CredentialError::AlreadyIssued { voter: voter.into(), receipt_digest: receipt.digest() });
        }
        if BigUint::from(self.issued.len()) + 1u32 >= params.q {
            return Err(CredentialError::PseudokeysExhausted);
        }
        let (z, pseudokey) = loop {
            let z = params.random_exponent(voter_rng);
            let p = params.g_pow(&z);
            if !self.issued.contains(&p) {
                break (z, p);
            }
        };
        let signature = sign(params, &self.secret, &pseudokey.to_bytes_be(), rng);
        let credential = Credential { pseudokey: pseudokey.clone(), signature };
        let receipt = Receipt { voter: voter.into(), signature: sign(params, &z, credential.digest().as_bytes(), voter_rng) };
        if !verify_signature(params, &pseudokey, credential.digest().as_bytes(), &receipt.signature) {
            return Err(CredentialError::BadSignature);
        }
        self.issued.insert(pseudokey);
        self.receipts.insert(voter.into(), receipt.clone());
        Ok((HeldCredential { credential, z }, receipt))
    }

    pub fn revoke(&mut self, pseudokey: &BigUint) {
        self.revoked.insert(pseudokey.clone());
    }

    /// Accepts a show of `credential`: signature, revocation and proof.
    pub fn accept_show(&self, params: &GroupParams, credential: &Credential, shown: &ShownTag) -> Result<(), CredentialError> {
        if !verify_signature(params, &self.public, &credential.pseudokey.to_bytes_be(), &credential.signature) {
            return Err(CredentialError::BadSignature);
        }
        if self.revoked.contains(&credential.pseudokey) {
            return Err(CredentialError::Revoked);
        }
        if !verify_equality(params, (&params.g, &shown.h), (&credential.pseudokey, &shown.tag), &shown.proof) {
            return Err(CredentialError::InvalidProof);
        }
        Ok(())
    }
}

/// Blinds the credential with a fresh `W`.
pub fn show<R: RngCore + ?Sized>(
    params: &GroupParams,
    held: &HeldCredential,
    w: &BigUint,
    rng: &mut R,
) -> Result<ShownTag, CredentialError> {
    if w.is_zero() || *w >= params.q {
        return Err(CredentialError::DegenerateExponent);
    }
    let h = params.g_pow(w);
    let tag = params.pow(&held.credential.pseudokey, w);
    let proof = prove_equality(params, (&params.g, &h), (&held.credential.pseudokey, &tag), &held.z, rng);
    Ok(ShownTag { h, tag, proof })
}

/// `U^Z` proven against the reference pair `(base, key)` with `key = base^Z`.
pub fn make_seal<R: RngCore + ?Sized>(
    params: &GroupParams,
    z: &BigUint,
    base: &BigUint,
    reference: (&BigUint, &BigUint),
    rng: &mut R,
) -> Result<UsedSeal, CredentialError> {
    if !params.in_subgroup(base) || base.is_one() {
        return Err(CredentialError::DegenerateBase);
    }
    if z.is_zero() || *z >= params.q {
        return Err(CredentialError::DegenerateExponent);
    }
    let seal = params.pow(base, z);
    let proof = prove_equality(params, (reference.0, base), (reference.1, &seal), z, rng);
    Ok(UsedSeal { base: base.clone(), seal, proof })
}

/// Checks a seal against the reference pair it was proven for.
pub fn verify_seal_against(params: &GroupParams, seal: &UsedSeal, reference: (&BigUint, &BigUint)) -> bool {
    verify_equality(params, (reference.0, &seal.base), (reference.1, &seal.seal), &seal.proof)
}

/// Checks a seal against the holder's pseudokey.
pub fn verify_seal(params: &GroupParams, seal: &UsedSeal, pseudokey: &BigUint) -> bool {
    verify_seal_against(params, seal, (&params.g, pseudokey))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SealStatus {
    Accepted,
    Duplicate,
}

/// Seals accepted so far, per phase tag and base.
#[derive(Debug, Clone, Default)]
pub struct SealRegistry {
    seen: BTreeMap<(String, BigUint), BTreeSet<BigUint>>,
}

impl SealRegistry {
    pub fn register(&mut self, phase: &str, seal: &UsedSeal) -> SealStatus {
        let set = self.seen.entry((phase.to_string(), seal.base.clone())).or_default();
        if set.insert(seal.seal.clone()) {
            SealStatus::Accepted
        } else {
            SealStatus::Duplicate
        }
    }

    pub fn contains(&self, phase: &str, seal: &UsedSeal) -> bool {
        self.seen.get(&(phase.to_string(), seal.base.clone())).is_some_and(|s| s.contains(&seal.seal))
    }

    pub fn count(&self, phase: &str, base: &BigUint) -> usize {
        self.seen.get(&(phase.to_string(), base.clone())).map_or(0, BTreeSet::len)
    }
}
