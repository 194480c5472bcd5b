//! Revised unknown-number generation, voter-side verification and
//! assembly of the initial triple, and the pseudonym ring.
//!
//! Vote shares are multiplicative in the group, but the third term needs
//! the vote as an exponent modulo `q`. Each share therefore travels with an
//! exponent companion; the companions multiply to the vote's integer
//! representative `D mod q`.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{Ciphertext, GroupParams};
use crate::mixnet::Tuple;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RevisedError {
    #[error("secret exponent {0} must lie in [2, q-1]")]
    DegenerateDelta(usize),
    #[error("challenge exponent must lie in [1, q-1]")]
    DegeneratePhi,
    #[error("vote is not a subgroup element")]
    NotInSubgroup,
    #[error("shares do not multiply to the vote")]
    ShareProductMismatch,
    #[error("exponent companions do not multiply to the vote representative")]
    CompanionMismatch,
    #[error("expected {expected} shares, got {found}")]
    ShareCount { expected: usize, found: usize },
    #[error("no servers")]
    NoServers,
    #[error("first pair failed the mu check")]
    MuCheckFailed,
    #[error("third term does not match the voter's recomputation")]
    ThirdTermMismatch,
    #[error("pseudonym share {0} failed the challenge check")]
    GammaCheckFailed(usize),
    #[error("a revised triple has arity 3, got {0}")]
    Arity(usize),
}

/// One server's part of a vote: a group element and its exponent companion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteShare {
    pub element: BigUint,
    pub exponent: BigUint,
}

/// Splits `value` into `count` shares. The first `count - 1` elements are
/// uniform in the subgroup and the last is fixed by division; companions
/// follow the same pattern modulo `q`.
pub fn split_vote<R: RngCore + ?Sized>(params: &GroupParams, value: &BigUint, count: usize, rng: &mut R) -> Vec<VoteShare> {
    assert!(count >= 1);
    let elements = split_element(params, value, count, rng);
    let companions = split_companion(params, &params.representative(value), count, rng);
    elements.into_iter().zip(companions).map(|(element, exponent)| VoteShare { element, exponent }).collect()
}

pub fn split_element<R: RngCore + ?Sized>(params: &GroupParams, value: &BigUint, count: usize, rng: &mut R) -> Vec<BigUint> {
    let mut parts: Vec<BigUint> = (1..count).map(|_| params.random_element(rng)).collect();
    let rest = params.div(value, &params.product(&parts)).expect("subgroup elements are invertible");
    parts.push(rest);
    parts
}

/// Companions multiplying to `target` modulo `q`; free factors are nonzero.
pub fn split_companion<R: RngCore + ?Sized>(params: &GroupParams, target: &BigUint, count: usize, rng: &mut R) -> Vec<BigUint> {
    let mut parts: Vec<BigUint> = (1..count).map(|_| params.random_exponent(rng)).collect();
    let prod = parts.iter().fold(BigUint::one(), |acc, e| params.exp_mul(&acc, e));
    let inv = params.exp_inv(&prod).expect("nonzero factors");
    parts.push(params.exp_mul(target, &inv));
    parts
}

/// Public commitments `(g^d1, y*^d2, (g y*)^d3)` sent to the first server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaCommitments {
    #[serde(with = "crate::hex")]
    pub g_d1: BigUint,
    #[serde(with = "crate::hex")]
    pub y_d2: BigUint,
    #[serde(with = "crate::hex")]
    pub gy_d3: BigUint,
}

/// Everything the voter generates in the booth. Dropped at approval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoterSecrets {
    pub deltas: [BigUint; 3],
    pub phi: BigUint,
    pub vote: BigUint,
    pub shares: Vec<VoteShare>,
}

impl VoterSecrets {
    pub fn new<R: RngCore + ?Sized>(params: &GroupParams, vote: &BigUint, servers: usize, rng: &mut R) -> Result<Self, RevisedError> {
        params.ensure_subgroup(vote).map_err(|_| RevisedError::NotInSubgroup)?;
        if servers == 0 {
            return Err(RevisedError::NoServers);
        }
        let two = BigUint::from(2u32);
        let mut delta = || {
            use num_bigint::RandBigInt;
            rng.gen_biguint_range(&two, &params.q)
        };
        let deltas = [delta(), delta(), delta()];
        let phi = params.random_exponent(rng);
        let shares = split_vote(params, vote, servers, rng);
        Self::from_parts(params, vote.clone(), deltas, phi, shares)
    }

    pub fn from_parts(
        params: &GroupParams,
        vote: BigUint,
        deltas: [BigUint; 3],
        phi: BigUint,
        shares: Vec<VoteShare>,
    ) -> Result<Self, RevisedError> {
        for (i, d) in deltas.iter().enumerate() {
            if *d < BigUint::from(2u32) || *d >= params.q {
                return Err(RevisedError::DegenerateDelta(i + 1));
            }
        }
        if phi.is_zero() || phi >= params.q {
            return Err(RevisedError::DegeneratePhi);
        }
        check_shares(params, &vote, &shares)?;
        Ok(Self { deltas, phi, vote, shares })
    }

    pub fn commitments(&self, params: &GroupParams, y_star: &BigUint) -> DeltaCommitments {
        let gy = params.mul(&params.g, y_star);
        DeltaCommitments {
            g_d1: params.g_pow(&self.deltas[0]),
            y_d2: params.pow(y_star, &self.deltas[1]),
            gy_d3: params.pow(&gy, &self.deltas[2]),
        }
    }
}

pub fn check_shares(params: &GroupParams, value: &BigUint, shares: &[VoteShare]) -> Result<(), RevisedError> {
    if params.product(shares.iter().map(|s| &s.element)) != *value {
        return Err(RevisedError::ShareProductMismatch);
    }
    let companions = shares.iter().fold(BigUint::one(), |acc, s| params.exp_mul(&acc, &s.exponent));
    if companions != params.representative(value) {
        return Err(RevisedError::CompanionMismatch);
    }
    Ok(())
}

/// `(g^(d1 s*), y*^(d2 s*), (g y*)^(d3 s*))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MuTriplet {
    #[serde(with = "crate::hex")]
    pub mu1: BigUint,
    #[serde(with = "crate::hex")]
    pub mu2: BigUint,
    #[serde(with = "crate::hex")]
    pub mu3: BigUint,
}

/// One server's randomness for one form of one vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UngServerSecrets {
    #[serde(with = "crate::hex")]
    pub s: BigUint,
    #[serde(with = "crate::hex")]
    pub u: BigUint,
    /// Multiplicative contribution to `R`, a subgroup element.
    #[serde(with = "crate::hex")]
    pub r: BigUint,
}

impl UngServerSecrets {
    pub fn random<R: RngCore + ?Sized>(params: &GroupParams, rng: &mut R) -> Self {
        let mut r = params.random_element(rng);
        while r.is_one() {
            r = params.random_element(rng);
        }
        Self { s: params.random_exponent_or_zero(rng), u: params.random_exponent_or_zero(rng), r }
    }
}

/// Scripted misbehaviour of one server during vote construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UngDeviation {
    /// Uses `s + 1` on the `y*` side of the first pair.
    MismatchedFirstPair,
    /// Uses `e + 1` in the squared chain of the third term.
    WrongChainExponent,
}

/// One server's inputs to a form run.
#[derive(Debug, Clone)]
pub struct UngParticipant<'a> {
    pub secrets: &'a UngServerSecrets,
    pub share: &'a VoteShare,
    pub deviation: Option<UngDeviation>,
}

/// Messages the last server returns to the voter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UngOutput {
    pub t1: Ciphertext,
    pub t2: Ciphertext,
    pub mu: MuTriplet,
}

/// Steps 1-5: each server folds in its share and randomness.
pub fn revised_ung_run(
    params: &GroupParams,
    y_star: &BigUint,
    commitments: &DeltaCommitments,
    participants: &[UngParticipant<'_>],
) -> Result<UngOutput, RevisedError> {
    if participants.is_empty() {
        return Err(RevisedError::NoServers);
    }
    let one = BigUint::one();
    let mut t1 = Ciphertext::new(1u32, 1u32);
    let mut t2 = Ciphertext::new(1u32, 1u32);
    let mut mu = MuTriplet { mu1: one.clone(), mu2: one.clone(), mu3: one };
    for p in participants {
        let s = &p.secrets.s;
        let s_right = match p.deviation {
            Some(UngDeviation::MismatchedFirstPair) => (s + 1u32) % &params.q,
            _ => s.clone(),
        };
        t1 = Ciphertext {
            a: params.mul(&t1.a, &params.g_pow(s)),
            b: params.mul(&params.mul(&t1.b, &p.share.element), &params.pow(y_star, &s_right)),
        };
        t2 = Ciphertext {
            a: params.mul(&t2.a, &params.g_pow(&p.secrets.u)),
            b: params.mul(&params.mul(&t2.b, &p.secrets.r), &params.pow(y_star, &p.secrets.u)),
        };
        mu = MuTriplet {
            mu1: params.mul(&mu.mu1, &params.pow(&commitments.g_d1, s)),
            mu2: params.mul(&mu.mu2, &params.pow(&commitments.y_d2, s)),
            mu3: params.mul(&mu.mu3, &params.pow(&commitments.gy_d3, s)),
        };
    }
    Ok(UngOutput { t1, t2, mu })
}

/// Step 6: checks that both sides of `t1` carry one shared exponent.
pub fn verify_mu(
    params: &GroupParams,
    deltas: &[BigUint; 3],
    t1: &Ciphertext,
    plaintext: &BigUint,
    mu: &MuTriplet,
) -> Result<bool, RevisedError> {
    for (i, d) in deltas.iter().enumerate() {
        if *d < BigUint::from(2u32) || *d >= params.q {
            return Err(RevisedError::DegenerateDelta(i + 1));
        }
    }
    let Some(masked) = params.div(&t1.b, plaintext) else { return Ok(false) };
    Ok(params.pow(&t1.a, &deltas[0]) == mu.mu1
        && params.pow(&masked, &deltas[1]) == mu.mu2
        && params.pow(&params.mul(&t1.a, &masked), &deltas[2]) == mu.mu3)
}

/// The two exponentiation chains over `t2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThirdTermChains {
    /// `t2^(prod e^2)`.
    pub squared: Ciphertext,
    /// `t2^(lambda * prod e)`.
    pub linear: Ciphertext,
}

/// Steps 7-8: server-side chains.
pub fn third_term_chains(params: &GroupParams, t2: &Ciphertext, participants: &[UngParticipant<'_>]) -> ThirdTermChains {
    let mut squared = t2.clone();
    let mut linear = t2.clone();
    for (i, p) in participants.iter().enumerate() {
        let e = &p.share.exponent;
        let e_sq = match p.deviation {
            Some(UngDeviation::WrongChainExponent) => {
                let wrong = (e + 1u32) % &params.q;
                params.exp_mul(&wrong, &wrong)
            }
            _ => params.exp_mul(e, e),
        };
        squared = squared.pow(params, &e_sq);
        let e_lin = if i == 0 { params.exp_mul(&params.lambda, e) } else { e.clone() };
        linear = linear.pow(params, &e_lin);
    }
    ThirdTermChains { squared, linear }
}

/// Step 9: the voter combines the chains and checks them against its own
/// recomputation `t2^(a (a + lambda))`.
pub fn combine_third_term(
    params: &GroupParams,
    t2: &Ciphertext,
    chains: &ThirdTermChains,
    plaintext: &BigUint,
) -> Result<Ciphertext, RevisedError> {
    let combined = chains.squared.mul(params, &chains.linear);
    let expected = t2.pow(params, &params.consistency_exponent(plaintext));
    if combined == expected {
        Ok(combined)
    } else {
        Err(RevisedError::ThirdTermMismatch)
    }
}

/// Chains and voter check in one call.
pub fn compute_third_term(
    params: &GroupParams,
    t2: &Ciphertext,
    participants: &[UngParticipant<'_>],
    plaintext: &BigUint,
) -> Result<Ciphertext, RevisedError> {
    let chains = third_term_chains(params, t2, participants);
    combine_third_term(params, t2, &chains, plaintext)
}

/// `(t1, t2, t3)` encrypting `(a, R, R^(a (a + lambda)))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisedTriple {
    pub t1: Ciphertext,
    pub t2: Ciphertext,
    pub t3: Ciphertext,
}

impl RevisedTriple {
    pub fn to_tuple(&self) -> Tuple {
        vec![self.t1.clone(), self.t2.clone(), self.t3.clone()]
    }

    pub fn from_tuple(tuple: &[Ciphertext]) -> Result<Self, RevisedError> {
        match tuple {
            [t1, t2, t3] => Ok(Self { t1: t1.clone(), t2: t2.clone(), t3: t3.clone() }),
            _ => Err(RevisedError::Arity(tuple.len())),
        }
    }
}

/// Assembles the vote-form triple from verified parts.
pub fn assemble_e0_star(t1: Ciphertext, t2: Ciphertext, t3: Ciphertext) -> RevisedTriple {
    RevisedTriple { t1, t2, t3 }
}

/// Assembles the pseudonym-form triple; the construction is identical, the
/// difference is that its parts were produced from pseudonym shares.
pub fn assemble_e0_star_omega(t1: Ciphertext, t2: Ciphertext, t3: Ciphertext) -> RevisedTriple {
    RevisedTriple { t1, t2, t3 }
}

/// Public messages of one form construction, as published.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormTranscript {
    pub ung: UngOutput,
    pub chains: Option<ThirdTermChains>,
}

/// Runs the whole construction for one form and the voter's checks.
/// On failure the transcript up to the failing check is returned with the
/// error so it can be disputed publicly.
#[allow(clippy::result_large_err)]
pub fn construct_form(
    params: &GroupParams,
    y_star: &BigUint,
    deltas: &[BigUint; 3],
    commitments: &DeltaCommitments,
    plaintext: &BigUint,
    participants: &[UngParticipant<'_>],
) -> Result<(RevisedTriple, FormTranscript), (RevisedError, FormTranscript)> {
    let ung = revised_ung_run(params, y_star, commitments, participants)
        .map_err(|e| (e, FormTranscript { ung: empty_output(), chains: None }))?;
    match verify_mu(params, deltas, &ung.t1, plaintext, &ung.mu) {
        Ok(true) => {}
        Ok(false) => return Err((RevisedError::MuCheckFailed, FormTranscript { ung, chains: None })),
        Err(e) => return Err((e, FormTranscript { ung, chains: None })),
    }
    let chains = third_term_chains(params, &ung.t2, participants);
    match combine_third_term(params, &ung.t2, &chains, plaintext) {
        Ok(t3) => {
            let triple = assemble_e0_star(ung.t1.clone(), ung.t2.clone(), t3);
            Ok((triple, FormTranscript { ung, chains: Some(chains) }))
        }
        Err(e) => Err((e, FormTranscript { ung, chains: Some(chains) })),
    }
}

fn empty_output() -> UngOutput {
    let one = BigUint::one();
    UngOutput {
        t1: Ciphertext::new(1u32, 1u32),
        t2: Ciphertext::new(1u32, 1u32),
        mu: MuTriplet { mu1: one.clone(), mu2: one.clone(), mu3: one },
    }
}

/// A server's pseudonym exponent and the share it returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OmegaShare {
    pub server_index: usize,
    pub omega: BigUint,
    pub gamma_share: BigUint,
}

/// Passes `value` once around the ring starting at server `start`
/// (0-based), each server raising it to its exponent.
pub fn ring_pass(params: &GroupParams, omegas: &[BigUint], start: usize, value: &BigUint) -> BigUint {
    let count = omegas.len();
    (0..count).fold(value.clone(), |acc, hop| params.pow(&acc, &omegas[(start + hop) % count]))
}

/// Raises every share to the joint exponent. Share `q` starts at `M_q` and
/// wraps around; the result `Gamma` is `D^Omega`.
pub fn omega_ring_run(params: &GroupParams, omegas: &[BigUint], shares: &[BigUint]) -> Result<(Vec<OmegaShare>, BigUint), RevisedError> {
    if omegas.is_empty() {
        return Err(RevisedError::NoServers);
    }
    if shares.len() != omegas.len() {
        return Err(RevisedError::ShareCount { expected: omegas.len(), found: shares.len() });
    }
    let gamma_shares: Vec<OmegaShare> = shares
        .iter()
        .enumerate()
        .map(|(q, share)| OmegaShare { server_index: q + 1, omega: omegas[q].clone(), gamma_share: ring_pass(params, omegas, q, share) })
        .collect();
    let gamma = params.product(gamma_shares.iter().map(|s| &s.gamma_share));
    Ok((gamma_shares, gamma))
}

/// Challenges the ring with `share^phi` for every share; `respond(q, c)`
/// is the ring's answer for a challenge entering at server `q` (0-based).
pub fn verify_gamma<F>(
    params: &GroupParams,
    phi: &BigUint,
    shares: &[BigUint],
    gamma_shares: &[BigUint],
    mut respond: F,
) -> Result<bool, RevisedError>
where
    F: FnMut(usize, &BigUint) -> BigUint,
{
    if phi.is_zero() || *phi >= params.q {
        return Err(RevisedError::DegeneratePhi);
    }
    if shares.len() != gamma_shares.len() {
        return Err(RevisedError::ShareCount { expected: shares.len(), found: gamma_shares.len() });
    }
    Ok(shares.iter().zip(gamma_shares).enumerate().all(|(q, (share, gamma_share))| {
        let challenge = params.pow(share, phi);
        respond(q, &challenge) == params.pow(gamma_share, phi)
    }))
}

/// `gamma == beta^(a (a + lambda))` with `a` the representative of `alpha`.
pub fn check_final_consistency(params: &GroupParams, alpha: &BigUint, beta: &BigUint, gamma: &BigUint) -> bool {
    params.pow(beta, &params.consistency_exponent(alpha)) == *gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{encrypt, partial_decrypt_with};
    use crate::rng::derive_rng;
    use proptest::prelude::*;

    fn n(v: u32) -> BigUint {
        BigUint::from(v)
    }

    fn share(element: u32, exponent: u32) -> VoteShare {
        VoteShare { element: n(element), exponent: n(exponent) }
    }

    #[test]
    fn single_server_first_pair_is_plain_encryption() {
        let params = GroupParams::toy(5);
        let y = n(3);
        let secrets = UngServerSecrets { s: n(5), u: n(1), r: n(3) };
        let sh = share(4, 4);
        let commitments = DeltaCommitments { g_d1: n(4), y_d2: n(9), gy_d3: n(6) };
        let out = revised_ung_run(&params, &y, &commitments, &[UngParticipant { secrets: &secrets, share: &sh, deviation: None }]).unwrap();
        assert_eq!(out.t1, encrypt(&params, &y, &n(4), &n(5)).unwrap());
        assert_eq!(out.t1, Ciphertext::new(9u32, 6u32));
    }

    #[test]
    fn share_split_example() {
        let params = GroupParams::toy(5);
        // 3^-1 = 8 mod 23, so the partner of 3 for D = 4 is 4 * 8 = 32 = 9
        assert_eq!(params.inv(&n(3)), Some(n(8)));
        assert_eq!(params.div(&n(4), &n(3)), Some(n(9)));
        assert_eq!(params.mul(&n(3), &n(9)), n(4));
    }

    #[test]
    fn mu_example() {
        let params = GroupParams::toy(5);
        // 2^(2*7 mod 11) = 2^3 = 8
        assert_eq!(params.g_pow(&params.exp_mul(&n(2), &n(7))), n(8));
    }

    #[test]
    fn degenerate_deltas_rejected() {
        let params = GroupParams::toy(5);
        let ones = [n(1), n(1), n(1)];
        let mu = MuTriplet { mu1: n(1), mu2: n(1), mu3: n(1) };
        assert_eq!(verify_mu(&params, &ones, &Ciphertext::new(1u32, 4u32), &n(4), &mu), Err(RevisedError::DegenerateDelta(1)));
        let parts = vec![share(4, 4)];
        assert_eq!(VoterSecrets::from_parts(&params, n(4), [n(2), n(1), n(3)], n(1), parts), Err(RevisedError::DegenerateDelta(2)));
    }

    #[test]
    fn third_term_example() {
        let params = GroupParams::toy(5);
        // D = 4, lambda = 5: 4 * 9 = 36 = 3 mod 11; (4,4)^3 = (18,18)
        assert_eq!(params.consistency_exponent(&n(4)), n(3));
        let t2 = Ciphertext::new(4u32, 4u32);
        let secrets = UngServerSecrets { s: n(0), u: n(0), r: n(1) };
        let sh = share(4, 4);
        let ps = [UngParticipant { secrets: &secrets, share: &sh, deviation: None }];
        assert_eq!(compute_third_term(&params, &t2, &ps, &n(4)).unwrap(), Ciphertext::new(18u32, 18u32));

        // two shares of 4 with companions 2 * 2 = 4
        let (s1, s2) = (share(2, 2), share(2, 2));
        let ps = [
            UngParticipant { secrets: &secrets, share: &s1, deviation: None },
            UngParticipant { secrets: &secrets, share: &s2, deviation: None },
        ];
        assert_eq!(compute_third_term(&params, &t2, &ps, &n(4)).unwrap(), Ciphertext::new(18u32, 18u32));
        let bad = [
            UngParticipant { secrets: &secrets, share: &s1, deviation: Some(UngDeviation::WrongChainExponent) },
            UngParticipant { secrets: &secrets, share: &s2, deviation: None },
        ];
        assert_eq!(compute_third_term(&params, &t2, &bad, &n(4)), Err(RevisedError::ThirdTermMismatch));
    }

    #[test]
    fn degenerate_third_term_is_unit() {
        // a = 6 = -lambda mod 11: 6 is not in QR(23), but any representative
        // with a(a + lambda) = 0 collapses the term
        let params = GroupParams::toy(5);
        let d = n(6);
        assert_eq!(params.consistency_exponent(&d), n(0));
        let t2 = Ciphertext::new(4u32, 4u32);
        assert_eq!(t2.pow(&params, &params.consistency_exponent(&d)), Ciphertext::new(1u32, 1u32));
    }

    #[test]
    fn ring_examples() {
        let params = GroupParams::toy(5);
        let omegas = [n(3), n(5)];
        let (shares, gamma) = omega_ring_run(&params, &omegas, &[n(2), n(2)]).unwrap();
        assert_eq!(shares[0].gamma_share, n(16));
        assert_eq!(shares[1].gamma_share, n(16));
        assert_eq!(gamma, n(3));
        assert_eq!(params.pow(&n(4), &n(4)), n(3));
        let (_, unit) = omega_ring_run(&params, &[n(1), n(1)], &[n(2), n(2)]).unwrap();
        assert_eq!(unit, n(4));
        assert_eq!(omega_ring_run(&params, &omegas, &[n(4)]), Err(RevisedError::ShareCount { expected: 2, found: 1 }));
    }

    #[test]
    fn gamma_challenge_examples() {
        let params = GroupParams::toy(5);
        let omegas = [n(3), n(5)];
        let ring = |q: usize, c: &BigUint| ring_pass(&params, &omegas, q, c);
        // phi = 2: ring(2^2 = 4) = 4^4 = 3 = 16^2
        assert_eq!(ring(0, &n(4)), n(3));
        assert_eq!(params.pow(&n(16), &n(2)), n(3));
        assert_eq!(verify_gamma(&params, &n(2), &[n(2), n(2)], &[n(16), n(16)], ring), Ok(true));
        assert_eq!(verify_gamma(&params, &n(1), &[n(2), n(2)], &[n(16), n(16)], ring), Ok(true));
        assert_eq!(verify_gamma(&params, &n(2), &[n(2), n(2)], &[n(13), n(16)], ring), Ok(false));
        assert_eq!(verify_gamma(&params, &n(0), &[n(2)], &[n(16)], ring), Err(RevisedError::DegeneratePhi));
    }

    #[test]
    fn final_consistency_examples() {
        let params = GroupParams::toy(5);
        // 3^(36 mod 11) = 3^3 = 27 = 4
        assert!(check_final_consistency(&params, &n(4), &n(3), &n(4)));
        assert!(!check_final_consistency(&params, &n(4), &n(3), &n(9)));
        // alpha = 1: exponent 1 * 6 = 6
        assert!(check_final_consistency(&params, &n(1), &n(3), &params.pow(&n(3), &n(6))));
    }

    #[test]
    fn arity_guard() {
        let c = Ciphertext::new(1u32, 1u32);
        assert_eq!(RevisedTriple::from_tuple(&[c.clone(), c.clone()]), Err(RevisedError::Arity(2)));
        assert!(RevisedTriple::from_tuple(&[c.clone(), c.clone(), c]).is_ok());
    }

    /// Builds one honest form and returns the triple plus the joint secrets.
    fn honest_form(
        params: &GroupParams,
        x_star: &BigUint,
        plaintext: &BigUint,
        count: usize,
        seed: u64,
    ) -> (RevisedTriple, Vec<UngServerSecrets>) {
        let y = params.g_pow(x_star);
        let mut rng = derive_rng(seed, "form");
        let voter = VoterSecrets::new(params, plaintext, count, &mut rng).unwrap();
        let secrets: Vec<UngServerSecrets> = (0..count).map(|_| UngServerSecrets::random(params, &mut rng)).collect();
        let ps: Vec<UngParticipant> =
            secrets.iter().zip(&voter.shares).map(|(s, sh)| UngParticipant { secrets: s, share: sh, deviation: None }).collect();
        let commitments = voter.commitments(params, &y);
        let (triple, _) = construct_form(params, &y, &voter.deltas, &commitments, plaintext, &ps).unwrap();
        (triple, secrets)
    }

    #[test]
    fn exhaustive_toy_consistency_and_conspiracy() {
        for lambda in 1u32..11 {
            let params = GroupParams::toy(lambda);
            let qr: Vec<BigUint> = (1u32..23).map(n).filter(|m| params.in_subgroup(m)).collect();
            let x_star = n(7);
            for count in 1..=3 {
                for d in &qr {
                    let (triple, secrets) = honest_form(&params, &x_star, d, count, lambda as u64 * 100 + count as u64);
                    let dec: Vec<BigUint> = triple.to_tuple().iter().map(|c| partial_decrypt_with(&params, c, &x_star).b).collect();
                    assert_eq!(&dec[0], d);
                    assert!(check_final_consistency(&params, &dec[0], &dec[1], &dec[2]));
                    // pooled server secrets reproduce R and both randomness sums
                    let r = params.product(secrets.iter().map(|s| &s.r));
                    assert_eq!(dec[1], r);
                    assert_eq!(triple.t1.a, params.g_pow(&params.exp_sum(secrets.iter().map(|s| &s.s))));
                    assert_eq!(triple.t2.a, params.g_pow(&params.exp_sum(secrets.iter().map(|s| &s.u))));
                }
            }
        }
    }

    #[test]
    fn no_strict_subset_determines_r() {
        let params = GroupParams::toy(5);
        let qr: Vec<BigUint> = (1u32..23).map(n).filter(|m| params.in_subgroup(m)).collect();
        let known = [n(2), n(3), n(4)];
        for mask in 0u8..7 {
            // servers outside the mask vary over every subgroup element
            let mut reachable = std::collections::BTreeSet::new();
            let free: Vec<usize> = (0..3).filter(|i| mask & (1 << i) == 0).collect();
            let mut assignment = known.clone();
            for choice in &qr {
                assignment[free[0]] = choice.clone();
                reachable.insert(params.product(&assignment));
            }
            assert_eq!(reachable.len(), qr.len(), "mask {mask:03b}");
        }
    }

    #[test]
    fn mismatched_first_pair_fails_mu() {
        let params = GroupParams::toy(5);
        let y = n(3);
        let mut rng = derive_rng(3, "mismatch");
        let voter = VoterSecrets::new(&params, &n(4), 2, &mut rng).unwrap();
        let secrets: Vec<UngServerSecrets> = (0..2).map(|_| UngServerSecrets::random(&params, &mut rng)).collect();
        let ps = [
            UngParticipant { secrets: &secrets[0], share: &voter.shares[0], deviation: None },
            UngParticipant { secrets: &secrets[1], share: &voter.shares[1], deviation: Some(UngDeviation::MismatchedFirstPair) },
        ];
        let commitments = voter.commitments(&params, &y);
        let err = construct_form(&params, &y, &voter.deltas, &commitments, &n(4), &ps).unwrap_err();
        assert_eq!(err.0, RevisedError::MuCheckFailed);
    }

    proptest! {
        #[test]
        fn pseudonyms_are_injective(seed in any::<u64>(), a in 1u32..11, b in 1u32..11) {
            let params = GroupParams::toy(5);
            let mut rng = derive_rng(seed, "ring");
            let omegas: Vec<BigUint> = (0..3).map(|_| params.random_exponent(&mut rng)).collect();
            let da = params.g_pow(&n(a));
            let db = params.g_pow(&n(b));
            let sa = split_element(&params, &da, 3, &mut rng);
            let sb = split_element(&params, &db, 3, &mut rng);
            let (_, ga) = omega_ring_run(&params, &omegas, &sa).unwrap();
            let (_, gb) = omega_ring_run(&params, &omegas, &sb).unwrap();
            prop_assert_eq!(ga == gb, da == db);
        }

        #[test]
        fn splits_multiply_back(seed in any::<u64>(), e in 0u32..11, count in 1usize..5) {
            let params = GroupParams::toy(3);
            let mut rng = derive_rng(seed, "split");
            let d = params.g_pow(&n(e));
            let shares = split_vote(&params, &d, count, &mut rng);
            prop_assert!(check_shares(&params, &d, &shares).is_ok());
        }
    }
}
