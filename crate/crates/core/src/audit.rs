//! Transcript checks: aggregate exponent relations, the decryption-stage
//! product check, per-item consistency, interactive tracing, tail-key
//! disclosure and reprocessing of traced items.

use num_bigint::BigUint;
use num_traits::Zero;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{partial_decrypt_with, Ciphertext, GroupParams, KeyShare, PublicShare};
use crate::mixnet::{
    anchor_positions, anchor_value, AnchorSum, Batch, Direction, EncryptionOpening, MixServer, ServerPrivateState, StageContext,
    StageRecord, Tuple,
};
use crate::revised::check_final_consistency;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("incomplete transcript: {0}")]
    Incomplete(String),
    #[error("malformed transcript: {0}")]
    Malformed(String),
    #[error("challenge exponent must lie in [1, q-1]")]
    DegeneratePsi,
    #[error("disclosing {count} of {servers} keys would reveal the joint key")]
    TailKeysRefused { count: usize, servers: usize },
    #[error("reprocessing failed: {0}")]
    Reprocess(String),
}

/// Per-server result of the offline stage checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCheck {
    pub server_index: usize,
    pub direction: Direction,
    /// Input equals the previous output and shapes agree.
    pub chain_ok: bool,
    /// The disclosed exponent sums explain the batch products.
    pub kappa_ok: bool,
}

impl StageCheck {
    pub fn passed(&self) -> bool {
        self.chain_ok && self.kappa_ok
    }
}

/// Checks one record in isolation. Encryption records must satisfy both
/// product relations at every anchor; decryption records must leave first
/// components and slot labels untouched.
pub fn check_stage_record(ctx: &StageContext, record: &StageRecord) -> StageCheck {
    let params = &ctx.params;
    let shape_ok = record.input.validate().is_ok()
        && record.output.validate().is_ok()
        && record.input.len() == record.output.len()
        && (record.input.is_empty() || record.input.arity() == record.output.arity());
    let kappa_ok = shape_ok
        && match record.direction {
            Direction::Encryption => {
                record.permutation_commitment.len() == record.output.len()
                    && anchor_positions(record.output.arity()).into_iter().all(|pos| {
                        let Some(kappa) = anchor_value(&record.kappa, pos) else { return record.input.is_empty() };
                        let column =
                            |b: &Batch, first: bool| params.product(b.items.iter().map(|t| if first { &t[pos].a } else { &t[pos].b }));
                        column(&record.output, true) == params.mul(&params.g_pow(kappa), &column(&record.input, true))
                            && column(&record.output, false) == params.mul(&params.pow(&ctx.y_star, kappa), &column(&record.input, false))
                    })
            }
            Direction::Decryption => {
                record.input.slot_ids == record.output.slot_ids
                    && record
                        .input
                        .items
                        .iter()
                        .zip(&record.output.items)
                        .all(|(i, o)| i.iter().zip(o).all(|(ci, co)| ci.a == co.a && co.in_subgroup(params)))
            }
        };
    StageCheck { server_index: record.server_index, direction: record.direction, chain_ok: shape_ok, kappa_ok }
}

/// Checks the encryption stage: one record per server in ascending index
/// order, each fed by its predecessor's output.
pub fn check_encryption_stage(
    ctx: &StageContext,
    initial: &Batch,
    records: &[StageRecord],
    servers: usize,
) -> Result<Vec<StageCheck>, AuditError> {
    check_chain(ctx, initial, records, servers, Direction::Encryption, |q| q + 1)
}

/// Checks one decryption pass: records in execution order, M_Q first.
pub fn check_decryption_records(
    ctx: &StageContext,
    input: &Batch,
    records: &[StageRecord],
    servers: usize,
) -> Result<Vec<StageCheck>, AuditError> {
    check_chain(ctx, input, records, servers, Direction::Decryption, |q| servers - q)
}

fn check_chain(
    ctx: &StageContext,
    start: &Batch,
    records: &[StageRecord],
    servers: usize,
    direction: Direction,
    expected_index: impl Fn(usize) -> usize,
) -> Result<Vec<StageCheck>, AuditError> {
    if records.len() != servers {
        return Err(AuditError::Incomplete(format!("{} of {servers} {direction:?} records", records.len())));
    }
    let mut previous = start;
    let mut checks = Vec::with_capacity(records.len());
    for (q, record) in records.iter().enumerate() {
        if record.server_index != expected_index(q) || record.direction != direction {
            return Err(AuditError::Malformed(format!("record {q} is out of order")));
        }
        let mut check = check_stage_record(ctx, record);
        check.chain_ok &= record.input == *previous;
        checks.push(check);
        previous = &record.output;
    }
    Ok(checks)
}

/// `prod t[pos].a == g^(sum sigma)` over the initial batch.
pub fn check_sigma(params: &GroupParams, initial: &Batch, records: &[StageRecord], position: usize) -> bool {
    let Some(total) = sigma_total(params, records, position) else { return initial.is_empty() };
    params.product(initial.items.iter().map(|t| &t[position].a)) == params.g_pow(&total)
}

fn sigma_total(params: &GroupParams, records: &[StageRecord], position: usize) -> Option<BigUint> {
    let values: Option<Vec<&BigUint>> = records.iter().map(|r| anchor_value(&r.sigma, position)).collect();
    values.map(|v| params.exp_sum(v))
}

fn kappa_total(params: &GroupParams, records: &[StageRecord], position: usize) -> Option<BigUint> {
    let values: Option<Vec<&BigUint>> = records.iter().map(|r| anchor_value(&r.kappa, position)).collect();
    values.map(|v| params.exp_sum(v))
}

/// `G_d = prod(E_Q second components) / prod(decrypted values)` at one
/// anchor; must equal `y*^(sum sigma + sum kappa)`.
pub fn check_decryption_stage(
    ctx: &StageContext,
    encrypted: &Batch,
    decrypted: &Batch,
    encrypted_position: usize,
    decrypted_position: usize,
    encryption_records: &[StageRecord],
) -> Result<bool, AuditError> {
    let params = &ctx.params;
    if encrypted.len() != decrypted.len() {
        return Err(AuditError::Incomplete("decryption pass does not cover every slot".into()));
    }
    if encrypted.is_empty() {
        return Ok(true);
    }
    let numerator = params.product(encrypted.items.iter().map(|t| &t[encrypted_position].b));
    let denominator = params.product(decrypted.items.iter().map(|t| &t[decrypted_position].b));
    if !params.in_subgroup(&denominator) {
        return Err(AuditError::Malformed("decrypted product is outside the subgroup".into()));
    }
    let gd = params.div(&numerator, &denominator).ok_or_else(|| AuditError::Malformed("non-invertible product".into()))?;
    let (Some(sigma), Some(kappa)) =
        (sigma_total(params, encryption_records, encrypted_position), kappa_total(params, encryption_records, encrypted_position))
    else {
        return Err(AuditError::Incomplete(format!("missing exponent sums at position {encrypted_position}")));
    };
    Ok(gd == params.pow(&ctx.y_star, &params.exp_add(&sigma, &kappa)))
}

/// Final consistency of one fully decrypted triple.
pub fn check_item(params: &GroupParams, tuple: &[Ciphertext]) -> bool {
    match tuple {
        [alpha, beta, gamma] => {
            [&alpha.b, &beta.b, &gamma.b].iter().all(|v| params.in_subgroup(v))
                && check_final_consistency(params, &alpha.b, &beta.b, &gamma.b)
        }
        _ => false,
    }
}

/// A verifier challenge for one partial decryption.
///
/// `g_star = a^psi * g^bind` and `expected = (in.b / out.b)^psi * y^bind`.
/// With `bind = 0` this is the plain Diffie-Hellman check; a nonzero bind
/// term also ties the response to the server's public share.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhChallenge {
    #[serde(with = "crate::hex")]
    pub psi: BigUint,
    #[serde(with = "crate::hex")]
    pub bind: BigUint,
    #[serde(with = "crate::hex")]
    pub g_star: BigUint,
    #[serde(with = "crate::hex")]
    pub expected: BigUint,
}

pub fn dh_challenge(
    params: &GroupParams,
    server_y: &BigUint,
    input: &Ciphertext,
    output: &Ciphertext,
    psi: &BigUint,
    bind: &BigUint,
) -> Result<DhChallenge, AuditError> {
    if psi.is_zero() || *psi >= params.q {
        return Err(AuditError::DegeneratePsi);
    }
    let ratio = params.div(&input.b, &output.b).ok_or_else(|| AuditError::Malformed("non-invertible component".into()))?;
    Ok(DhChallenge {
        psi: psi.clone(),
        bind: bind.clone(),
        g_star: params.mul(&params.pow(&input.a, psi), &params.g_pow(bind)),
        expected: params.mul(&params.pow(&ratio, psi), &params.pow(server_y, bind)),
    })
}

/// Fresh challenge with a nonzero bind term.
pub fn random_dh_challenge<R: RngCore + ?Sized>(
    params: &GroupParams,
    server_y: &BigUint,
    input: &Ciphertext,
    output: &Ciphertext,
    rng: &mut R,
) -> Result<DhChallenge, AuditError> {
    let psi = params.random_exponent(rng);
    let bind = params.random_exponent(rng);
    dh_challenge(params, server_y, input, output, &psi, &bind)
}

pub fn dh_challenge_verify(challenge: &DhChallenge, response: &BigUint) -> bool {
    *response == challenge.expected
}

/// Interactive side of a mix server during tracing. `None` is a refusal.
pub trait Responder {
    fn server_index(&self) -> usize;
    fn respond_dh(&self, params: &GroupParams, pass: &str, slot: usize, challenge: &BigUint) -> Option<BigUint>;
    fn open_encryption(&self, output_slot: usize) -> Option<EncryptionOpening>;
}

impl Responder for MixServer {
    fn server_index(&self) -> usize {
        self.index()
    }

    fn respond_dh(&self, params: &GroupParams, pass: &str, slot: usize, challenge: &BigUint) -> Option<BigUint> {
        Some(MixServer::respond_dh(self, params, pass, slot, challenge))
    }

    fn open_encryption(&self, output_slot: usize) -> Option<EncryptionOpening> {
        MixServer::open_encryption(self, output_slot)
    }
}

impl Responder for ServerPrivateState {
    fn server_index(&self) -> usize {
        self.key.server_index
    }

    fn respond_dh(&self, params: &GroupParams, pass: &str, slot: usize, challenge: &BigUint) -> Option<BigUint> {
        Some(ServerPrivateState::respond_dh(self, params, pass, slot, challenge))
    }

    fn open_encryption(&self, output_slot: usize) -> Option<EncryptionOpening> {
        ServerPrivateState::open_encryption(self, output_slot)
    }
}

/// One decryption pass over a projection of the encrypted batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptionPass {
    pub pass: String,
    pub start: usize,
    pub end: usize,
    /// Execution order, M_Q first.
    pub records: Vec<StageRecord>,
}

impl DecryptionPass {
    pub fn output(&self) -> Option<&Batch> {
        self.records.last().map(|r| &r.output)
    }

    pub fn input(&self) -> Option<&Batch> {
        self.records.first().map(|r| &r.input)
    }
}

/// The mix-net part of a public record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixTranscript {
    pub initial: Batch,
    /// Ascending server index.
    pub encryption: Vec<StageRecord>,
    pub passes: Vec<DecryptionPass>,
}

impl MixTranscript {
    pub fn encrypted(&self) -> &Batch {
        self.encryption.last().map_or(&self.initial, |r| &r.output)
    }

    pub fn pass(&self, name: &str) -> Option<&DecryptionPass> {
        self.passes.iter().find(|p| p.pass == name)
    }

    fn pass_mut(&mut self, name: &str) -> Option<&mut DecryptionPass> {
        self.passes.iter_mut().find(|p| p.pass == name)
    }

    /// Replaces one tuple and every downstream copy of it.
    pub fn apply_patch(&mut self, patch: &Patch) -> Result<(), AuditError> {
        match patch {
            Patch::Encryption { server_index, slot, tuple, kappa } => {
                let q = *server_index;
                let count = self.encryption.len();
                if q == 0 || q > count {
                    return Err(AuditError::Malformed(format!("patch names unknown server {q}")));
                }
                let record = &mut self.encryption[q - 1];
                *record.output.items.get_mut(*slot).ok_or_else(|| AuditError::Malformed(format!("patch names unknown slot {slot}")))? =
                    tuple.clone();
                record.kappa = kappa.clone();
                if q < count {
                    self.encryption[q].input.items[*slot] = tuple.clone();
                } else {
                    for pass in &mut self.passes {
                        if let Some(first) = pass.records.first_mut() {
                            if let Some(i) = first.input.index_of_slot(*slot) {
                                first.input.items[i] = tuple[pass.start..pass.end].to_vec();
                            }
                        }
                    }
                }
            }
            Patch::Decryption { pass, server_index, slot, tuple } => {
                let entry = self.pass_mut(pass).ok_or_else(|| AuditError::Malformed(format!("patch names unknown pass {pass}")))?;
                let at = entry
                    .records
                    .iter()
                    .position(|r| r.server_index == *server_index)
                    .ok_or_else(|| AuditError::Malformed(format!("patch names unknown server {server_index}")))?;
                let i = entry.records[at]
                    .output
                    .index_of_slot(*slot)
                    .ok_or_else(|| AuditError::Malformed(format!("patch names unknown slot {slot}")))?;
                entry.records[at].output.items[i] = tuple.clone();
                if let Some(next) = entry.records.get_mut(at + 1) {
                    next.input.items[i] = tuple.clone();
                }
            }
        }
        Ok(())
    }
}

/// A published replacement produced by reprocessing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Patch {
    Encryption { server_index: usize, slot: usize, tuple: Tuple, kappa: Vec<AnchorSum> },
    Decryption { pass: String, server_index: usize, slot: usize, tuple: Tuple },
}

/// Challenge and answer for one component, published after the fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhExchange {
    pub component: usize,
    pub challenge: DhChallenge,
    #[serde(with = "crate::hex::option")]
    pub response: Option<BigUint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHop {
    pub direction: Direction,
    pub server_index: usize,
    /// Slot at this server's output.
    pub slot: usize,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<DhExchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opening: Option<EncryptionOpening>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Server { direction: Direction, server_index: usize, slot: usize },
    InitialForm { initial_slot: usize },
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub pass: String,
    pub slot: usize,
    pub verdict: Verdict,
    pub hops: Vec<TraceHop>,
}

fn responder<'a>(responders: &'a [&'a dyn Responder], index: usize) -> Option<&'a dyn Responder> {
    responders.iter().copied().find(|r| r.server_index() == index)
}

fn public_y(public: &[PublicShare], index: usize) -> Result<&BigUint, AuditError> {
    public
        .iter()
        .find(|s| s.server_index == index)
        .map(|s| &s.y)
        .ok_or_else(|| AuditError::Incomplete(format!("no public share for server {index}")))
}

/// Walks the item at `slot` back from its final form: decryption hops from
/// M_1 to M_Q, then encryption hops from M_Q to M_1. The first hop that
/// fails names the culprit.
pub fn trace_item<R: RngCore + ?Sized>(
    ctx: &StageContext,
    public: &[PublicShare],
    transcript: &MixTranscript,
    pass: &str,
    slot: usize,
    responders: &[&dyn Responder],
    rng: &mut R,
) -> Result<TraceOutcome, AuditError> {
    let params = &ctx.params;
    let entry = transcript.pass(pass).ok_or_else(|| AuditError::Incomplete(format!("no pass {pass}")))?;
    let final_batch = entry.output().ok_or_else(|| AuditError::Incomplete(format!("pass {pass} has no records")))?;
    let index = final_batch.index_of_slot(slot).ok_or_else(|| AuditError::Malformed(format!("slot {slot} not in pass {pass}")))?;
    let item_ok = check_item(params, &final_batch.items[index]);
    let mut hops = Vec::new();

    for record in entry.records.iter().rev() {
        let q = record.server_index;
        let y = public_y(public, q)?;
        let (input, output) = (&record.input.items[index], &record.output.items[index]);
        let mut exchanges = Vec::with_capacity(input.len());
        let mut passed = input.len() == output.len();
        for (component, (ci, co)) in input.iter().zip(output).enumerate() {
            passed &= ci.a == co.a;
            let challenge = match random_dh_challenge(params, y, ci, co, rng) {
                Ok(c) => c,
                Err(_) => {
                    passed = false;
                    continue;
                }
            };
            let response = responder(responders, q).and_then(|r| r.respond_dh(params, pass, slot, &challenge.g_star));
            passed &= response.as_ref().is_some_and(|v| dh_challenge_verify(&challenge, v));
            exchanges.push(DhExchange { component, challenge, response });
        }
        hops.push(TraceHop { direction: Direction::Decryption, server_index: q, slot, passed, exchanges, opening: None });
        if !passed {
            return Ok(TraceOutcome {
                pass: pass.into(),
                slot,
                verdict: Verdict::Server { direction: Direction::Decryption, server_index: q, slot },
                hops,
            });
        }
    }

    let mut current = slot;
    for record in transcript.encryption.iter().rev() {
        let q = record.server_index;
        let opening = responder(responders, q).and_then(|r| r.open_encryption(current));
        let passed = opening.as_ref().is_some_and(|o| o.output_slot == current && o.justifies(ctx, record));
        let next = opening.as_ref().map(|o| o.input_slot);
        hops.push(TraceHop { direction: Direction::Encryption, server_index: q, slot: current, passed, exchanges: Vec::new(), opening });
        if !passed {
            return Ok(TraceOutcome {
                pass: pass.into(),
                slot,
                verdict: Verdict::Server { direction: Direction::Encryption, server_index: q, slot: current },
                hops,
            });
        }
        current = next.expect("passed hops carry an opening");
    }

    let verdict = if item_ok { Verdict::None } else { Verdict::InitialForm { initial_slot: current } };
    Ok(TraceOutcome { pass: pass.into(), slot, verdict, hops })
}

/// Re-derives every hop of a published trace and its verdict from the
/// transcript alone.
pub fn recheck_trace(ctx: &StageContext, public: &[PublicShare], transcript: &MixTranscript, outcome: &TraceOutcome) -> bool {
    let params = &ctx.params;
    let Some(entry) = transcript.pass(&outcome.pass) else { return false };
    let Some(index) = entry.output().and_then(|b| b.index_of_slot(outcome.slot)) else { return false };
    let mut dec_records = entry.records.iter().rev();
    let mut enc_records = transcript.encryption.iter().rev();
    let mut current = outcome.slot;
    let mut verdict = None;
    for hop in &outcome.hops {
        if verdict.is_some() {
            return false;
        }
        let ok = match hop.direction {
            Direction::Decryption => {
                let Some(record) = dec_records.next() else { return false };
                let Ok(y) = public_y(public, record.server_index) else { return false };
                if record.server_index != hop.server_index || hop.slot != outcome.slot {
                    return false;
                }
                let (input, output) = (&record.input.items[index], &record.output.items[index]);
                let replay = hop.exchanges.len() == input.len()
                    && hop.exchanges.iter().enumerate().all(|(c, ex)| {
                        ex.component == c
                            && dh_challenge(params, y, &input[c], &output[c], &ex.challenge.psi, &ex.challenge.bind).as_ref()
                                == Ok(&ex.challenge)
                    });
                let ok = replay
                    && input.iter().zip(output).all(|(a, b)| a.a == b.a)
                    && hop.exchanges.iter().all(|ex| ex.response.as_ref().is_some_and(|r| dh_challenge_verify(&ex.challenge, r)));
                if !replay && hop.passed {
                    return false;
                }
                ok
            }
            Direction::Encryption => {
                if dec_records.next().is_some() {
                    return false;
                }
                let Some(record) = enc_records.next() else { return false };
                if record.server_index != hop.server_index || hop.slot != current {
                    return false;
                }
                let ok = hop.opening.as_ref().is_some_and(|o| o.output_slot == current && o.justifies(ctx, record));
                if ok {
                    current = hop.opening.as_ref().map(|o| o.input_slot).unwrap_or(current);
                }
                ok
            }
        };
        if ok != hop.passed {
            return false;
        }
        if !ok {
            verdict = Some(Verdict::Server { direction: hop.direction, server_index: hop.server_index, slot: hop.slot });
        }
    }
    let expected = match verdict {
        Some(v) => v,
        None => {
            if dec_records.next().is_some() || enc_records.next().is_some() {
                return false;
            }
            let final_batch = entry.output().expect("index found above");
            if check_item(params, &final_batch.items[index]) {
                Verdict::None
            } else {
                Verdict::InitialForm { initial_slot: current }
            }
        }
    };
    expected == outcome.verdict
}

/// A disclosed decryption key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclosedKey {
    pub server_index: usize,
    #[serde(with = "crate::hex")]
    pub x: BigUint,
}

/// Keys of servers `1..=count`; refuses to reveal all `Q`.
pub fn disclose_tail_keys(keys: &[KeyShare], count: usize) -> Result<Vec<DisclosedKey>, AuditError> {
    if count >= keys.len() {
        return Err(AuditError::TailKeysRefused { count, servers: keys.len() });
    }
    Ok((1..=count)
        .map(|i| {
            let key = keys.iter().find(|k| k.server_index == i).expect("indices are 1..=Q");
            DisclosedKey { server_index: i, x: key.x.clone() }
        })
        .collect())
}

/// Re-executes the disclosed servers' partial decryptions.
pub fn recheck_tail_keys(ctx: &StageContext, public: &[PublicShare], transcript: &MixTranscript, keys: &[DisclosedKey]) -> bool {
    let params = &ctx.params;
    keys.iter().all(|key| {
        public_y(public, key.server_index).is_ok_and(|y| params.g_pow(&key.x) == *y)
            && transcript.passes.iter().flat_map(|p| &p.records).filter(|r| r.server_index == key.server_index).all(|r| {
                r.input
                    .items
                    .iter()
                    .zip(&r.output.items)
                    .all(|(i, o)| i.iter().map(|c| partial_decrypt_with(params, c, &key.x)).eq(o.iter().cloned()))
            })
    })
}

fn server_mut(servers: &mut [MixServer], index: usize) -> Result<&mut MixServer, AuditError> {
    servers.iter_mut().find(|s| s.index() == index).ok_or_else(|| AuditError::Reprocess(format!("server {index} unavailable")))
}

/// Recomputes the item passing through encryption slot `slot` of server
/// `culprit` and everything downstream of it, applying each patch to
/// `transcript` as it goes. Every decryption pass containing the final
/// slot is then redone for that slot.
pub fn reprocess_encryption(
    ctx: &StageContext,
    transcript: &mut MixTranscript,
    servers: &mut [MixServer],
    culprit: usize,
    slot: usize,
) -> Result<Vec<Patch>, AuditError> {
    let count = transcript.encryption.len();
    if culprit == 0 || culprit > count {
        return Err(AuditError::Reprocess(format!("no encryption server {culprit}")));
    }
    let mut patches = Vec::new();
    let mut out_slot = slot;
    let mut input: Option<Tuple> = None;
    for q in culprit..=count {
        let server = server_mut(servers, q)?;
        let permutation = &server
            .state
            .encryption
            .as_ref()
            .ok_or_else(|| AuditError::Reprocess(format!("server {q} has no encryption state")))?
            .permutation;
        if q > culprit {
            out_slot = permutation
                .iter()
                .position(|&i| i == out_slot)
                .ok_or_else(|| AuditError::Reprocess("slot missing from permutation".into()))?;
        }
        let source = match input.take() {
            Some(t) => t,
            None => {
                let in_slot = *permutation.get(out_slot).ok_or_else(|| AuditError::Reprocess(format!("no slot {out_slot}")))?;
                transcript.encryption[q - 1].input.items[in_slot].clone()
            }
        };
        let (tuple, old) = server
            .reencrypt_slot(ctx, out_slot, &source)
            .ok_or_else(|| AuditError::Reprocess(format!("server {q} cannot recompute slot {out_slot}")))?;
        let fresh = server.state.encryption.as_ref().expect("checked above").exponents[out_slot].0.clone();
        let kappa = transcript.encryption[q - 1]
            .kappa
            .iter()
            .map(|s| AnchorSum {
                position: s.position,
                value: ctx.params.exp_add(&ctx.params.exp_sub(&s.value, &old[s.position]), &fresh[s.position]),
            })
            .collect();
        let patch = Patch::Encryption { server_index: q, slot: out_slot, tuple: tuple.clone(), kappa };
        transcript.apply_patch(&patch)?;
        patches.push(patch);
        input = Some(tuple);
    }
    let names: Vec<String> = transcript
        .passes
        .iter()
        .filter(|p| p.input().is_some_and(|b| b.index_of_slot(out_slot).is_some()))
        .map(|p| p.pass.clone())
        .collect();
    for name in names {
        let first = transcript.pass(&name).and_then(|p| p.records.first()).map(|r| r.server_index).unwrap_or(count);
        patches.extend(reprocess_decryption(ctx, transcript, servers, &name, first, out_slot)?);
    }
    Ok(patches)
}

/// Redoes `slot` of `pass` from server `culprit` onwards in execution
/// order, applying each patch to `transcript`.
pub fn reprocess_decryption(
    ctx: &StageContext,
    transcript: &mut MixTranscript,
    servers: &mut [MixServer],
    pass: &str,
    culprit: usize,
    slot: usize,
) -> Result<Vec<Patch>, AuditError> {
    let entry = transcript.pass(pass).ok_or_else(|| AuditError::Reprocess(format!("no pass {pass}")))?;
    let start = entry
        .records
        .iter()
        .position(|r| r.server_index == culprit)
        .ok_or_else(|| AuditError::Reprocess(format!("server {culprit} not in pass {pass}")))?;
    let order: Vec<usize> = entry.records[start..].iter().map(|r| r.server_index).collect();
    let mut patches = Vec::with_capacity(order.len());
    for (offset, q) in order.into_iter().enumerate() {
        let record = &transcript.pass(pass).expect("found above").records[start + offset];
        let i = record.input.index_of_slot(slot).ok_or_else(|| AuditError::Reprocess(format!("slot {slot} not in pass {pass}")))?;
        let input = record.input.items[i].clone();
        let tuple = server_mut(servers, q)?.redecrypt_slot(ctx, pass, slot, &input);
        let patch = Patch::Decryption { pass: pass.into(), server_index: q, slot, tuple };
        transcript.apply_patch(&patch)?;
        patches.push(patch);
    }
    Ok(patches)
}

/// Reprocesses according to a verdict. `None` and initial-form verdicts
/// produce no patches.
pub fn reprocess(
    ctx: &StageContext,
    transcript: &mut MixTranscript,
    servers: &mut [MixServer],
    outcome: &TraceOutcome,
) -> Result<Vec<Patch>, AuditError> {
    match outcome.verdict {
        Verdict::Server { direction: Direction::Encryption, server_index, slot } => {
            reprocess_encryption(ctx, transcript, servers, server_index, slot)
        }
        Verdict::Server { direction: Direction::Decryption, server_index, slot } => {
            reprocess_decryption(ctx, transcript, servers, &outcome.pass, server_index, slot)
        }
        Verdict::InitialForm { .. } => Err(AuditError::Reprocess("initial form is inconsistent".into())),
        Verdict::None => Ok(Vec::new()),
    }
}

/// Result of a full offline verification.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub stage_checks: Vec<StageCheck>,
    pub sigma_checks: Vec<bool>,
    pub gd_check: Option<bool>,
    pub item_checks: Vec<ItemCheck>,
    /// Verdicts of published traces for items that still fail.
    pub liable: Vec<TraceOutcome>,
    /// Traced items fixed by published patches.
    pub resolved_incidents: usize,
    pub membership_violations: Vec<String>,
    pub trace_checks_ok: bool,
    pub seal_checks_ok: bool,
    pub grouping_ok: bool,
    pub tally_ok: bool,
    pub tail_keys_ok: Option<bool>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCheck {
    pub pass: String,
    pub slot: usize,
    pub ok: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn failing_slots(&self) -> Vec<(String, usize)> {
        self.item_checks.iter().filter(|c| !c.ok).map(|c| (c.pass.clone(), c.slot)).collect()
    }
}
