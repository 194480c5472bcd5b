//! Staged batch processing: the encryption stage (re-encrypt and shuffle)
//! and the decryption stage (partial decryption in place).
//!
//! A server's step output is fully described by its [`StageRecord`]; the
//! secrets needed to justify the step later live in its
//! [`ServerPrivateState`].

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::group::{partial_decrypt_with, reencrypt, Ciphertext, GroupParams, KeyShare};
use crate::parallel::Execution;

/// Largest supported tuple arity (two revised triples side by side).
pub const MAX_ARITY: usize = 6;

pub type Tuple = Vec<Ciphertext>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MixError {
    #[error("tuple arity {0} is outside 1..={MAX_ARITY}")]
    ArityOutOfRange(usize),
    #[error("item {item} has arity {found}, expected {expected}")]
    ArityMismatch { item: usize, expected: usize, found: usize },
    #[error("batch has {items} items but {slots} slot ids")]
    SlotCountMismatch { items: usize, slots: usize },
    #[error("server {server_index}: {reason}")]
    AtServer { server_index: usize, reason: String },
}

/// Public, shared parameters of a stage run.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub params: GroupParams,
    pub y_star: BigUint,
    pub exec: Execution,
}

impl StageContext {
    pub fn new(params: GroupParams, y_star: BigUint) -> Self {
        Self { params, y_star, exec: Execution::default() }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }
}

/// An ordered list of equal-arity ciphertext tuples.
///
/// `slot_ids` label positions publicly; the decryption stage uses them to
/// name which encryption-stage output slot each item came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Batch {
    pub items: Vec<Tuple>,
    pub slot_ids: Vec<usize>,
}

impl Batch {
    /// Items labelled `0..n`.
    pub fn new(items: Vec<Tuple>) -> Result<Self, MixError> {
        let slot_ids = (0..items.len()).collect();
        Self::with_slots(items, slot_ids)
    }

    pub fn with_slots(items: Vec<Tuple>, slot_ids: Vec<usize>) -> Result<Self, MixError> {
        let batch = Self { items, slot_ids };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<(), MixError> {
        if self.items.len() != self.slot_ids.len() {
            return Err(MixError::SlotCountMismatch { items: self.items.len(), slots: self.slot_ids.len() });
        }
        let Some(first) = self.items.first() else { return Ok(()) };
        let expected = first.len();
        if expected == 0 || expected > MAX_ARITY {
            return Err(MixError::ArityOutOfRange(expected));
        }
        for (item, tuple) in self.items.iter().enumerate() {
            if tuple.len() != expected {
                return Err(MixError::ArityMismatch { item, expected, found: tuple.len() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.items.first().map_or(0, Vec::len)
    }

    pub fn index_of_slot(&self, slot: usize) -> Option<usize> {
        self.slot_ids.iter().position(|&s| s == slot)
    }

    /// The same slots restricted to component positions `range`.
    pub fn project(&self, range: std::ops::Range<usize>) -> Batch {
        Batch { items: self.items.iter().map(|t| t[range.clone()].to_vec()).collect(), slot_ids: self.slot_ids.clone() }
    }

    /// Selected slots, in the order given.
    pub fn select(&self, slots: &[usize], range: std::ops::Range<usize>) -> Option<Batch> {
        let mut items = Vec::with_capacity(slots.len());
        for &slot in slots {
            let i = self.index_of_slot(slot)?;
            items.push(self.items[i][range.clone()].to_vec());
        }
        Some(Batch { items, slot_ids: slots.to_vec() })
    }
}

/// Tuple positions carrying disclosed exponent aggregates: every third
/// position starting at 0, i.e. the first ciphertext of each triple.
pub fn anchor_positions(arity: usize) -> Vec<usize> {
    (0..arity).step_by(3).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Encryption,
    Decryption,
}

/// A disclosed exponent sum at one anchor position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSum {
    pub position: usize,
    #[serde(with = "crate::hex")]
    pub value: BigUint,
}

pub fn anchor_value(sums: &[AnchorSum], position: usize) -> Option<&BigUint> {
    sums.iter().find(|s| s.position == position).map(|s| &s.value)
}

/// Everything one server publishes about one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub server_index: usize,
    pub direction: Direction,
    pub input: Batch,
    pub output: Batch,
    /// Sum of this server's re-encryption exponents per anchor position.
    pub kappa: Vec<AnchorSum>,
    /// Sum of this server's unknown-number exponents per anchor position.
    pub sigma: Vec<AnchorSum>,
    /// One salted digest per output slot binding it to its input slot.
    pub permutation_commitment: Vec<String>,
}

/// Commitment leaf for output slot `output_slot` fed by `input_slot`.
pub fn permutation_leaf(output_slot: usize, input_slot: usize, salt: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"perm");
    hasher.update((output_slot as u64).to_be_bytes());
    hasher.update((input_slot as u64).to_be_bytes());
    hasher.update(salt);
    to_hex(&hasher.finalize())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn from_hex(text: &str) -> Option<Vec<u8>> {
    if !text.len().is_multiple_of(2) {
        return None;
    }
    (0..text.len()).step_by(2).map(|i| u8::from_str_radix(text.get(i..i + 2)?, 16).ok()).collect()
}

/// What a server reveals about one output slot when traced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptionOpening {
    pub output_slot: usize,
    pub input_slot: usize,
    pub salt: String,
    #[serde(with = "crate::hex::vec")]
    pub exponents: Vec<BigUint>,
}

impl EncryptionOpening {
    /// Checks the opening against the record it claims to justify.
    pub fn justifies(&self, ctx: &StageContext, record: &StageRecord) -> bool {
        let Some(leaf) = record.permutation_commitment.get(self.output_slot) else { return false };
        let Some(salt) = from_hex(&self.salt) else { return false };
        if permutation_leaf(self.output_slot, self.input_slot, &salt) != *leaf {
            return false;
        }
        let (Some(input), Some(output)) = (record.input.items.get(self.input_slot), record.output.items.get(self.output_slot)) else {
            return false;
        };
        if self.exponents.len() != input.len() || input.len() != output.len() {
            return false;
        }
        input
            .iter()
            .zip(&self.exponents)
            .zip(output)
            .all(|((c, k), out)| *k < ctx.params.q && reencrypt(&ctx.params, &ctx.y_star, c, k) == *out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentRow(#[serde(with = "crate::hex::vec")] pub Vec<BigUint>);

/// Secrets behind one encryption-stage step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptionSecrets {
    /// `permutation[i]` is the input slot feeding output slot `i`.
    pub permutation: Vec<usize>,
    pub salts: Vec<String>,
    /// Exponents per output slot and component.
    pub exponents: Vec<ExponentRow>,
}

/// A partial decryption performed with something other than the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptDeviation {
    pub pass: String,
    pub slot: usize,
    #[serde(with = "crate::hex")]
    pub exponent: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerPrivateState {
    pub key: KeyShare,
    pub encryption: Option<EncryptionSecrets>,
    pub deviations: Vec<DecryptDeviation>,
}

impl ServerPrivateState {
    /// Reveals the permutation entry and exponents behind `output_slot`.
    pub fn open_encryption(&self, output_slot: usize) -> Option<EncryptionOpening> {
        let secrets = self.encryption.as_ref()?;
        Some(EncryptionOpening {
            output_slot,
            input_slot: *secrets.permutation.get(output_slot)?,
            salt: secrets.salts.get(output_slot)?.clone(),
            exponents: secrets.exponents.get(output_slot)?.0.clone(),
        })
    }

    /// Exponent actually stripped from `slot` during `pass`.
    pub fn exponent_used(&self, pass: &str, slot: usize) -> &BigUint {
        self.deviations.iter().rev().find(|d| d.pass == pass && d.slot == slot).map_or(&self.key.x, |d| &d.exponent)
    }

    /// Answers a Diffie-Hellman challenge with the exponent this server
    /// actually applied to `slot`.
    pub fn respond_dh(&self, params: &GroupParams, pass: &str, slot: usize, challenge: &BigUint) -> BigUint {
        params.pow(challenge, self.exponent_used(pass, slot))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecryptFaultKind {
    /// Passes the item through untouched.
    Skip,
    /// Strips `x + 1` instead of `x`.
    WrongKey,
}

/// A scripted deviation; each fires once and is then discarded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Multiplies output slot `first` at `position` by `lambda` and output
    /// slot `second` by its inverse, leaving batch products unchanged.
    LambdaScale {
        #[serde(with = "crate::hex")]
        lambda: BigUint,
        first: usize,
        second: usize,
        position: usize,
    },
    Decrypt {
        pass: String,
        slot: usize,
        fault: DecryptFaultKind,
    },
}

/// A mix server: key share, private state, RNG and scripted faults.
#[derive(Debug, Clone)]
pub struct MixServer {
    pub state: ServerPrivateState,
    pub faults: Vec<Fault>,
    rng: ChaCha20Rng,
}

impl MixServer {
    pub fn new(key: KeyShare, rng: ChaCha20Rng) -> Self {
        Self { state: ServerPrivateState { key, encryption: None, deviations: Vec::new() }, faults: Vec::new(), rng }
    }

    pub fn index(&self) -> usize {
        self.state.key.server_index
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    fn take_lambda_fault(&mut self) -> Option<(BigUint, usize, usize, usize)> {
        let i = self.faults.iter().position(|f| matches!(f, Fault::LambdaScale { .. }))?;
        match self.faults.remove(i) {
            Fault::LambdaScale { lambda, first, second, position } => Some((lambda, first, second, position)),
            _ => unreachable!(),
        }
    }

    fn take_decrypt_fault(&mut self, pass: &str, slot: usize) -> Option<DecryptFaultKind> {
        let i = self.faults.iter().position(|f| matches!(f, Fault::Decrypt { pass: p, slot: s, .. } if p == pass && *s == slot))?;
        match self.faults.remove(i) {
            Fault::Decrypt { fault, .. } => Some(fault),
            _ => unreachable!(),
        }
    }

    pub fn open_encryption(&self, output_slot: usize) -> Option<EncryptionOpening> {
        self.state.open_encryption(output_slot)
    }

    pub fn exponent_used(&self, pass: &str, slot: usize) -> &BigUint {
        self.state.exponent_used(pass, slot)
    }

    pub fn respond_dh(&self, params: &GroupParams, pass: &str, slot: usize, challenge: &BigUint) -> BigUint {
        self.state.respond_dh(params, pass, slot, challenge)
    }

    /// Recomputes `output_slot` honestly from a (possibly new) input tuple
    /// with fresh exponents. Returns the new tuple; the stored exponents are
    /// replaced.
    pub fn reencrypt_slot(&mut self, ctx: &StageContext, output_slot: usize, input: &Tuple) -> Option<(Tuple, Vec<BigUint>)> {
        let fresh: Vec<BigUint> = input.iter().map(|_| ctx.params.random_exponent_or_zero(&mut self.rng)).collect();
        let secrets = self.state.encryption.as_mut()?;
        let row = secrets.exponents.get_mut(output_slot)?;
        let old = std::mem::replace(&mut row.0, fresh.clone());
        let tuple = input.iter().zip(&fresh).map(|(c, k)| reencrypt(&ctx.params, &ctx.y_star, c, k)).collect();
        Some((tuple, old))
    }

    /// Honest partial decryption of one tuple, clearing any recorded
    /// deviation for the slot.
    pub fn redecrypt_slot(&mut self, ctx: &StageContext, pass: &str, slot: usize, input: &Tuple) -> Tuple {
        self.state.deviations.retain(|d| !(d.pass == pass && d.slot == slot));
        input.iter().map(|c| partial_decrypt_with(&ctx.params, c, &self.state.key.x)).collect()
    }
}

/// One server's re-encrypt-and-shuffle step.
pub fn encryption_stage_step(ctx: &StageContext, server: &mut MixServer, batch: &Batch) -> Result<(Batch, StageRecord), MixError> {
    batch.validate()?;
    let n = batch.len();
    let arity = batch.arity();
    let params = &ctx.params;

    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut server.rng);
    let exponents: Vec<Vec<BigUint>> =
        (0..n).map(|_| (0..arity).map(|_| params.random_exponent_or_zero(&mut server.rng)).collect()).collect();
    let salts: Vec<[u8; 32]> = (0..n)
        .map(|_| {
            let mut salt = [0u8; 32];
            server.rng.fill_bytes(&mut salt);
            salt
        })
        .collect();

    let mut items: Vec<Tuple> = ctx.exec.map_range(n, |i| {
        batch.items[permutation[i]].iter().zip(&exponents[i]).map(|(c, k)| reencrypt(params, &ctx.y_star, c, k)).collect()
    });

    if let Some((lambda, first, second, position)) = server.take_lambda_fault() {
        if first >= n || second >= n || first == second || position >= arity {
            return Err(MixError::AtServer { server_index: server.index(), reason: "lambda fault site absent".into() });
        }
        let inverse = params
            .inv(&lambda)
            .ok_or_else(|| MixError::AtServer { server_index: server.index(), reason: "lambda is not invertible".into() })?;
        let slot = &mut items[first][position];
        slot.b = params.mul(&slot.b, &lambda);
        let slot = &mut items[second][position];
        slot.b = params.mul(&slot.b, &inverse);
    }

    let kappa = anchor_positions(arity)
        .into_iter()
        .map(|position| AnchorSum { position, value: params.exp_sum(exponents.iter().map(|row| &row[position])) })
        .collect();
    let permutation_commitment = (0..n).map(|i| permutation_leaf(i, permutation[i], &salts[i])).collect();

    server.state.encryption = Some(EncryptionSecrets {
        permutation,
        salts: salts.iter().map(|s| to_hex(s)).collect(),
        exponents: exponents.into_iter().map(ExponentRow).collect(),
    });

    let output = Batch { items, slot_ids: (0..n).collect() };
    let record = StageRecord {
        server_index: server.index(),
        direction: Direction::Encryption,
        input: batch.clone(),
        output: output.clone(),
        kappa,
        sigma: Vec::new(),
        permutation_commitment,
    };
    Ok((output, record))
}

/// One server's partial-decryption step. Order and slot ids are preserved.
pub fn decryption_stage_step(
    ctx: &StageContext,
    server: &mut MixServer,
    batch: &Batch,
    pass: &str,
) -> Result<(Batch, StageRecord), MixError> {
    batch.validate()?;
    let params = &ctx.params;
    let x = server.state.key.x.clone();

    let mut exponents = Vec::with_capacity(batch.len());
    for &slot in &batch.slot_ids {
        let exponent = match server.take_decrypt_fault(pass, slot) {
            None => x.clone(),
            Some(DecryptFaultKind::Skip) => BigUint::zero(),
            Some(DecryptFaultKind::WrongKey) => {
                let wrong = (&x + 1u32) % &params.q;
                if wrong.is_zero() {
                    BigUint::one()
                } else {
                    wrong
                }
            }
        };
        if exponent != x {
            server.state.deviations.push(DecryptDeviation { pass: pass.to_string(), slot, exponent: exponent.clone() });
        }
        exponents.push(exponent);
    }

    let items = ctx.exec.map(&batch.items, |i, tuple| tuple.iter().map(|c| partial_decrypt_with(params, c, &exponents[i])).collect());
    let output = Batch { items, slot_ids: batch.slot_ids.clone() };
    let record = StageRecord {
        server_index: server.index(),
        direction: Direction::Decryption,
        input: batch.clone(),
        output: output.clone(),
        kappa: Vec::new(),
        sigma: Vec::new(),
        permutation_commitment: Vec::new(),
    };
    Ok((output, record))
}

/// Runs `servers` (index order 1..Q) over the batch in ascending order.
pub fn run_encryption_stage(ctx: &StageContext, servers: &mut [MixServer], batch: &Batch) -> Result<(Batch, Vec<StageRecord>), MixError> {
    let mut current = batch.clone();
    let mut records = Vec::with_capacity(servers.len());
    for server in servers.iter_mut() {
        let index = server.index();
        let (next, record) =
            encryption_stage_step(ctx, server, &current).map_err(|e| MixError::AtServer { server_index: index, reason: e.to_string() })?;
        records.push(record);
        current = next;
    }
    Ok((current, records))
}

/// Runs `servers` (index order 1..Q) over the batch from M_Q down to M_1.
pub fn run_decryption_stage(
    ctx: &StageContext,
    servers: &mut [MixServer],
    batch: &Batch,
    pass: &str,
) -> Result<(Batch, Vec<StageRecord>), MixError> {
    let mut current = batch.clone();
    let mut records = Vec::with_capacity(servers.len());
    for server in servers.iter_mut().rev() {
        let index = server.index();
        let (next, record) = decryption_stage_step(ctx, server, &current, pass)
            .map_err(|e| MixError::AtServer { server_index: index, reason: e.to_string() })?;
        records.push(record);
        current = next;
    }
    Ok((current, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{encrypt, KeyShare};
    use crate::rng::derive_rng;
    use proptest::prelude::*;

    fn n(v: u32) -> BigUint {
        BigUint::from(v)
    }

    fn toy_servers(xs: &[u32]) -> (StageContext, Vec<MixServer>) {
        let params = GroupParams::toy(5);
        let keys: Vec<KeyShare> = xs.iter().enumerate().map(|(i, &x)| KeyShare::from_secret(&params, i + 1, n(x)).unwrap()).collect();
        let y_star = params.product(keys.iter().map(|k| &k.y));
        let servers = keys.into_iter().map(|k| MixServer::new(k.clone(), derive_rng(7, &format!("s{}", k.server_index)))).collect();
        (StageContext::new(params, y_star), servers)
    }

    #[test]
    fn toy_reencryption_example() {
        let (ctx, _) = toy_servers(&[3, 5]);
        assert_eq!(ctx.y_star, n(3));
        let c = Ciphertext::new(9u32, 6u32);
        assert_eq!(reencrypt(&ctx.params, &ctx.y_star, &c, &n(2)), Ciphertext::new(13u32, 8u32));
        // an opening carrying k = 2 justifies the (9,6) -> (13,8) step
        let salt = [1u8; 32];
        let record = StageRecord {
            server_index: 1,
            direction: Direction::Encryption,
            input: Batch::new(vec![vec![c]]).unwrap(),
            output: Batch::new(vec![vec![Ciphertext::new(13u32, 8u32)]]).unwrap(),
            kappa: vec![AnchorSum { position: 0, value: n(2) }],
            sigma: vec![],
            permutation_commitment: vec![permutation_leaf(0, 0, &salt)],
        };
        let opening = EncryptionOpening { output_slot: 0, input_slot: 0, salt: to_hex(&salt), exponents: vec![n(2)] };
        assert!(opening.justifies(&ctx, &record));
        let wrong = EncryptionOpening { exponents: vec![n(3)], ..opening };
        assert!(!wrong.justifies(&ctx, &record));
    }

    #[test]
    fn arity_checks() {
        let c = Ciphertext::new(1u32, 4u32);
        assert_eq!(
            Batch::new(vec![vec![c.clone()], vec![c.clone(), c.clone()]]),
            Err(MixError::ArityMismatch { item: 1, expected: 1, found: 2 })
        );
        assert_eq!(Batch::new(vec![vec![c.clone(); 7]]), Err(MixError::ArityOutOfRange(7)));
        assert_eq!(Batch::new(vec![vec![]]), Err(MixError::ArityOutOfRange(0)));
        assert!(Batch::new(vec![vec![c; 6]]).is_ok());
    }

    #[test]
    fn empty_batch_runs() {
        let (ctx, mut servers) = toy_servers(&[3, 5, 7]);
        let (out, records) = run_encryption_stage(&ctx, &mut servers, &Batch::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(records.len(), 3);
        for r in &records {
            assert_eq!(r.kappa, Vec::<AnchorSum>::new());
        }
    }

    #[test]
    fn decryption_example_and_order_independence() {
        let (ctx, mut servers) = toy_servers(&[3, 5]);
        let c = encrypt(&ctx.params, &ctx.y_star, &n(4), &n(5)).unwrap();
        let batch = Batch::new(vec![vec![c.clone()]]).unwrap();
        let (out, records) = run_decryption_stage(&ctx, &mut servers, &batch, "main").unwrap();
        assert_eq!(out.items[0][0], Ciphertext::new(9u32, 4u32));
        assert_eq!(records[0].server_index, 2);
        let mut reversed: Vec<MixServer> = servers.iter().rev().cloned().collect();
        let (out2, _) = run_decryption_stage(&ctx, &mut reversed, &batch, "main").unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn zero_key_is_identity() {
        let params = GroupParams::toy(5);
        let c = Ciphertext::new(9u32, 6u32);
        assert_eq!(partial_decrypt_with(&params, &c, &n(0)), c);
    }

    #[test]
    fn faults_fire_once_and_are_recorded() {
        let (ctx, mut servers) = toy_servers(&[3, 5]);
        let c = encrypt(&ctx.params, &ctx.y_star, &n(4), &n(5)).unwrap();
        let batch = Batch::new(vec![vec![c.clone()], vec![c]]).unwrap();
        servers[0].faults.push(Fault::Decrypt { pass: "main".into(), slot: 1, fault: DecryptFaultKind::Skip });
        let (out, _) = run_decryption_stage(&ctx, &mut servers, &batch, "main").unwrap();
        assert_eq!(out.items[0][0].b, n(4));
        assert_ne!(out.items[1][0].b, n(4));
        assert!(servers[0].faults.is_empty());
        assert_eq!(servers[0].exponent_used("main", 1), &n(0));
        assert_eq!(servers[0].exponent_used("main", 0), &n(3));
    }

    fn decrypt_all(ctx: &StageContext, servers: &[MixServer], batch: &Batch) -> Vec<Vec<BigUint>> {
        let x = ctx.params.exp_sum(servers.iter().map(|s| &s.state.key.x));
        batch.items.iter().map(|t| t.iter().map(|c| partial_decrypt_with(&ctx.params, c, &x).b).collect()).collect()
    }

    #[test]
    fn exhaustive_multiset_preservation_toy() {
        // every QR plaintext pair, one and three servers
        let qr: Vec<u32> = (1..23).filter(|m| GroupParams::toy(5).in_subgroup(&n(*m))).collect();
        for xs in [vec![3u32], vec![3, 5, 9]] {
            let (ctx, mut servers) = toy_servers(&xs);
            for &m1 in &qr {
                for &m2 in &qr {
                    let items = vec![
                        vec![
                            encrypt(&ctx.params, &ctx.y_star, &n(m1), &n(1)).unwrap(),
                            encrypt(&ctx.params, &ctx.y_star, &n(m2), &n(2)).unwrap(),
                        ],
                        vec![
                            encrypt(&ctx.params, &ctx.y_star, &n(m2), &n(3)).unwrap(),
                            encrypt(&ctx.params, &ctx.y_star, &n(m1), &n(4)).unwrap(),
                        ],
                    ];
                    let batch = Batch::new(items).unwrap();
                    let (out, records) = run_encryption_stage(&ctx, &mut servers, &batch).unwrap();
                    let mut before = decrypt_all(&ctx, &servers, &batch);
                    let mut after = decrypt_all(&ctx, &servers, &out);
                    before.sort();
                    after.sort();
                    assert_eq!(before, after);
                    for r in &records {
                        assert!(kappa_relation_holds(&ctx, r));
                    }
                    let (plain, _) = run_decryption_stage(&ctx, &mut servers, &out, "main").unwrap();
                    let mut recovered: Vec<Vec<BigUint>> = plain.items.iter().map(|t| t.iter().map(|c| c.b.clone()).collect()).collect();
                    recovered.sort();
                    assert_eq!(recovered, before);
                }
            }
        }
    }

    fn kappa_relation_holds(ctx: &StageContext, record: &StageRecord) -> bool {
        let p = &ctx.params;
        anchor_positions(record.input.arity().max(record.output.arity())).into_iter().all(|pos| {
            let kappa = anchor_value(&record.kappa, pos).unwrap();
            let ia = p.product(record.input.items.iter().map(|t| &t[pos].a));
            let ib = p.product(record.input.items.iter().map(|t| &t[pos].b));
            let oa = p.product(record.output.items.iter().map(|t| &t[pos].a));
            let ob = p.product(record.output.items.iter().map(|t| &t[pos].b));
            oa == p.mul(&p.g_pow(kappa), &ia) && ob == p.mul(&p.pow(&ctx.y_star, kappa), &ib)
        })
    }

    #[test]
    fn openings_justify_honest_steps() {
        let (ctx, mut servers) = toy_servers(&[3, 5]);
        let items = (1..5u32).map(|r| vec![encrypt(&ctx.params, &ctx.y_star, &n(4), &n(r)).unwrap(); 3]).collect();
        let batch = Batch::new(items).unwrap();
        let (_, records) = run_encryption_stage(&ctx, &mut servers, &batch).unwrap();
        for (server, record) in servers.iter().zip(&records) {
            for slot in 0..4 {
                assert!(server.open_encryption(slot).unwrap().justifies(&ctx, record));
            }
        }
    }

    #[test]
    fn execution_modes_agree() {
        let (ctx, servers) = toy_servers(&[3, 5, 7]);
        let items: Vec<Tuple> = (0..9u32).map(|r| vec![encrypt(&ctx.params, &ctx.y_star, &n(9), &n(r % 11)).unwrap(); 2]).collect();
        let batch = Batch::new(items).unwrap();
        let mut a = servers.clone();
        let mut b = servers;
        let seq = run_encryption_stage(&ctx.clone().with_execution(Execution::Sequential), &mut a, &batch).unwrap();
        let par = run_encryption_stage(&ctx.with_execution(Execution::Parallel), &mut b, &batch).unwrap();
        assert_eq!(seq, par);
    }

    proptest! {
        #[test]
        fn kappa_disclosure_is_sound(seed in any::<u64>(), count in 0usize..6, arity in 1usize..=6) {
            let (ctx, mut servers) = toy_servers(&[2, 4, 6]);
            let mut rng = derive_rng(seed, "batch");
            let items: Vec<Tuple> = (0..count)
                .map(|_| (0..arity).map(|_| {
                    let m = ctx.params.random_element(&mut rng);
                    let r = ctx.params.random_exponent_or_zero(&mut rng);
                    encrypt(&ctx.params, &ctx.y_star, &m, &r).unwrap()
                }).collect())
                .collect();
            let batch = Batch::new(items).unwrap();
            let (_, records) = run_encryption_stage(&ctx, &mut servers, &batch).unwrap();
            for r in &records {
                prop_assert!(kappa_relation_holds(&ctx, r));
            }
        }
    }
}
