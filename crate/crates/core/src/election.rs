//! The election state machine: registration, booth entry, vote
//! construction and approval, the encryption stage, pre-tallying by
//! pseudonym with inferior-group filtering, representative tallying, and
//! the bulletin board that records all of it.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    check_decryption_stage, check_item, disclose_tail_keys, reprocess, trace_item, AuditError, DecryptionPass, DisclosedKey, MixTranscript,
    Patch, Responder, TraceOutcome, Verdict,
};
use crate::board::{config_hash, Board, Header};
use crate::credentials::{make_seal, show, Authority, CredentialError, HeldCredential, SealRegistry, SealStatus, ShownTag, UsedSeal};
use crate::group::{combine_keys, keygen, CandidateCode, CandidateTable, GroupError, GroupParams, KeyShare, PublicShare};
use crate::mixnet::{
    run_decryption_stage, run_encryption_stage, AnchorSum, Batch, Fault, MixError, MixServer, ServerPrivateState, StageContext,
    StageRecord, Tuple,
};
use crate::parallel::Execution;
use crate::revised::{
    construct_form, omega_ring_run, ring_pass, split_companion, verify_gamma, FormTranscript, RevisedError, UngDeviation, UngParticipant,
    UngServerSecrets, VoteShare, VoterSecrets,
};
use crate::rng::derive_rng;

pub const PASS_PSEUDONYM: &str = "omega";
pub const PASS_BALLOT: &str = "ballot";
pub const SEAL_PHASE_ENTRY: &str = "entry";
pub const SEAL_PHASE_APPROVAL: &str = "approval";
/// Tuple range of the vote-form triple.
pub const VOTE_RANGE: std::ops::Range<usize> = 0..3;
/// Tuple range of the pseudonym-form triple.
pub const PSEUDONYM_RANGE: std::ops::Range<usize> = 3..6;
/// Repair rounds attempted per decryption pass.
const MAX_REPAIR_ROUNDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElectionError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("operation needs phase {expected:?}, election is in {actual:?}")]
    Phase { expected: Phase, actual: Phase },
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error("denied: {0}")]
    Denied(String),
    #[error("unknown session {0}")]
    UnknownSession(usize),
    #[error("vote construction disputed: {0}")]
    Dispute(RevisedError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("protocol aborted: {0}")]
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Registration,
    Voting,
    Encrypted,
    Pretallied,
    Tallied,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionConfig {
    pub candidates: Vec<String>,
    /// Groups with fewer members are inferior.
    pub threshold: usize,
    pub servers: usize,
    pub roll: Vec<String>,
    pub params: GroupParams,
    pub seed: u64,
    /// Repair traced items instead of aborting.
    pub reprocess: bool,
}

impl ElectionConfig {
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Candidate(u32),
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Vote,
    Pseudonym,
}

// Board bodies.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetupBody {
    pub params: GroupParams,
    pub public_shares: Vec<PublicShare>,
    #[serde(with = "crate::hex")]
    pub y_star: BigUint,
    pub candidates: Vec<String>,
    /// Candidate codes followed by the invalid-vote token.
    pub codes: Vec<CandidateCode>,
    pub threshold: usize,
    #[serde(with = "crate::hex")]
    pub entry_base: BigUint,
    #[serde(with = "crate::hex")]
    pub approval_base: BigUint,
    #[serde(with = "crate::hex")]
    pub authority_key: BigUint,
    pub roll_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationBody {
    pub voter: String,
    pub receipt_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusalBody {
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seal: Option<UsedSeal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoothEntryBody {
    pub session: usize,
    pub tag: ShownTag,
    pub seal: UsedSeal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UngRunBody {
    pub session: usize,
    pub form: FormKind,
    pub transcript: FormTranscript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeBody {
    pub session: usize,
    pub form: FormKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotBody {
    pub session: usize,
    pub ballot: Tuple,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalBody {
    pub session: usize,
    #[serde(with = "crate::hex")]
    pub entry_seal: BigUint,
    pub seal: UsedSeal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollsClosedBody {
    pub sessions: Vec<usize>,
    pub initial: Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptionStageBody {
    pub record: StageRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptionStageBody {
    pub pass: String,
    pub start: usize,
    pub end: usize,
    pub record: StageRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceBody {
    pub outcome: TraceOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprocessBody {
    pub patches: Vec<Patch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudonymGroup {
    #[serde(with = "crate::hex")]
    pub gamma: BigUint,
    pub members: Vec<usize>,
    pub count: usize,
    pub inferior: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretallyBody {
    pub groups: Vec<PseudonymGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub counts: Vec<usize>,
    /// Sizes of inferior groups, candidates undisclosed.
    pub inferior: Vec<usize>,
    pub invalid: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.inferior.iter().sum::<usize>() + self.invalid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyBody {
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailKeysBody {
    pub keys: Vec<DisclosedKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoercerQueryBody {
    /// Kinds of data the voter still holds.
    pub revealable: Vec<String>,
    pub holds_vote: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortBody {
    pub reason: String,
}

/// Everything the voter generated in the booth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSecrets {
    pub vote: VoterSecrets,
    pub pseudonym: VoterSecrets,
    pub gamma: BigUint,
    pub ballot: Tuple,
}

#[derive(Debug, Clone)]
struct Session {
    tag: ShownTag,
    entry_seal: UsedSeal,
    secrets: Option<SessionSecrets>,
    approved: bool,
}

/// Per-ballot randomness a server contributed to both forms.
#[derive(Debug, Clone)]
struct UngContribution {
    vote: UngServerSecrets,
    pseudonym: UngServerSecrets,
}

pub struct Election {
    pub config: ElectionConfig,
    pub ctx: StageContext,
    pub public: Vec<PublicShare>,
    pub table: CandidateTable,
    pub entry_base: BigUint,
    pub approval_base: BigUint,
    pub board: Board,
    phase: Phase,
    omegas: Vec<BigUint>,
    authority: Authority,
    authority_rng: ChaCha20Rng,
    verifier_rng: ChaCha20Rng,
    registry: SealRegistry,
    sessions: Vec<Session>,
    approved: Vec<usize>,
    servers: Vec<MixServer>,
    contributions: Vec<BTreeMap<usize, UngContribution>>,
    ung_faults: Vec<(usize, UngDeviation)>,
    transcript: MixTranscript,
    groups: Vec<PseudonymGroup>,
    tally: Option<Tally>,
}

impl Election {
    pub fn setup(config: ElectionConfig) -> Result<Self, ElectionError> {
        let params = config.params.clone();
        params.validate()?;
        if config.servers == 0 {
            return Err(ElectionError::Config("at least one server is required".into()));
        }
        if config.threshold == 0 {
            return Err(ElectionError::Config("threshold must be at least 1".into()));
        }
        let count = u32::try_from(config.candidates.len()).map_err(|_| ElectionError::Config("too many candidates".into()))?;
        let table = CandidateTable::new(&params, count + 1).map_err(|e| ElectionError::Config(format!("candidate encoding: {e}")))?;
        if let Some(code) = table.codes().iter().find(|c| params.consistency_exponent(&c.element) == BigUint::from(0u32)) {
            return Err(ElectionError::Config(format!("lambda makes the consistency exponent of code {} vanish", code.candidate_id)));
        }

        let mut keys: Vec<KeyShare> =
            (1..=config.servers).map(|q| keygen(&params, q, &mut derive_rng(config.seed, &format!("server-key-{q}")))).collect();
        let mut regen = derive_rng(config.seed, "server-key-regen");
        let y_star = loop {
            let public: Vec<PublicShare> = keys.iter().map(KeyShare::public).collect();
            let combined = combine_keys(&params, &public)?;
            if !combined.y_star.is_one() && !params.mul(&params.g, &combined.y_star).is_one() {
                break combined.y_star;
            }
            let last = keys.len();
            keys[last - 1] = keygen(&params, last, &mut regen);
        };
        let public: Vec<PublicShare> = keys.iter().map(KeyShare::public).collect();
        let omegas =
            (1..=config.servers).map(|q| params.random_exponent(&mut derive_rng(config.seed, &format!("server-omega-{q}")))).collect();
        let servers: Vec<MixServer> = keys
            .into_iter()
            .map(|k| {
                let rng = derive_rng(config.seed, &format!("server-{}", k.server_index));
                MixServer::new(k, rng)
            })
            .collect();

        let mut bases_rng = derive_rng(config.seed, "seal-bases");
        let mut base = |avoid: Option<&BigUint>| loop {
            let b = params.random_element(&mut bases_rng);
            if !b.is_one() && Some(&b) != avoid {
                break b;
            }
        };
        let entry_base = base(None);
        let approval_base = base(Some(&entry_base));
        let authority = Authority::new(&params, config.roll.iter().cloned(), &mut derive_rng(config.seed, "authority-key"));

        let mut board = Board::new(Header::new(config.hash(), params.clone()));
        board.append(
            "election_setup",
            &SetupBody {
                params: params.clone(),
                public_shares: public.clone(),
                y_star: y_star.clone(),
                candidates: config.candidates.clone(),
                codes: table.codes().to_vec(),
                threshold: config.threshold,
                entry_base: entry_base.clone(),
                approval_base: approval_base.clone(),
                authority_key: authority.public.clone(),
                roll_size: config.roll.len(),
            },
        );

        Ok(Self {
            ctx: StageContext::new(params, y_star),
            public,
            table,
            entry_base,
            approval_base,
            board,
            phase: Phase::Registration,
            omegas,
            authority,
            authority_rng: derive_rng(config.seed, "authority"),
            verifier_rng: derive_rng(config.seed, "verifier"),
            registry: SealRegistry::default(),
            sessions: Vec::new(),
            approved: Vec::new(),
            contributions: vec![BTreeMap::new(); config.servers],
            servers,
            ung_faults: Vec::new(),
            transcript: MixTranscript { initial: Batch::default(), encryption: Vec::new(), passes: Vec::new() },
            groups: Vec::new(),
            tally: None,
            config,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.ctx.exec = exec;
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn params(&self) -> &GroupParams {
        &self.ctx.params
    }

    pub fn invalid_token(&self) -> &BigUint {
        self.table.encode(self.config.candidates.len() as u32).expect("token is encoded at setup")
    }

    fn expect_phase(&self, expected: Phase) -> Result<(), ElectionError> {
        if self.phase == expected {
            Ok(())
        } else {
            Err(ElectionError::Phase { expected, actual: self.phase })
        }
    }

    pub fn inject_mix_fault(&mut self, server_index: usize, fault: Fault) -> Result<(), ElectionError> {
        let server = self
            .servers
            .iter_mut()
            .find(|s| s.index() == server_index)
            .ok_or_else(|| ElectionError::Config(format!("no server {server_index}")))?;
        server.faults.push(fault);
        Ok(())
    }

    pub fn inject_ung_fault(&mut self, server_index: usize, deviation: UngDeviation) -> Result<(), ElectionError> {
        if server_index == 0 || server_index > self.config.servers {
            return Err(ElectionError::Config(format!("no server {server_index}")));
        }
        self.ung_faults.push((server_index, deviation));
        Ok(())
    }

    /// Scripted faults that have not fired yet.
    pub fn pending_faults(&self) -> usize {
        self.ung_faults.len() + self.servers.iter().map(|s| s.faults.len()).sum::<usize>()
    }

    pub fn server_states(&self) -> Vec<ServerPrivateState> {
        self.servers.iter().map(|s| s.state.clone()).collect()
    }

    pub fn transcript(&self) -> &MixTranscript {
        &self.transcript
    }

    pub fn groups(&self) -> &[PseudonymGroup] {
        &self.groups
    }

    pub fn tally(&self) -> Option<&Tally> {
        self.tally.as_ref()
    }

    pub fn approved_count(&self) -> usize {
        self.approved.len()
    }

    /// Secrets still held by a booth session; `None` once approved.
    pub fn session_secrets(&self, session: usize) -> Option<&SessionSecrets> {
        self.sessions.get(session).and_then(|s| s.secrets.as_ref())
    }

    pub fn register<R: RngCore + ?Sized>(&mut self, voter: &str, voter_rng: &mut R) -> Result<HeldCredential, ElectionError> {
        if self.phase != Phase::Registration {
            self.board.append(
                "registration_refused",
                &RefusalBody { reason: "registration is closed".into(), voter: Some(voter.into()), session: None, seal: None },
            );
            return Err(ElectionError::Phase { expected: Phase::Registration, actual: self.phase });
        }
        match self.authority.issue(&self.ctx.params, voter, voter_rng, &mut self.authority_rng) {
            Ok((held, receipt)) => {
                self.board.append("registration", &RegistrationBody { voter: voter.into(), receipt_digest: receipt.digest() });
                Ok(held)
            }
            Err(e) => {
                self.board.append(
                    "registration_refused",
                    &RefusalBody { reason: e.to_string(), voter: Some(voter.into()), session: None, seal: None },
                );
                Err(e.into())
            }
        }
    }

    pub fn open_voting(&mut self) -> Result<(), ElectionError> {
        self.expect_phase(Phase::Registration)?;
        self.phase = Phase::Voting;
        Ok(())
    }

    pub fn enter_booth<R: RngCore + ?Sized>(&mut self, held: &HeldCredential, voter_rng: &mut R) -> Result<usize, ElectionError> {
        self.expect_phase(Phase::Voting)?;
        let params = &self.ctx.params;
        let w = params.random_exponent(voter_rng);
        let tag = show(params, held, &w, voter_rng)?;
        if let Err(e) = self.authority.accept_show(params, &held.credential, &tag) {
            self.board.append("booth_denied", &RefusalBody { reason: e.to_string(), voter: None, session: None, seal: None });
            return Err(e.into());
        }
        let seal = make_seal(params, &held.z, &self.entry_base, (&tag.h, &tag.tag), voter_rng)?;
        if self.registry.register(SEAL_PHASE_ENTRY, &seal) == SealStatus::Duplicate {
            self.board.append(
                "booth_denied",
                &RefusalBody { reason: "entry seal already used".into(), voter: None, session: None, seal: Some(seal) },
            );
            return Err(ElectionError::Denied("entry seal already used".into()));
        }
        let session = self.sessions.len();
        self.board.append("booth_entry", &BoothEntryBody { session, tag: tag.clone(), seal: seal.clone() });
        self.sessions.push(Session { tag, entry_seal: seal, secrets: None, approved: false });
        Ok(session)
    }

    fn open_session(&mut self, session: usize) -> Result<(), ElectionError> {
        self.expect_phase(Phase::Voting)?;
        let s = self.sessions.get(session).ok_or(ElectionError::UnknownSession(session))?;
        if s.approved {
            self.board.append(
                "replacement_refused",
                &RefusalBody { reason: "ballot already approved".into(), voter: None, session: Some(session), seal: None },
            );
            return Err(ElectionError::Denied("ballot already approved".into()));
        }
        Ok(())
    }

    fn take_ung_deviations(&mut self) -> Vec<Option<UngDeviation>> {
        let mut out = vec![None; self.config.servers];
        let mut rest = Vec::new();
        for (server, deviation) in std::mem::take(&mut self.ung_faults) {
            if out[server - 1].is_none() {
                out[server - 1] = Some(deviation);
            } else {
                rest.push((server, deviation));
            }
        }
        self.ung_faults = rest;
        out
    }

    /// Builds both forms of the ballot. A failed voter-side check is
    /// published as a dispute and leaves the session open for a retry.
    pub fn construct_vote<R: RngCore + ?Sized>(
        &mut self,
        session: usize,
        choice: Choice,
        voter_rng: &mut R,
    ) -> Result<Tuple, ElectionError> {
        self.open_session(session)?;
        let params = self.ctx.params.clone();
        let y_star = self.ctx.y_star.clone();
        let count = self.config.servers;
        let plaintext = match choice {
            Choice::Candidate(id) if (id as usize) < self.config.candidates.len() => self.table.encode(id).expect("in range").clone(),
            Choice::Candidate(id) => return Err(ElectionError::Config(format!("no candidate {id}"))),
            Choice::Invalid => self.invalid_token().clone(),
        };
        let deviations = self.take_ung_deviations();

        let vote = VoterSecrets::new(&params, &plaintext, count, voter_rng).map_err(ElectionError::Dispute)?;
        let commitments = vote.commitments(&params, &y_star);
        let vote_ung: Vec<UngServerSecrets> = self.servers.iter_mut().map(|s| UngServerSecrets::random(&params, s.rng())).collect();
        let participants: Vec<UngParticipant> = vote_ung
            .iter()
            .zip(&vote.shares)
            .zip(&deviations)
            .map(|((secrets, share), deviation)| UngParticipant { secrets, share, deviation: *deviation })
            .collect();
        let vote_triple = match construct_form(&params, &y_star, &vote.deltas, &commitments, &plaintext, &participants) {
            Ok((triple, transcript)) => {
                self.board.append("ung_run", &UngRunBody { session, form: FormKind::Vote, transcript });
                triple
            }
            Err((e, transcript)) => {
                self.board.append("ung_run", &UngRunBody { session, form: FormKind::Vote, transcript });
                self.board.append("ung_dispute", &DisputeBody { session, form: FormKind::Vote, reason: e.to_string() });
                return Err(ElectionError::Dispute(e));
            }
        };

        let elements: Vec<BigUint> = vote.shares.iter().map(|s| s.element.clone()).collect();
        let (gamma_shares, gamma) = omega_ring_run(&params, &self.omegas, &elements).map_err(ElectionError::Dispute)?;
        let gamma_values: Vec<BigUint> = gamma_shares.iter().map(|s| s.gamma_share.clone()).collect();
        let omegas = &self.omegas;
        let ring_ok = verify_gamma(&params, &vote.phi, &elements, &gamma_values, |q, c| ring_pass(&params, omegas, q, c))
            .map_err(ElectionError::Dispute)?;
        if !ring_ok {
            let e = RevisedError::GammaCheckFailed(0);
            self.board.append("ung_dispute", &DisputeBody { session, form: FormKind::Pseudonym, reason: e.to_string() });
            return Err(ElectionError::Dispute(e));
        }
        let companions = split_companion(&params, &params.representative(&gamma), count, voter_rng);
        let pseudonym_shares: Vec<VoteShare> =
            gamma_values.into_iter().zip(companions).map(|(element, exponent)| VoteShare { element, exponent }).collect();
        let pseudonym = VoterSecrets::from_parts(&params, gamma.clone(), vote.deltas.clone(), vote.phi.clone(), pseudonym_shares)
            .map_err(ElectionError::Dispute)?;
        let pseudonym_ung: Vec<UngServerSecrets> = self.servers.iter_mut().map(|s| UngServerSecrets::random(&params, s.rng())).collect();
        let participants: Vec<UngParticipant> = pseudonym_ung
            .iter()
            .zip(&pseudonym.shares)
            .map(|(secrets, share)| UngParticipant { secrets, share, deviation: None })
            .collect();
        let pseudonym_triple = match construct_form(&params, &y_star, &pseudonym.deltas, &commitments, &gamma, &participants) {
            Ok((triple, transcript)) => {
                self.board.append("ung_run", &UngRunBody { session, form: FormKind::Pseudonym, transcript });
                triple
            }
            Err((e, transcript)) => {
                self.board.append("ung_run", &UngRunBody { session, form: FormKind::Pseudonym, transcript });
                self.board.append("ung_dispute", &DisputeBody { session, form: FormKind::Pseudonym, reason: e.to_string() });
                return Err(ElectionError::Dispute(e));
            }
        };

        let mut ballot = vote_triple.to_tuple();
        ballot.extend(pseudonym_triple.to_tuple());
        self.board.append("ballot_proposed", &BallotBody { session, ballot: ballot.clone() });
        for (q, (v, p)) in vote_ung.into_iter().zip(pseudonym_ung).enumerate() {
            self.contributions[q].insert(session, UngContribution { vote: v, pseudonym: p });
        }
        self.sessions[session].secrets = Some(SessionSecrets { vote, pseudonym, gamma, ballot: ballot.clone() });
        Ok(ballot)
    }

    /// Confirms the published ballot, registers the approval seal and
    /// erases the session's secrets.
    pub fn approve<R: RngCore + ?Sized>(&mut self, session: usize, held: &HeldCredential, voter_rng: &mut R) -> Result<(), ElectionError> {
        self.open_session(session)?;
        let s = &self.sessions[session];
        let Some(secrets) = s.secrets.as_ref() else {
            return Err(ElectionError::Denied("no ballot to approve".into()));
        };
        let published = self
            .board
            .of_kind("ballot_proposed")
            .filter_map(|e| e.decode::<BallotBody>().ok())
            .filter(|b| b.session == session)
            .last()
            .map(|b| b.ballot);
        if published.as_ref() != Some(&secrets.ballot) {
            self.board.append(
                "ung_dispute",
                &DisputeBody { session, form: FormKind::Vote, reason: "published ballot differs from the booth's".into() },
            );
            return Err(ElectionError::Denied("published ballot differs".into()));
        }
        let seal = make_seal(&self.ctx.params, &held.z, &self.approval_base, (&s.tag.h, &s.tag.tag), voter_rng)?;
        if self.registry.register(SEAL_PHASE_APPROVAL, &seal) == SealStatus::Duplicate {
            self.board.append(
                "replacement_refused",
                &RefusalBody { reason: "approval seal already used".into(), voter: None, session: Some(session), seal: Some(seal) },
            );
            return Err(ElectionError::Denied("approval seal already used".into()));
        }
        self.board.append("approval", &ApprovalBody { session, entry_seal: s.entry_seal.seal.clone(), seal });
        let s = &mut self.sessions[session];
        s.secrets = None;
        s.approved = true;
        self.approved.push(session);
        Ok(())
    }

    /// What the voter could hand a coercer after leaving the booth.
    pub fn coercer_query(&mut self, session: Option<usize>) -> CoercerQueryBody {
        let mut revealable = vec!["credential".to_string(), "registration_receipt".to_string()];
        let mut holds_vote = false;
        if let Some(s) = session.and_then(|i| self.sessions.get(i)) {
            revealable.push("shown_tag".into());
            revealable.push("entry_seal".into());
            if s.approved {
                revealable.push("approval_seal".into());
            }
            holds_vote = s.secrets.is_some();
            if holds_vote {
                revealable.push("vote_secrets".into());
            }
        }
        let body = CoercerQueryBody { revealable, holds_vote };
        self.board.append("coercer_query", &body);
        body
    }

    pub fn close_polls(&mut self) -> Result<(), ElectionError> {
        self.expect_phase(Phase::Voting)?;
        let items: Vec<Tuple> = self
            .approved
            .iter()
            .map(|&s| {
                self.board
                    .of_kind("ballot_proposed")
                    .filter_map(|e| e.decode::<BallotBody>().ok())
                    .filter(|b| b.session == s)
                    .last()
                    .map(|b| b.ballot)
                    .expect("approved sessions have a ballot")
            })
            .collect();
        let initial = Batch::new(items)?;
        self.board.append("polls_closed", &PollsClosedBody { sessions: self.approved.clone(), initial: initial.clone() });
        self.transcript.initial = initial;
        self.phase = Phase::Encrypted;
        Ok(())
    }

    pub fn run_encryption(&mut self) -> Result<(), ElectionError> {
        self.expect_phase(Phase::Encrypted)?;
        if !self.transcript.encryption.is_empty() {
            return Err(ElectionError::Denied("encryption stage already ran".into()));
        }
        let (_, mut records) = match run_encryption_stage(&self.ctx, &mut self.servers, &self.transcript.initial) {
            Ok(r) => r,
            Err(e) => return Err(self.abort(format!("encryption stage: {e}"))),
        };
        let params = &self.ctx.params;
        for (q, record) in records.iter_mut().enumerate() {
            let sum = |pick: fn(&UngContribution) -> &BigUint| {
                params.exp_sum(self.approved.iter().map(|s| pick(&self.contributions[q][s])).collect::<Vec<_>>())
            };
            record.sigma = vec![
                AnchorSum { position: VOTE_RANGE.start, value: sum(|c| &c.vote.s) },
                AnchorSum { position: PSEUDONYM_RANGE.start, value: sum(|c| &c.pseudonym.s) },
            ];
            self.board.append("encryption_stage", &EncryptionStageBody { record: record.clone() });
        }
        self.transcript.encryption = records;
        Ok(())
    }

    fn abort(&mut self, reason: String) -> ElectionError {
        self.board.append("protocol_abort", &AbortBody { reason: reason.clone() });
        self.phase = Phase::Aborted;
        ElectionError::Aborted(reason)
    }

    fn run_pass(&mut self, pass: &str, batch: &Batch, start: usize, end: usize) -> Result<(), ElectionError> {
        let (_, records) = match run_decryption_stage(&self.ctx, &mut self.servers, batch, pass) {
            Ok(r) => r,
            Err(e) => return Err(self.abort(format!("{pass} pass: {e}"))),
        };
        for record in &records {
            self.board.append("decryption_stage", &DecryptionStageBody { pass: pass.into(), start, end, record: record.clone() });
        }
        self.transcript.passes.push(DecryptionPass { pass: pass.into(), start, end, records });
        Ok(())
    }

    /// Slots of `pass` that fail a check; all slots when only the product
    /// check fails.
    fn suspicious_slots(&self, pass: &str) -> Result<Vec<usize>, ElectionError> {
        let entry = self.transcript.pass(pass).expect("pass ran");
        let out = entry.output().expect("pass has records");
        let params = &self.ctx.params;
        let failing: Vec<usize> =
            out.slot_ids.iter().zip(&out.items).filter(|(_, item)| !check_item(params, item)).map(|(s, _)| *s).collect();
        if pass == PASS_PSEUDONYM && failing.is_empty() {
            let gd =
                check_decryption_stage(&self.ctx, self.transcript.encrypted(), out, PSEUDONYM_RANGE.start, 0, &self.transcript.encryption)?;
            if !gd {
                return Ok(out.slot_ids.clone());
            }
        }
        Ok(failing)
    }

    /// Traces every suspicious slot and reprocesses the culprits' work, or
    /// aborts when reprocessing is disabled or does not converge.
    fn check_and_repair(&mut self, pass: &str) -> Result<(), ElectionError> {
        for _ in 0..MAX_REPAIR_ROUNDS {
            let slots = self.suspicious_slots(pass)?;
            if slots.is_empty() {
                return Ok(());
            }
            let mut outcomes = Vec::new();
            for slot in slots {
                let responders: Vec<&dyn Responder> = self.servers.iter().map(|s| s as &dyn Responder).collect();
                let outcome = trace_item(&self.ctx, &self.public, &self.transcript, pass, slot, &responders, &mut self.verifier_rng)?;
                self.board.append("trace", &TraceBody { outcome: outcome.clone() });
                outcomes.push(outcome);
            }
            let culprits: Vec<TraceOutcome> = outcomes.into_iter().filter(|o| o.verdict != Verdict::None).collect();
            if culprits.is_empty() {
                return Err(self.abort(format!("{pass} pass fails its checks but no hop is at fault")));
            }
            if !self.config.reprocess {
                return Err(self.abort(format!("{pass} pass: {} traced item(s), reprocessing disabled", culprits.len())));
            }
            let mut done: Vec<(usize, usize)> = Vec::new();
            for outcome in culprits {
                if let Verdict::Server { server_index, slot, .. } = outcome.verdict {
                    if done.contains(&(server_index, slot)) {
                        continue;
                    }
                    done.push((server_index, slot));
                }
                match reprocess(&self.ctx, &mut self.transcript, &mut self.servers, &outcome) {
                    Ok(patches) => {
                        self.board.append("reprocess", &ReprocessBody { patches });
                    }
                    Err(e) => return Err(self.abort(format!("{pass} pass: {e}"))),
                }
            }
        }
        if self.suspicious_slots(pass)?.is_empty() {
            Ok(())
        } else {
            Err(self.abort(format!("{pass} pass still fails after {MAX_REPAIR_ROUNDS} repair rounds")))
        }
    }

    /// Decrypts every pseudonym form and groups ballots by pseudonym.
    pub fn pretally(&mut self) -> Result<&[PseudonymGroup], ElectionError> {
        self.expect_phase(Phase::Encrypted)?;
        if self.transcript.encryption.is_empty() {
            self.run_encryption()?;
        }
        let batch = self.transcript.encrypted().project(PSEUDONYM_RANGE);
        self.run_pass(PASS_PSEUDONYM, &batch, PSEUDONYM_RANGE.start, PSEUDONYM_RANGE.end)?;
        self.check_and_repair(PASS_PSEUDONYM)?;
        let out = self.transcript.pass(PASS_PSEUDONYM).and_then(|p| p.output()).expect("pass ran");
        self.groups = group_by_pseudonym(out, self.config.threshold);
        self.board.append("pretally", &PretallyBody { groups: self.groups.clone() });
        self.phase = Phase::Pretallied;
        Ok(&self.groups)
    }

    /// Decrypts one vote form per non-inferior group and counts.
    pub fn run_tally(&mut self) -> Result<&Tally, ElectionError> {
        self.expect_phase(Phase::Pretallied)?;
        let representatives: Vec<usize> = self.groups.iter().filter_map(|g| g.representative).collect();
        let batch = self.transcript.encrypted().select(&representatives, VOTE_RANGE).expect("representatives are slots");
        self.run_pass(PASS_BALLOT, &batch, VOTE_RANGE.start, VOTE_RANGE.end)?;
        self.check_and_repair(PASS_BALLOT)?;
        let out = self.transcript.pass(PASS_BALLOT).and_then(|p| p.output()).expect("pass ran");
        let tally = count_groups(&self.groups, out, &self.table, self.config.candidates.len());
        self.board.append("tally", &TallyBody { tally: tally.clone() });
        self.tally = Some(tally);
        self.phase = Phase::Tallied;
        Ok(self.tally.as_ref().expect("just set"))
    }

    pub fn disclose_tail_keys(&mut self, count: usize) -> Result<Vec<DisclosedKey>, ElectionError> {
        self.expect_phase(Phase::Tallied)?;
        let keys: Vec<KeyShare> = self.servers.iter().map(|s| s.state.key.clone()).collect();
        let disclosed = disclose_tail_keys(&keys, count)?;
        if !disclosed.is_empty() {
            self.board.append("tail_keys", &TailKeysBody { keys: disclosed.clone() });
        }
        Ok(disclosed)
    }
}

/// Groups decrypted pseudonyms in order of their smallest slot.
pub fn group_by_pseudonym(decrypted: &Batch, threshold: usize) -> Vec<PseudonymGroup> {
    let mut by_gamma: BTreeMap<BigUint, Vec<usize>> = BTreeMap::new();
    for (slot, item) in decrypted.slot_ids.iter().zip(&decrypted.items) {
        by_gamma.entry(item[0].b.clone()).or_default().push(*slot);
    }
    let mut groups: Vec<PseudonymGroup> = by_gamma
        .into_iter()
        .map(|(gamma, mut members)| {
            members.sort_unstable();
            let count = members.len();
            let inferior = count < threshold;
            PseudonymGroup { gamma, representative: (!inferior).then(|| members[0]), members, count, inferior }
        })
        .collect();
    groups.sort_by_key(|g| g.members[0]);
    groups
}

/// Credits each non-inferior group to its representative's decoded vote.
pub fn count_groups(groups: &[PseudonymGroup], decrypted: &Batch, table: &CandidateTable, candidates: usize) -> Tally {
    let mut tally = Tally { counts: vec![0; candidates], inferior: Vec::new(), invalid: 0 };
    for group in groups {
        let Some(rep) = group.representative else {
            tally.inferior.push(group.count);
            continue;
        };
        let decoded =
            decrypted.index_of_slot(rep).and_then(|i| table.decode(&decrypted.items[i][0].b)).filter(|&id| (id as usize) < candidates);
        match decoded {
            Some(id) => tally.counts[id as usize] += group.count,
            None => tally.invalid += group.count,
        }
    }
    tally
}

/// Picks `lambda` so no listed element has a vanishing consistency
/// exponent.
pub fn choose_lambda<R: RngCore + ?Sized>(params: &GroupParams, elements: &[BigUint], rng: &mut R) -> Option<BigUint> {
    let q_minus_1 = &params.q - 1u32;
    for _ in 0..1024 {
        let lambda = params.random_exponent(rng);
        let candidate = GroupParams { lambda: lambda.clone(), ..params.clone() };
        if elements.iter().all(|e| candidate.consistency_exponent(e) != BigUint::from(0u32)) {
            return Some(lambda);
        }
        if q_minus_1 < BigUint::from(2u32) {
            break;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{partial_decrypt_with, Ciphertext};
    use proptest::prelude::*;

    fn toy_config(voters: usize, threshold: usize) -> ElectionConfig {
        ElectionConfig {
            candidates: vec!["a".into(), "b".into()],
            threshold,
            servers: 2,
            roll: (0..voters).map(|i| format!("v{i}")).collect(),
            params: GroupParams::toy(1),
            seed: 11,
            reprocess: true,
        }
    }

    fn n(v: u32) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn grouping_examples() {
        let mk = |values: &[u32]| Batch::new(values.iter().map(|&v| vec![crate::group::Ciphertext::new(1u32, v)]).collect()).unwrap();
        let batch = mk(&[2, 3, 2, 4, 2]);
        let groups = group_by_pseudonym(&batch, 2);
        assert_eq!(groups.len(), 3);
        assert_eq!((groups[0].count, groups[0].inferior, groups[0].representative), (3, false, Some(0)));
        assert!(groups[1].inferior && groups[2].inferior);
        assert!(group_by_pseudonym(&batch, 1).iter().all(|g| !g.inferior));
        let same = group_by_pseudonym(&mk(&[6, 6, 6]), 3);
        assert_eq!(same.len(), 1);
        assert!(!same[0].inferior);
    }

    #[test]
    fn tally_arithmetic() {
        let params = GroupParams::toy(1);
        let table = CandidateTable::new(&params, 3).unwrap();
        let code = |id: u32| table.encode(id).unwrap().clone();
        let groups = vec![
            PseudonymGroup { gamma: n(2), members: vec![0, 2, 4], count: 3, inferior: false, representative: Some(0) },
            PseudonymGroup { gamma: n(3), members: vec![1, 3, 5, 6], count: 4, inferior: false, representative: Some(1) },
            PseudonymGroup { gamma: n(4), members: vec![7], count: 1, inferior: true, representative: None },
        ];
        let decrypted = Batch::with_slots(
            vec![vec![crate::group::Ciphertext::new(n(1), code(0))], vec![crate::group::Ciphertext::new(n(1), code(1))]],
            vec![0, 1],
        )
        .unwrap();
        let tally = count_groups(&groups, &decrypted, &table, 2);
        assert_eq!(tally, Tally { counts: vec![3, 4], inferior: vec![1], invalid: 0 });
        assert_eq!(tally.total(), 8);
    }

    #[test]
    fn lambda_choice_avoids_degenerate_codes() {
        let params = GroupParams::toy(1);
        let table = CandidateTable::new(&params, 3).unwrap();
        let codes: Vec<BigUint> = table.codes().iter().map(|c| c.element.clone()).collect();
        let lambda = choose_lambda(&params, &codes, &mut derive_rng(1, "l")).unwrap();
        let p = GroupParams { lambda, ..params };
        assert!(codes.iter().all(|c| p.consistency_exponent(c) != n(0)));
    }

    #[test]
    fn degenerate_lambda_is_a_config_error() {
        let mut config = toy_config(1, 1);
        // code of candidate 0 is 4; 4 + 7 = 11 = 0 mod 11
        config.params = GroupParams::toy(7);
        assert!(matches!(Election::setup(config), Err(ElectionError::Config(_))));
    }

    #[test]
    fn session_lifecycle_and_erasure() {
        let mut e = Election::setup(toy_config(2, 1)).unwrap();
        let mut rng = derive_rng(1, "voter");
        let held = e.register("v0", &mut rng).unwrap();
        assert!(e.register("v0", &mut rng).is_err());
        assert!(e.register("stranger", &mut rng).is_err());
        e.open_voting().unwrap();
        assert!(e.register("v1", &mut rng).is_err());
        let session = e.enter_booth(&held, &mut rng).unwrap();
        assert!(matches!(e.enter_booth(&held, &mut rng), Err(ElectionError::Denied(_))));
        e.construct_vote(session, Choice::Candidate(0), &mut rng).unwrap();
        e.construct_vote(session, Choice::Candidate(1), &mut rng).unwrap();
        assert!(e.session_secrets(session).is_some());
        e.approve(session, &held, &mut rng).unwrap();
        assert!(e.session_secrets(session).is_none());
        assert!(matches!(e.construct_vote(session, Choice::Candidate(0), &mut rng), Err(ElectionError::Denied(_))));
        assert!(!e.coercer_query(Some(session)).holds_vote);
        e.close_polls().unwrap();
        assert!(e.enter_booth(&held, &mut rng).is_err());
        e.run_encryption().unwrap();
        e.pretally().unwrap();
        let tally = e.run_tally().unwrap();
        assert_eq!(tally.counts, vec![0, 1]);
        assert_eq!(e.board.of_kind("replacement_refused").count(), 1);
        assert_eq!(e.board.of_kind("booth_denied").count(), 1);
    }

    #[test]
    fn toy_election_matches_pooled_key_oracle() {
        let choices = [Choice::Candidate(0), Choice::Candidate(1), Choice::Candidate(0), Choice::Invalid, Choice::Candidate(0)];
        let mut e = Election::setup(toy_config(choices.len(), 2)).unwrap();
        let mut rng = derive_rng(2, "voters");
        let held: Vec<HeldCredential> = (0..choices.len()).map(|i| e.register(&format!("v{i}"), &mut rng).unwrap()).collect();
        e.open_voting().unwrap();
        for (h, c) in held.iter().zip(choices) {
            let s = e.enter_booth(h, &mut rng).unwrap();
            e.construct_vote(s, c, &mut rng).unwrap();
            e.approve(s, h, &mut rng).unwrap();
        }
        e.close_polls().unwrap();
        e.run_encryption().unwrap();
        e.pretally().unwrap();
        let tally = e.run_tally().unwrap().clone();
        assert_eq!(tally, Tally { counts: vec![3, 0], inferior: vec![1, 1], invalid: 0 });

        let x: BigUint = e.ctx.params.exp_sum(e.servers.iter().map(|s| &s.state.key.x));
        let mut plain: Vec<BigUint> =
            e.transcript().initial.items.iter().map(|t| partial_decrypt_with(&e.ctx.params, &t[0], &x).b).collect();
        plain.sort();
        let mut expected: Vec<BigUint> = choices
            .iter()
            .map(|c| match c {
                Choice::Candidate(id) => e.table.encode(*id).unwrap().clone(),
                Choice::Invalid => e.invalid_token().clone(),
            })
            .collect();
        expected.sort();
        assert_eq!(plain, expected);
    }

    proptest! {
        #[test]
        fn grouping_partitions_slots(gammas in proptest::collection::vec(1u32..6, 0..20), threshold in 1usize..5) {
            let items: Vec<Tuple> = gammas.iter().map(|&g| vec![Ciphertext::new(1u32, g); 3]).collect();
            let slots: Vec<usize> = (0..items.len()).rev().collect();
            let batch = Batch::with_slots(items, slots).unwrap();
            let groups = group_by_pseudonym(&batch, threshold);
            let mut members: Vec<usize> = groups.iter().flat_map(|g| g.members.clone()).collect();
            members.sort_unstable();
            prop_assert_eq!(members, (0..gammas.len()).collect::<Vec<_>>());
            for w in groups.windows(2) {
                prop_assert!(w[0].members[0] < w[1].members[0]);
            }
            for g in &groups {
                prop_assert_eq!(g.count, g.members.len());
                prop_assert_eq!(g.inferior, g.count < threshold);
                prop_assert_eq!(g.representative, (!g.inferior).then(|| g.members[0]));
            }
        }
    }
}
