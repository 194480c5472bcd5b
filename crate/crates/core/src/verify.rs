//! Offline verification of a published board.
//!
//! Entries are replayed in order. Traces are rechecked against the
//! transcript as it stood when they were published, and reprocessing
//! patches are applied as they appear; every remaining check runs on the
//! final transcript.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;

use crate::audit::{
    check_decryption_records, check_decryption_stage, check_encryption_stage, check_item, check_sigma, recheck_tail_keys, recheck_trace,
    AuditReport, DecryptionPass, ItemCheck, MixTranscript, TraceOutcome, Verdict,
};
use crate::board::{Board, BoardError, Entry};
use crate::credentials::{verify_seal_against, ShownTag};
use crate::election::{
    count_groups, group_by_pseudonym, ApprovalBody, BallotBody, BoothEntryBody, DecryptionStageBody, EncryptionStageBody, FormKind,
    PollsClosedBody, PretallyBody, PseudonymGroup, RegistrationBody, ReprocessBody, SetupBody, TailKeysBody, TallyBody, TraceBody,
    UngRunBody, PASS_BALLOT, PASS_PSEUDONYM, PSEUDONYM_RANGE, VOTE_RANGE,
};
use crate::group::{combine_keys, CandidateTable, Ciphertext, PublicShare};
use crate::mixnet::{Batch, StageContext, Tuple};
use crate::revised::FormTranscript;

/// Kinds a voter or booth produces; none may follow `polls_closed`.
const VOTER_KINDS: [&str; 5] = ["registration", "booth_entry", "ung_run", "ballot_proposed", "approval"];

#[derive(Default)]
struct SessionView {
    tag: Option<ShownTag>,
    entry_seal: Option<BigUint>,
    vote_form: Option<FormTranscript>,
    pseudonym_form: Option<FormTranscript>,
    ballot: Option<Tuple>,
    approved: bool,
}

struct Replay {
    setup: SetupBody,
    ctx: StageContext,
    table: Option<CandidateTable>,
    report: AuditReport,
    transcript: MixTranscript,
    sessions: Vec<SessionView>,
    approvals: Vec<usize>,
    voters: BTreeSet<String>,
    entry_seals: BTreeSet<BigUint>,
    approval_seals: BTreeSet<BigUint>,
    traces: Vec<TraceOutcome>,
    polls_closed: bool,
    booth_opened: bool,
    pretally: Option<Vec<PseudonymGroup>>,
    tally: Option<TallyBody>,
    aborted: bool,
}

impl Replay {
    fn fail(&mut self, message: impl Into<String>) {
        self.report.failures.push(message.into());
    }

    fn session(&mut self, seq: u64, session: usize) -> Option<&mut SessionView> {
        if session >= self.sessions.len() {
            self.fail(format!("entry {seq} names unknown session {session}"));
            return None;
        }
        Some(&mut self.sessions[session])
    }

    fn step(&mut self, entry: &Entry) -> Result<(), BoardError> {
        if self.polls_closed && VOTER_KINDS.contains(&entry.kind.as_str()) {
            self.report.membership_violations.push(format!("entry {} ({}) after polls closed", entry.seq, entry.kind));
        }
        let params = self.ctx.params.clone();
        match entry.kind.as_str() {
            "registration" => {
                let body: RegistrationBody = entry.decode()?;
                if self.booth_opened {
                    self.report.membership_violations.push(format!("registration of {} after voting opened", body.voter));
                }
                if !self.voters.insert(body.voter.clone()) {
                    self.report.membership_violations.push(format!("{} registered twice", body.voter));
                }
                if self.voters.len() > self.setup.roll_size {
                    self.report.membership_violations.push("more registrations than roll entries".into());
                }
            }
            "booth_entry" => {
                let body: BoothEntryBody = entry.decode()?;
                self.booth_opened = true;
                if body.session != self.sessions.len() {
                    self.fail(format!("entry {} opens session {} out of order", entry.seq, body.session));
                }
                let seal_ok =
                    body.seal.base == self.setup.entry_base && verify_seal_against(&params, &body.seal, (&body.tag.h, &body.tag.tag));
                if !seal_ok {
                    self.report.seal_checks_ok = false;
                    self.fail(format!("entry seal of session {} does not verify", body.session));
                }
                if !self.entry_seals.insert(body.seal.seal.clone()) {
                    self.report.seal_checks_ok = false;
                    self.fail(format!("entry seal of session {} was used before", body.session));
                }
                self.sessions.push(SessionView { tag: Some(body.tag), entry_seal: Some(body.seal.seal), ..Default::default() });
            }
            "ung_run" => {
                let body: UngRunBody = entry.decode()?;
                if let Some(s) = self.session(entry.seq, body.session) {
                    match body.form {
                        FormKind::Vote => s.vote_form = Some(body.transcript),
                        FormKind::Pseudonym => s.pseudonym_form = Some(body.transcript),
                    }
                }
            }
            "ballot_proposed" => {
                let body: BallotBody = entry.decode()?;
                let seq = entry.seq;
                let Some(s) = self.session(seq, body.session) else { return Ok(()) };
                let matches = body.ballot.len() == 6
                    && form_matches(&params, s.vote_form.as_ref(), &body.ballot[VOTE_RANGE])
                    && form_matches(&params, s.pseudonym_form.as_ref(), &body.ballot[PSEUDONYM_RANGE]);
                let approved = s.approved;
                s.ballot = Some(body.ballot);
                if approved {
                    self.fail(format!("session {} proposed a ballot after approval", body.session));
                }
                if !matches {
                    self.fail(format!("ballot of session {} does not match its construction runs", body.session));
                }
            }
            "approval" => {
                let body: ApprovalBody = entry.decode()?;
                let base_ok = body.seal.base == self.setup.approval_base;
                let Some(s) = self.session(entry.seq, body.session) else { return Ok(()) };
                let tag = s.tag.clone().expect("sessions open with a tag");
                let linked = s.entry_seal.as_ref() == Some(&body.entry_seal);
                let (had_ballot, was_approved) = (s.ballot.is_some(), s.approved);
                s.approved = true;
                if !(base_ok && linked && verify_seal_against(&params, &body.seal, (&tag.h, &tag.tag))) {
                    self.report.seal_checks_ok = false;
                    self.fail(format!("approval seal of session {} does not verify", body.session));
                }
                if !self.approval_seals.insert(body.seal.seal.clone()) {
                    self.report.seal_checks_ok = false;
                    self.fail(format!("approval seal of session {} was used before", body.session));
                }
                if !had_ballot || was_approved {
                    self.fail(format!("session {} approved without a fresh ballot", body.session));
                }
                self.approvals.push(body.session);
            }
            "polls_closed" => {
                let body: PollsClosedBody = entry.decode()?;
                if self.polls_closed {
                    self.fail("polls closed twice");
                }
                self.polls_closed = true;
                let expected: Vec<Tuple> = self.approvals.iter().filter_map(|&s| self.sessions[s].ballot.clone()).collect();
                if body.sessions != self.approvals || body.initial.items != expected || body.initial.validate().is_err() {
                    self.fail("initial batch differs from the approved ballots");
                }
                self.transcript.initial = body.initial;
            }
            "encryption_stage" => {
                let body: EncryptionStageBody = entry.decode()?;
                self.transcript.encryption.push(body.record);
            }
            "decryption_stage" => {
                let body: DecryptionStageBody = entry.decode()?;
                match self.transcript.passes.iter_mut().find(|p| p.pass == body.pass) {
                    Some(pass) => pass.records.push(body.record),
                    None => self.transcript.passes.push(DecryptionPass {
                        pass: body.pass,
                        start: body.start,
                        end: body.end,
                        records: vec![body.record],
                    }),
                }
            }
            "trace" => {
                let body: TraceBody = entry.decode()?;
                if !recheck_trace(&self.ctx, &self.setup.public_shares, &self.transcript, &body.outcome) {
                    self.report.trace_checks_ok = false;
                    self.fail(format!("trace of {} slot {} does not recheck", body.outcome.pass, body.outcome.slot));
                }
                self.traces.push(body.outcome);
            }
            "reprocess" => {
                let body: ReprocessBody = entry.decode()?;
                for patch in &body.patches {
                    if let Err(e) = self.transcript.apply_patch(patch) {
                        self.fail(format!("entry {}: {e}", entry.seq));
                    }
                }
            }
            "pretally" => {
                let body: PretallyBody = entry.decode()?;
                self.pretally = Some(body.groups);
            }
            "tally" => {
                self.tally = Some(entry.decode()?);
            }
            "tail_keys" => {
                let body: TailKeysBody = entry.decode()?;
                let ok = body.keys.len() < self.setup.public_shares.len()
                    && recheck_tail_keys(&self.ctx, &self.setup.public_shares, &self.transcript, &body.keys);
                self.report.tail_keys_ok = Some(ok);
                if !ok {
                    self.fail("disclosed keys do not reproduce their partial decryptions");
                }
            }
            "protocol_abort" => {
                self.aborted = true;
                let reason = entry.body.get("reason").and_then(|v| v.as_str()).unwrap_or("unspecified").to_string();
                self.fail(format!("protocol aborted: {reason}"));
            }
            "election_setup" => self.fail(format!("entry {} repeats the setup", entry.seq)),
            "registration_refused" | "booth_denied" | "ung_dispute" | "replacement_refused" | "coercer_query" => {}
            other => {
                return Err(BoardError::Body { seq: entry.seq, kind: other.into(), message: "unknown entry type".into() });
            }
        }
        Ok(())
    }

    fn finish(mut self) -> AuditReport {
        self.check_record();
        let failing: BTreeSet<(String, usize)> = self.report.failing_slots().into_iter().collect();
        let gd_failed = self.report.gd_check == Some(false);
        let mut latest: BTreeMap<(String, usize), TraceOutcome> = BTreeMap::new();
        for t in &self.traces {
            latest.insert((t.pass.clone(), t.slot), t.clone());
        }
        for (key, outcome) in latest {
            let still_failing = failing.contains(&key) || (gd_failed && key.0 == PASS_PSEUDONYM);
            if still_failing {
                self.report.liable.push(outcome);
            } else if outcome.verdict != Verdict::None {
                self.report.resolved_incidents += 1;
            }
        }
        self.report
    }

    /// Recomputes every stage; stops at the first unusable record.
    fn check_record(&mut self) {
        if !self.report.membership_violations.is_empty() {
            let n = self.report.membership_violations.len();
            self.fail(format!("{n} membership violation(s)"));
        }
        if !self.polls_closed {
            self.fail("polls never closed");
            return;
        }
        let ctx = self.ctx.clone();
        let ctx = &ctx;
        let servers = self.setup.public_shares.len();
        let params = ctx.params.clone();

        match check_encryption_stage(ctx, &self.transcript.initial, &self.transcript.encryption, servers) {
            Ok(checks) => {
                for c in checks.iter().filter(|c| !c.passed()) {
                    self.report.failures.push(format!("encryption record of server {} fails its checks", c.server_index));
                }
                self.report.stage_checks = checks;
            }
            Err(e) => {
                self.fail(format!("encryption stage: {e}"));
                return;
            }
        }
        for position in [VOTE_RANGE.start, PSEUDONYM_RANGE.start] {
            let ok = check_sigma(&params, &self.transcript.initial, &self.transcript.encryption, position);
            self.report.sigma_checks.push(ok);
            if !ok {
                self.fail(format!("construction exponent sums fail at position {position}"));
            }
        }

        let encrypted = self.transcript.encrypted().clone();
        let Some(omega) = self.transcript.pass(PASS_PSEUDONYM).cloned() else {
            self.fail("pseudonym pass missing");
            return;
        };
        if !self.check_pass(&omega, &encrypted.project(PSEUDONYM_RANGE), servers) {
            return;
        }
        let omega_out = omega.output().expect("checked").clone();
        match check_decryption_stage(ctx, &encrypted, &omega_out, PSEUDONYM_RANGE.start, 0, &self.transcript.encryption) {
            Ok(ok) => {
                self.report.gd_check = Some(ok);
                if !ok {
                    self.fail("decryption product check fails on the pseudonym pass");
                }
            }
            Err(e) => self.fail(format!("decryption product check: {e}")),
        }
        self.check_items(&omega_out, PASS_PSEUDONYM);

        let expected_groups = group_by_pseudonym(&omega_out, self.setup.threshold);
        let groups = match self.pretally.take() {
            Some(g) => g,
            None => {
                self.fail("pretally missing");
                return;
            }
        };
        if groups != expected_groups {
            self.report.grouping_ok = false;
            self.fail("published groups differ from the decrypted pseudonyms");
        }

        let representatives: Vec<usize> = expected_groups.iter().filter_map(|g| g.representative).collect();
        let Some(ballots) = self.transcript.pass(PASS_BALLOT).cloned() else {
            self.fail("ballot pass missing");
            return;
        };
        let Some(expected_input) = encrypted.select(&representatives, VOTE_RANGE) else {
            self.fail("representatives name unknown slots");
            return;
        };
        if !self.check_pass(&ballots, &expected_input, servers) {
            return;
        }
        let ballot_out = ballots.output().expect("checked").clone();
        self.check_items(&ballot_out, PASS_BALLOT);

        match (&self.tally, &self.table) {
            (Some(t), Some(table)) => {
                let expected = count_groups(&expected_groups, &ballot_out, table, self.setup.candidates.len());
                if t.tally != expected {
                    self.report.tally_ok = false;
                    self.fail("published tally differs from the decrypted representatives");
                }
            }
            (None, _) => self.fail("tally missing"),
            (_, None) => {}
        }
    }

    fn check_pass(&mut self, pass: &DecryptionPass, expected_input: &Batch, servers: usize) -> bool {
        if pass.input() != Some(expected_input) && !(expected_input.is_empty() && pass.input().is_some_and(Batch::is_empty)) {
            self.fail(format!("{} pass input differs from the encrypted batch", pass.pass));
        }
        match check_decryption_records(&self.ctx, pass.input().unwrap_or(expected_input), &pass.records, servers) {
            Ok(checks) => {
                for c in checks.iter().filter(|c| !c.passed()) {
                    self.report.failures.push(format!("{} pass record of server {} fails its checks", pass.pass, c.server_index));
                }
                self.report.stage_checks.extend(checks);
                true
            }
            Err(e) => {
                self.fail(format!("{} pass: {e}", pass.pass));
                false
            }
        }
    }

    fn check_items(&mut self, out: &Batch, pass: &str) {
        for (slot, item) in out.slot_ids.iter().zip(&out.items) {
            let ok = check_item(&self.ctx.params, item);
            self.report.item_checks.push(ItemCheck { pass: pass.into(), slot: *slot, ok });
            if !ok {
                self.fail(format!("{pass} slot {slot} fails the consistency check"));
            }
        }
    }
}

/// Whether a proposed triple is the one the construction run produced.
fn form_matches(params: &crate::group::GroupParams, form: Option<&FormTranscript>, triple: &[Ciphertext]) -> bool {
    let Some(form) = form else { return false };
    let Some(chains) = &form.chains else { return false };
    triple.len() == 3 && triple[0] == form.ung.t1 && triple[1] == form.ung.t2 && triple[2] == chains.squared.mul(params, &chains.linear)
}

/// Verifies a parsed board. Errors mean the board is malformed; protocol
/// failures are reported in the returned report.
pub fn verify_board(board: &Board) -> Result<AuditReport, BoardError> {
    Ok(replay(board)?.finish())
}

/// The mix-net state a board describes once every patch is applied.
#[derive(Debug, Clone)]
pub struct PublicRecord {
    pub ctx: StageContext,
    pub public: Vec<PublicShare>,
    pub transcript: MixTranscript,
}

pub fn public_record(board: &Board) -> Result<PublicRecord, BoardError> {
    let r = replay(board)?;
    Ok(PublicRecord { ctx: r.ctx, public: r.setup.public_shares, transcript: r.transcript })
}

fn replay(board: &Board) -> Result<Replay, BoardError> {
    let first = board.entries.first().ok_or(BoardError::Body { seq: 0, kind: "none".into(), message: "board has no setup".into() })?;
    if first.kind != "election_setup" {
        return Err(BoardError::Body { seq: 0, kind: first.kind.clone(), message: "first entry must be the setup".into() });
    }
    let setup: SetupBody = first.decode()?;
    let params = setup.params.clone();
    let ctx = StageContext::new(params.clone(), setup.y_star.clone());
    let mut replay = Replay {
        table: None,
        report: AuditReport { trace_checks_ok: true, seal_checks_ok: true, grouping_ok: true, tally_ok: true, ..Default::default() },
        transcript: MixTranscript { initial: Batch::default(), encryption: Vec::new(), passes: Vec::new() },
        sessions: Vec::new(),
        approvals: Vec::new(),
        voters: BTreeSet::new(),
        entry_seals: BTreeSet::new(),
        approval_seals: BTreeSet::new(),
        traces: Vec::new(),
        polls_closed: false,
        booth_opened: false,
        pretally: None,
        tally: None,
        aborted: false,
        ctx,
        setup,
    };

    if params != board.header.params || params.validate().is_err() {
        replay.fail("setup parameters differ from the header or are invalid");
    }
    match combine_keys(&params, &replay.setup.public_shares) {
        Ok(k) if k.y_star == replay.setup.y_star => {}
        _ => replay.fail("joint key does not match the public shares"),
    }
    match u32::try_from(replay.setup.candidates.len()).ok().and_then(|c| CandidateTable::new(&params, c + 1).ok()) {
        Some(t) if t.codes() == replay.setup.codes.as_slice() => replay.table = Some(t),
        _ => replay.fail("candidate codes are not the canonical encoding"),
    }

    for entry in &board.entries[1..] {
        replay.step(entry)?;
    }
    Ok(replay)
}
