//! Declarative election scenarios: a voter script, scripted adversarial
//! deviations and a seed. Every actor draws from its own labelled stream,
//! so a fixed scenario always produces the same board.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{disclose_tail_keys, AuditReport, DisclosedKey};
use crate::board::{Board, BoardError};
use crate::election::{
    choose_lambda, Choice, Election, ElectionConfig, ElectionError, TailKeysBody, Tally, PASS_PSEUDONYM, PSEUDONYM_RANGE,
};
use crate::group::{setup_group, CandidateTable, GroupError, GroupParams, KeyShare};
use crate::mixnet::{DecryptFaultKind, Fault, ServerPrivateState};
use crate::parallel::Execution;
use crate::revised::UngDeviation;
use crate::rng::derive_rng;
use crate::verify::verify_board;

/// Default group size when a scenario names none.
pub const DEFAULT_GROUP_BITS: u64 = 128;
pub const GROUP_BITS_ENV: &str = "SVRM_GROUP_BITS";
/// Construction attempts per voter before giving up on a disputed booth.
const MAX_CONSTRUCTION_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Election(#[from] ElectionError),
    #[error(transparent)]
    Board(#[from] BoardError),
    #[error("{0} scripted fault(s) never fired")]
    UnfiredFaults(usize),
}

/// Explicit parameters as decimal strings, or a bit length to generate.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    #[serde(default)]
    pub bits: Option<u64>,
    #[serde(default)]
    pub p: Option<String>,
    #[serde(default)]
    pub q: Option<String>,
    #[serde(default)]
    pub g: Option<String>,
    #[serde(default)]
    pub lambda: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VoterChoice {
    Candidate(u32),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoterScript {
    pub name: String,
    pub choice: VoterChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Attack {
    LambdaScale {
        server: usize,
        lambda: String,
        first: usize,
        second: usize,
        #[serde(default = "pseudonym_anchor")]
        position: usize,
    },
    WrongPartialDecrypt {
        server: usize,
        slot: usize,
        #[serde(default = "pseudonym_pass")]
        pass: String,
    },
    SkipDecrypt {
        server: usize,
        slot: usize,
        #[serde(default = "pseudonym_pass")]
        pass: String,
    },
    /// Tries to replace the voter's ballot after approval.
    DuplicateBallot {
        voter: String,
    },
    /// Tries to enter the booth a second time.
    DoubleEntry {
        voter: String,
    },
    CoercerQuery {
        voter: String,
    },
    /// A server deviates while building the voter's first ballot.
    TamperUng {
        server: usize,
        voter: String,
        variant: UngDeviation,
    },
}

fn pseudonym_anchor() -> usize {
    PSEUDONYM_RANGE.start
}

fn pseudonym_pass() -> String {
    PASS_PSEUDONYM.into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub servers: usize,
    pub threshold: usize,
    pub candidates: Vec<String>,
    #[serde(default = "default_true")]
    pub reprocess: bool,
    #[serde(default)]
    pub group: GroupSpec,
    #[serde(default)]
    pub voters: Vec<VoterScript>,
    #[serde(default)]
    pub attacks: Vec<Attack>,
}

fn default_true() -> bool {
    true
}

impl Scenario {
    /// Honest voters named `v0..` with the given choices.
    pub fn honest(seed: u64, servers: usize, threshold: usize, candidates: usize, choices: &[VoterChoice]) -> Self {
        Self {
            seed,
            servers,
            threshold,
            candidates: (0..candidates).map(|i| format!("candidate-{i}")).collect(),
            reprocess: true,
            group: GroupSpec::default(),
            voters: choices.iter().enumerate().map(|(i, c)| VoterScript { name: format!("v{i}"), choice: c.clone() }).collect(),
            attacks: Vec::new(),
        }
    }

    pub fn with_group(mut self, group: GroupSpec) -> Self {
        self.group = group;
        self
    }
}

impl GroupSpec {
    pub fn bits(bits: u64) -> Self {
        Self { bits: Some(bits), ..Default::default() }
    }

    pub fn explicit(params: &GroupParams) -> Self {
        Self {
            bits: None,
            p: Some(params.p.to_string()),
            q: Some(params.q.to_string()),
            g: Some(params.g.to_string()),
            lambda: Some(params.lambda.to_string()),
        }
    }
}

fn decimal(field: &str, text: &str) -> Result<BigUint, ScenarioError> {
    text.trim().parse().map_err(|_| ScenarioError::Invalid(format!("{field} is not a decimal integer: {text}")))
}

fn default_bits() -> Result<u64, ScenarioError> {
    match std::env::var(GROUP_BITS_ENV) {
        Ok(v) => v.parse().map_err(|_| ScenarioError::Invalid(format!("{GROUP_BITS_ENV}={v} is not a bit length"))),
        Err(_) => Ok(DEFAULT_GROUP_BITS),
    }
}

/// Builds the group. An unpinned `lambda` is re-drawn until no candidate
/// code or the invalid-vote token has a vanishing consistency exponent.
pub fn resolve_group(spec: &GroupSpec, seed: u64, candidates: usize) -> Result<GroupParams, ScenarioError> {
    let mut params = match (&spec.p, &spec.q, &spec.g) {
        (Some(p), Some(q), Some(g)) => {
            if spec.bits.is_some() {
                return Err(ScenarioError::Invalid("give either bits or p/q/g, not both".into()));
            }
            let lambda = spec.lambda.as_deref().map(|l| decimal("lambda", l)).transpose()?.unwrap_or_else(|| BigUint::from(1u32));
            GroupParams::new(decimal("p", p)?, decimal("q", q)?, decimal("g", g)?, lambda)?
        }
        (None, None, None) => {
            let bits = match spec.bits {
                Some(b) => b,
                None => default_bits()?,
            };
            let mut params = setup_group(bits, seed)?;
            if let Some(l) = &spec.lambda {
                params.lambda = decimal("lambda", l)?;
                params.validate()?;
            }
            params
        }
        _ => return Err(ScenarioError::Invalid("p, q and g must be given together".into())),
    };
    if spec.lambda.is_none() {
        let count = u32::try_from(candidates + 1).map_err(|_| ScenarioError::Invalid("too many candidates".into()))?;
        let table = CandidateTable::new(&params, count)?;
        let codes: Vec<BigUint> = table.codes().iter().map(|c| c.element.clone()).collect();
        params.lambda = choose_lambda(&params, &codes, &mut derive_rng(seed, "lambda"))
            .ok_or_else(|| ScenarioError::Invalid("no lambda avoids every candidate code".into()))?;
    }
    Ok(params)
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub board: Board,
    pub report: AuditReport,
    pub server_states: Vec<ServerPrivateState>,
    pub tally: Option<Tally>,
    /// Set when the election stopped at a protocol abort.
    pub aborted: Option<String>,
}

impl ScenarioOutcome {
    pub fn transcript(&self) -> String {
        self.board.to_jsonl()
    }
}

fn parse_choice(script: &VoterScript, candidates: usize) -> Result<Option<Choice>, ScenarioError> {
    match &script.choice {
        VoterChoice::Candidate(id) if (*id as usize) < candidates => Ok(Some(Choice::Candidate(*id))),
        VoterChoice::Candidate(id) => Err(ScenarioError::Invalid(format!("{} chooses unknown candidate {id}", script.name))),
        VoterChoice::Keyword(k) if k == "invalid" => Ok(Some(Choice::Invalid)),
        VoterChoice::Keyword(k) if k == "abstain" => Ok(None),
        VoterChoice::Keyword(k) => Err(ScenarioError::Invalid(format!("{} has unknown choice {k}", script.name))),
    }
}

pub fn election_config(scenario: &Scenario, params: GroupParams) -> ElectionConfig {
    ElectionConfig {
        candidates: scenario.candidates.clone(),
        threshold: scenario.threshold,
        servers: scenario.servers,
        roll: scenario.voters.iter().map(|v| v.name.clone()).collect(),
        params,
        seed: scenario.seed,
        reprocess: scenario.reprocess,
    }
}

pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioOutcome, ScenarioError> {
    run_scenario_with(scenario, Execution::default())
}

/// Runs the whole election, then verifies the board offline and attaches
/// the report to its footer.
pub fn run_scenario_with(scenario: &Scenario, exec: Execution) -> Result<ScenarioOutcome, ScenarioError> {
    let params = resolve_group(&scenario.group, scenario.seed, scenario.candidates.len())?;
    let mut election = Election::setup(election_config(scenario, params.clone()))?.with_execution(exec);
    let mut voter_attacks_fired = 0usize;
    let mut voter_attacks = 0usize;

    for attack in &scenario.attacks {
        match attack {
            Attack::LambdaScale { server, lambda, first, second, position } => {
                let lambda = decimal("lambda", lambda)?;
                election.inject_mix_fault(*server, Fault::LambdaScale { lambda, first: *first, second: *second, position: *position })?;
            }
            Attack::WrongPartialDecrypt { server, slot, pass } => {
                election
                    .inject_mix_fault(*server, Fault::Decrypt { pass: pass.clone(), slot: *slot, fault: DecryptFaultKind::WrongKey })?;
            }
            Attack::SkipDecrypt { server, slot, pass } => {
                election.inject_mix_fault(*server, Fault::Decrypt { pass: pass.clone(), slot: *slot, fault: DecryptFaultKind::Skip })?;
            }
            _ => voter_attacks += 1,
        }
    }
    let voter_attack = |voter: &str, pick: fn(&Attack, &str) -> bool| scenario.attacks.iter().filter(move |a| pick(a, voter)).count();

    let mut held = Vec::with_capacity(scenario.voters.len());
    for script in &scenario.voters {
        let mut rng = derive_rng(scenario.seed, &format!("voter/{}", script.name));
        held.push(election.register(&script.name, &mut rng)?);
    }
    election.open_voting()?;

    for (script, credential) in scenario.voters.iter().zip(&held) {
        let Some(choice) = parse_choice(script, scenario.candidates.len())? else { continue };
        let mut rng = derive_rng(scenario.seed, &format!("voter/{}/booth", script.name));
        for attack in &scenario.attacks {
            if let Attack::TamperUng { server, voter, variant } = attack {
                if *voter == script.name {
                    election.inject_ung_fault(*server, *variant)?;
                    voter_attacks_fired += 1;
                }
            }
        }
        let session = election.enter_booth(credential, &mut rng)?;
        let mut constructed = false;
        for _ in 0..MAX_CONSTRUCTION_ATTEMPTS {
            match election.construct_vote(session, choice, &mut rng) {
                Ok(_) => {
                    constructed = true;
                    break;
                }
                Err(ElectionError::Dispute(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        if !constructed {
            return Err(ScenarioError::Invalid(format!("ballot construction for {} kept failing", script.name)));
        }
        election.approve(session, credential, &mut rng)?;

        let doubles = voter_attack(&script.name, |a, v| matches!(a, Attack::DoubleEntry { voter } if voter == v));
        for _ in 0..doubles {
            match election.enter_booth(credential, &mut rng) {
                Err(ElectionError::Denied(_)) => voter_attacks_fired += 1,
                other => return Err(ScenarioError::Invalid(format!("second booth entry was not denied: {other:?}"))),
            }
        }
        let duplicates = voter_attack(&script.name, |a, v| matches!(a, Attack::DuplicateBallot { voter } if voter == v));
        for _ in 0..duplicates {
            let other = match choice {
                Choice::Candidate(id) => Choice::Candidate((id + 1) % scenario.candidates.len() as u32),
                Choice::Invalid => Choice::Candidate(0),
            };
            match election.construct_vote(session, other, &mut rng) {
                Err(ElectionError::Denied(_)) => voter_attacks_fired += 1,
                other => return Err(ScenarioError::Invalid(format!("replacement after approval was not refused: {other:?}"))),
            }
        }
        let queries = voter_attack(&script.name, |a, v| matches!(a, Attack::CoercerQuery { voter } if voter == v));
        for _ in 0..queries {
            election.coercer_query(Some(session));
            voter_attacks_fired += 1;
        }
    }

    let mut aborted = None;
    let result = election
        .close_polls()
        .and_then(|_| election.run_encryption())
        .and_then(|_| election.pretally().map(|_| ()))
        .and_then(|_| election.run_tally().map(|_| ()));
    match result {
        Ok(()) => {}
        Err(ElectionError::Aborted(reason)) => aborted = Some(reason),
        Err(e) => return Err(e.into()),
    }
    let unfired = election.pending_faults() + voter_attacks - voter_attacks_fired;
    if aborted.is_none() && unfired > 0 {
        return Err(ScenarioError::UnfiredFaults(unfired));
    }

    let mut board = election.board.clone();
    let report = verify_board(&board)?;
    board.report = Some(report.clone());
    Ok(ScenarioOutcome { board, report, server_states: election.server_states(), tally: election.tally().cloned(), aborted })
}

/// Appends the keys of servers `1..=count` taken from saved private
/// states; the footer report is recomputed.
pub fn append_tail_keys(board: &mut Board, states: &[ServerPrivateState], count: usize) -> Result<Vec<DisclosedKey>, ScenarioError> {
    let keys: Vec<KeyShare> = states.iter().map(|s| s.key.clone()).collect();
    let disclosed = disclose_tail_keys(&keys, count).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    if !disclosed.is_empty() {
        board.append("tail_keys", &TailKeysBody { keys: disclosed.clone() });
    }
    board.report = Some(verify_board(board)?);
    Ok(disclosed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(choices: &[VoterChoice]) -> Scenario {
        Scenario::honest(3, 3, 2, 3, choices).with_group(GroupSpec::explicit(&GroupParams::toy(1)))
    }

    #[test]
    fn empty_script_gives_empty_tally() {
        let out = run_scenario(&Scenario { voters: vec![], ..toy(&[]) }).unwrap();
        assert!(out.report.passed(), "{:?}", out.report.failures);
        assert_eq!(out.tally.unwrap(), Tally { counts: vec![0, 0, 0], inferior: vec![], invalid: 0 });
    }

    #[test]
    fn toy_scenario_is_deterministic() {
        let choices = [VoterChoice::Candidate(0), VoterChoice::Candidate(0), VoterChoice::Keyword("abstain".into())];
        let a = run_scenario(&toy(&choices)).unwrap();
        let b = run_scenario(&toy(&choices)).unwrap();
        assert_eq!(a.transcript(), b.transcript());
        assert_eq!(a.tally.unwrap().counts, vec![2, 0, 0]);
    }

    #[test]
    fn unfired_fault_is_an_error() {
        let mut s = toy(&[VoterChoice::Candidate(0)]);
        s.attacks.push(Attack::SkipDecrypt { server: 1, slot: 7, pass: PASS_PSEUDONYM.into() });
        assert!(matches!(run_scenario(&s), Err(ScenarioError::UnfiredFaults(1))));
    }

    #[test]
    fn voter_attacks_are_refused_and_recorded() {
        let mut s = toy(&[VoterChoice::Candidate(1), VoterChoice::Candidate(1)]);
        s.attacks = vec![
            Attack::DoubleEntry { voter: "v0".into() },
            Attack::DuplicateBallot { voter: "v1".into() },
            Attack::CoercerQuery { voter: "v1".into() },
            Attack::TamperUng { server: 2, voter: "v0".into(), variant: UngDeviation::WrongChainExponent },
        ];
        let out = run_scenario(&s).unwrap();
        assert!(out.report.passed(), "{:?}", out.report.failures);
        assert_eq!(out.tally.unwrap().counts, vec![0, 2, 0]);
        assert_eq!(out.board.of_kind("booth_denied").count(), 1);
        assert_eq!(out.board.of_kind("replacement_refused").count(), 1);
        assert_eq!(out.board.of_kind("ung_dispute").count(), 1);
    }

    #[test]
    fn tail_keys_append_and_verify() {
        let mut out = run_scenario(&toy(&[VoterChoice::Candidate(2), VoterChoice::Candidate(2)])).unwrap();
        assert!(append_tail_keys(&mut out.board, &out.server_states, 3).is_err());
        let keys = append_tail_keys(&mut out.board, &out.server_states, 2).unwrap();
        assert_eq!(keys.len(), 2);
        let report = out.board.report.clone().unwrap();
        assert_eq!(report.tail_keys_ok, Some(true));
        assert!(report.passed());
    }

    #[test]
    fn mixed_group_spec_is_rejected() {
        let spec = GroupSpec { bits: Some(32), ..GroupSpec::explicit(&GroupParams::toy(1)) };
        assert!(resolve_group(&spec, 1, 2).is_err());
        assert!(resolve_group(&GroupSpec { p: Some("23".into()), ..Default::default() }, 1, 2).is_err());
    }
}
