//! `svrm`: run, attack, verify and trace simulated elections.
//!
//! Exit codes: 0 all checks pass, 1 dishonesty detected, 2 malformed input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use svrm_core::audit::{trace_item, AuditReport, Responder, Verdict};
use svrm_core::board::Board;
use svrm_core::election::PASS_PSEUDONYM;
use svrm_core::mixnet::ServerPrivateState;
use svrm_core::parallel::Execution;
use svrm_core::revised::UngDeviation;
use svrm_core::rng::derive_rng;
use svrm_core::scenario::{append_tail_keys, run_scenario_with, Attack, Scenario, ScenarioOutcome, VoterChoice, GROUP_BITS_ENV};
use svrm_core::verify::{public_record, verify_board};

const EXIT_PASS: u8 = 0;
const EXIT_DISHONEST: u8 = 1;
const EXIT_MALFORMED: u8 = 2;

#[derive(Parser)]
#[command(name = "svrm", version, about = "Simulate and verify revised-SVRM elections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its transcript.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Verify a transcript offline; prints the audit report as JSON.
    Verify { transcript: PathBuf },
    /// Run a scenario with one injected attack.
    Attack(AttackArgs),
    /// Trace one decrypted item against saved server states.
    Trace {
        transcript: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        slot: usize,
        #[arg(long, default_value = PASS_PSEUDONYM)]
        pass: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Disclose the keys of servers 1..=count and append them to a transcript.
    DiscloseTailKeys {
        transcript: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        count: usize,
        /// Defaults to rewriting the input transcript.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long)]
    out: PathBuf,
    /// Where to save the servers' private states for later tracing.
    #[arg(long)]
    server_state: Option<PathBuf>,
    /// Run stages on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    LambdaScale,
    WrongPartialDecrypt,
    SkipDecrypt,
    DuplicateBallot,
    DoubleEntry,
    CoercerQuery,
    TamperUng,
}

#[derive(Clone, Copy, ValueEnum)]
enum UngVariant {
    MismatchedFirstPair,
    WrongChainExponent,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum)]
    kind: AttackKind,
    /// Base scenario; a six-voter default is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    server: usize,
    #[arg(long, default_value_t = 0)]
    slot: usize,
    #[arg(long, default_value = PASS_PSEUDONYM)]
    pass: String,
    #[arg(long, default_value = "2")]
    lambda: String,
    #[arg(long, default_value_t = 0)]
    first: usize,
    #[arg(long, default_value_t = 1)]
    second: usize,
    #[arg(long, default_value_t = 3)]
    position: usize,
    #[arg(long, default_value = "v0")]
    voter: String,
    #[arg(long, value_enum, default_value = "wrong-chain-exponent")]
    variant: UngVariant,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Abort on detection instead of repairing.
    #[arg(long)]
    no_reprocess: bool,
    #[command(flatten)]
    output: OutputArgs,
}

/// An error that maps to the malformed-input exit code.
#[derive(Debug)]
struct Malformed(anyhow::Error);

impl std::fmt::Display for Malformed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Malformed {}

fn malformed(e: impl Into<anyhow::Error>) -> anyhow::Error {
    Malformed(e.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.is::<Malformed>() { EXIT_MALFORMED } else { EXIT_DISHONEST };
            ExitCode::from(code)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run { config, output } => {
            let scenario = load_scenario(&config)?;
            run_and_write(&scenario, &output)
        }
        Command::Verify { transcript } => {
            let board = load_board(&transcript)?;
            let report = verify_board(&board).map_err(malformed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            print_report(&report);
            Ok(verdict_code(&report))
        }
        Command::Attack(args) => attack(args),
        Command::Trace { transcript, state, slot, pass, seed } => trace(&transcript, &state, slot, &pass, seed),
        Command::DiscloseTailKeys { transcript, state, count, out } => {
            let mut board = load_board(&transcript)?;
            let states = load_states(&state)?;
            let keys = append_tail_keys(&mut board, &states, count).map_err(malformed)?;
            let target = out.unwrap_or(transcript);
            write_file(&target, &board.to_jsonl())?;
            println!("disclosed {} key(s) to {}", keys.len(), target.display());
            let report = board.report.expect("report is attached");
            print_report(&report);
            Ok(verdict_code(&report))
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(malformed)?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(malformed)
}

fn load_board(path: &Path) -> Result<Board> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(malformed)?;
    Board::parse(&text).with_context(|| format!("parsing {}", path.display())).map_err(malformed)
}

fn load_states(path: &Path) -> Result<Vec<ServerPrivateState>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(malformed)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(malformed)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn default_attack_scenario(seed: u64) -> Scenario {
    let choices: Vec<VoterChoice> = [0, 1, 0, 2, 0, 1].into_iter().map(VoterChoice::Candidate).collect();
    Scenario::honest(seed, 3, 2, 3, &choices)
}

fn attack(args: AttackArgs) -> Result<u8> {
    let mut scenario = match &args.config {
        Some(path) => load_scenario(path)?,
        None => default_attack_scenario(args.seed),
    };
    if args.no_reprocess {
        scenario.reprocess = false;
    }
    let attack = match args.kind {
        AttackKind::LambdaScale => Attack::LambdaScale {
            server: args.server,
            lambda: args.lambda,
            first: args.first,
            second: args.second,
            position: args.position,
        },
        AttackKind::WrongPartialDecrypt => Attack::WrongPartialDecrypt { server: args.server, slot: args.slot, pass: args.pass },
        AttackKind::SkipDecrypt => Attack::SkipDecrypt { server: args.server, slot: args.slot, pass: args.pass },
        AttackKind::DuplicateBallot => Attack::DuplicateBallot { voter: args.voter },
        AttackKind::DoubleEntry => Attack::DoubleEntry { voter: args.voter },
        AttackKind::CoercerQuery => Attack::CoercerQuery { voter: args.voter },
        AttackKind::TamperUng => Attack::TamperUng {
            server: args.server,
            voter: args.voter,
            variant: match args.variant {
                UngVariant::MismatchedFirstPair => UngDeviation::MismatchedFirstPair,
                UngVariant::WrongChainExponent => UngDeviation::WrongChainExponent,
            },
        },
    };
    scenario.attacks.push(attack);
    run_and_write(&scenario, &args.output)
}

fn run_and_write(scenario: &Scenario, output: &OutputArgs) -> Result<u8> {
    let exec = if output.sequential { Execution::Sequential } else { Execution::default() };
    let outcome = run_scenario_with(scenario, exec)
        .with_context(|| format!("running scenario (default group size from {GROUP_BITS_ENV})"))
        .map_err(malformed)?;
    write_file(&output.out, &outcome.transcript())?;
    if let Some(path) = &output.server_state {
        write_file(path, &serde_json::to_string_pretty(&outcome.server_states)?)?;
    }
    print_outcome(&outcome);
    Ok(verdict_code(&outcome.report))
}

fn trace(transcript: &Path, state: &Path, slot: usize, pass: &str, seed: u64) -> Result<u8> {
    let board = load_board(transcript)?;
    let states = load_states(state)?;
    let record = public_record(&board).map_err(malformed)?;
    let responders: Vec<&dyn Responder> = states.iter().map(|s| s as &dyn Responder).collect();
    let outcome = trace_item(&record.ctx, &record.public, &record.transcript, pass, slot, &responders, &mut derive_rng(seed, "trace"))
        .map_err(malformed)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(if outcome.verdict == Verdict::None { EXIT_PASS } else { EXIT_DISHONEST })
}

fn verdict_code(report: &AuditReport) -> u8 {
    if report.passed() {
        EXIT_PASS
    } else {
        EXIT_DISHONEST
    }
}

fn print_outcome(outcome: &ScenarioOutcome) {
    if let Some(tally) = &outcome.tally {
        println!("tally: counts {:?}, inferior groups {:?}, invalid {}", tally.counts, tally.inferior, tally.invalid);
    }
    if let Some(reason) = &outcome.aborted {
        println!("aborted: {reason}");
    }
    print_report(&outcome.report);
}

/// Human-readable summary on the error stream.
fn print_report(report: &AuditReport) {
    let failing = report.failing_slots();
    if !failing.is_empty() {
        let slots: Vec<String> = failing.iter().map(|(pass, slot)| format!("{pass}:{slot}")).collect();
        eprintln!("failing slots: {}", slots.join(" "));
    }
    for outcome in &report.liable {
        eprintln!("liable: {} slot {} -> {:?}", outcome.pass, outcome.slot, outcome.verdict);
    }
    if report.resolved_incidents > 0 {
        eprintln!("resolved incidents: {}", report.resolved_incidents);
    }
    for failure in &report.failures {
        eprintln!("FAIL {failure}");
    }
    eprintln!("{}", if report.passed() { "verification passed" } else { "verification FAILED" });
}
