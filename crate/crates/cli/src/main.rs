use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bayes_audit::audit::{replay, AuditConfig, AuditState, PlanRequest};
use bayes_audit::election::{BallotAddress, Interpretation};
use bayes_audit::planner::PlannerConfig;
use bayes_audit::prng::{
    global_ballot_order, sample_without_replacement, AuditSeed, Population, PrngStream,
};
use bayes_audit_service::ServiceConfig;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Bayesian tabulation audits.
#[derive(Parser)]
#[command(name = "bayes-audit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and record the ceremony seed.
    Seed {
        digits: String,
        /// Where the seed came from (dice ceremony, beacon, ...).
        #[arg(long)]
        note: Option<String>,
        /// Also write the record to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw ballots for one contest by the counter-mode retry method.
    Draw {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        contest: String,
        #[arg(long)]
        count: u64,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long, default_value_t = 1)]
        start_counter: u64,
        /// JSON list of addresses already drawn.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Append every draw, rejected retries included, as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the global ballot order over every collection in a config.
    Order {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<String>,
        /// Print only the first N ballots.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Plan further sampling for a running audit.
    Plan(PlanArgs),
    /// Run an audit round by round against a state file.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Serve the audit over HTTP.
    Serve {
        #[command(flatten)]
        state: StateArg,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Enables mutations for clients presenting this token.
        #[arg(long)]
        operator_token: Option<String>,
    },
}

#[derive(Args)]
struct StateArg {
    #[arg(long = "state", default_value = "audit-state.json")]
    path: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    state: StateArg,
    /// Overrides every contest's risk limit.
    #[arg(long)]
    risk_limit: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    confidence: f64,
    /// Total sample sizes at which to project the stop probability.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    reps: u64,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Start an audit and draw the first pull list.
    Init {
        config: PathBuf,
        #[command(flatten)]
        state: StateArg,
        /// Replace an existing state file.
        #[arg(long)]
        force: bool,
    },
    /// Print the open pull list.
    Select {
        #[command(flatten)]
        state: StateArg,
    },
    /// Record hand interpretations from a JSON list.
    Record {
        entries: PathBuf,
        #[command(flatten)]
        state: StateArg,
    },
    /// Measure risk and decide; exits 2 if any contest escalates.
    RoundClose {
        #[command(flatten)]
        state: StateArg,
    },
    /// Exits 0 once every contest is accepted or fully counted, else 2.
    Status {
        #[command(flatten)]
        state: StateArg,
    },
    /// Print the public audit record.
    Export {
        #[command(flatten)]
        state: StateArg,
    },
    /// Recompute an exported record and compare.
    Replay { bundle: PathBuf },
    Plan(PlanArgs),
}

enum Verdict {
    Done,
    Escalate,
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_state(path: &Path) -> anyhow::Result<AuditState> {
    AuditState::load(path).with_context(|| format!("loading state {}", path.display()))
}

fn load_config(path: &Path) -> anyhow::Result<AuditConfig> {
    AuditConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn plan(args: PlanArgs) -> anyhow::Result<Verdict> {
    let state = load_state(&args.state.path)?;
    let request = PlanRequest {
        planner: PlannerConfig {
            inner_reps: args.reps,
            inner_trials: args.trials,
            confidence: args.confidence,
            ..PlannerConfig::default()
        },
        risk_limit: args.risk_limit,
        grid: args.grid,
    };
    print_json(&state.plan(&request)?)?;
    Ok(Verdict::Done)
}

#[derive(Serialize)]
struct SeedRecord<'a> {
    seed: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

fn run(cli: Cli) -> anyhow::Result<Verdict> {
    match cli.command {
        Command::Seed { digits, note, out } => {
            let seed = AuditSeed::new(digits)?;
            if seed.digits().len() < 20 {
                eprintln!("warning: seeds shorter than 20 digits are easy to guess");
            }
            let record = SeedRecord { seed: seed.digits(), note: note.as_deref() };
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&record)? + "\n")?;
            }
            print_json(&record)?;
        }
        Command::Draw { config, contest, count, seed, start_counter, exclude, log } => {
            let config = load_config(&config)?;
            let contest = config
                .contest(&contest)
                .with_context(|| format!("no contest {contest}"))?;
            let manifests = contest
                .universe
                .iter()
                .map(|s| config.collection(&s.collection).map(|c| c.manifest()))
                .collect::<Option<Vec<_>>>()
                .context("contest names a collection missing from the config")?;
            let seed = match seed {
                Some(s) => AuditSeed::new(s)?,
                None => config.seed.clone(),
            };
            let already: HashSet<BallotAddress> = match exclude {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
                None => HashSet::new(),
            };
            let mut stream = PrngStream::with_counter(seed, start_counter);
            let selection = sample_without_replacement(
                &mut stream,
                &Population::from_manifests(manifests),
                count,
                &already,
                &format!("draw,{}", contest.id),
            )?;
            if let Some(log) = log {
                let mut file = OpenOptions::new().create(true).append(true).open(&log)?;
                for d in &selection.draws {
                    writeln!(file, "{}", serde_json::to_string(d)?)?;
                }
            }
            print_json(&selection.addresses)?;
            eprintln!("next counter: {}", stream.counter);
        }
        Command::Order { config, seed, limit } => {
            let config = load_config(&config)?;
            let seed = match seed {
                Some(s) => AuditSeed::new(s)?,
                None => config.seed.clone(),
            };
            let mut order =
                global_ballot_order(config.collections.iter().map(|c| c.manifest()), &seed)?;
            if let Some(n) = limit {
                order.truncate(n);
            }
            print_json(&order)?;
        }
        Command::Plan(args) => return plan(args),
        Command::Serve { state, bind, operator_token } => {
            let config = ServiceConfig::new(state.path, operator_token);
            let runtime = tokio::runtime::Runtime::new()?;
            eprintln!("serving on http://{bind}");
            runtime.block_on(bayes_audit_service::serve(config, bind))?;
        }
        Command::Audit(cmd) => return audit(cmd),
    }
    Ok(Verdict::Done)
}

fn audit(cmd: AuditCommand) -> anyhow::Result<Verdict> {
    match cmd {
        AuditCommand::Init { config, state, force } => {
            if state.path.exists() && !force {
                bail!("{} exists; pass --force to replace it", state.path.display());
            }
            let audit = AuditState::start(load_config(&config)?)?;
            audit.save(&state.path)?;
            print_json(&audit.status())?;
        }
        AuditCommand::Select { state } => print_json(&load_state(&state.path)?.open_selections())?,
        AuditCommand::Record { entries, state } => {
            let mut audit = load_state(&state.path)?;
            let text = std::fs::read_to_string(&entries)
                .with_context(|| format!("reading {}", entries.display()))?;
            let entries: Vec<Interpretation> = serde_json::from_str(&text)?;
            let recorded = audit.record_interpretations(&entries)?;
            audit.save(&state.path)?;
            print_json(&serde_json::json!({
                "recorded": recorded,
                "pendingSelections": audit.status().pending_selections,
            }))?;
        }
        AuditCommand::RoundClose { state } => {
            let mut audit = load_state(&state.path)?;
            let report = audit.close_round()?;
            audit.save(&state.path)?;
            print_json(&report)?;
            if report.any_escalating() {
                return Ok(Verdict::Escalate);
            }
        }
        AuditCommand::Status { state } => {
            let audit = load_state(&state.path)?;
            print_json(&audit.status())?;
            if !audit.is_finished() {
                return Ok(Verdict::Escalate);
            }
        }
        AuditCommand::Export { state } => print!("{}", load_state(&state.path)?.export()),
        AuditCommand::Replay { bundle } => {
            let record = load_state(&bundle)?;
            let report = replay(&record)?;
            print_json(&report)?;
            if !report.ok() {
                bail!("replay found {} mismatches", report.mismatches.len());
            }
        }
        AuditCommand::Plan(args) => return plan(args),
    }
    Ok(Verdict::Done)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Verdict::Done) => ExitCode::SUCCESS,
        Ok(Verdict::Escalate) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
