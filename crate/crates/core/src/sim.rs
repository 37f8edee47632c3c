//! Synthetic elections and end-to-end audit runs, for testing and for
//! studying audit behavior before an election.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit::{
    AuditConfig, AuditState, CollectionConfig, ComparisonPriorConfig, ContestStatus, Escalation,
    Source,
};
use crate::bayes::{PriorKind, SimulationMode};
use crate::election::{
    BallotAddress, BallotManifest, CastVoteRecord, CastVoteRecordFile, Contest, Interpretation,
};
use crate::error::Result;
use crate::fuzz::FuzzerKind;
use crate::parallel::Execution;
use crate::prng::AuditSeed;

pub const CONTEST: &str = "contest";
pub const COLLECTION: &str = "county";

/// Ground truth for a synthetic election: every ballot's actual votes.
#[derive(Clone, Debug)]
pub struct SyntheticElection {
    pub config: AuditConfig,
    pub truth: HashMap<BallotAddress, BTreeMap<String, String>>,
}

#[derive(Clone, Debug)]
pub struct TwoCandidateSpec {
    pub ballots: u64,
    /// Ballots actually marked for A; the rest are for B.
    pub votes_for_a: u64,
    pub reported_winner: String,
    /// Attach perfect-scanner CVRs, making it a comparison audit.
    pub with_cvrs: bool,
    /// Shuffles ballots into positions and seeds the audit.
    pub seed: u64,
    pub trials: u64,
    pub risk_limit: f64,
}

impl TwoCandidateSpec {
    pub fn new(ballots: u64, votes_for_a: u64, reported_winner: &str, seed: u64) -> Self {
        Self {
            ballots,
            votes_for_a,
            reported_winner: reported_winner.to_owned(),
            with_cvrs: false,
            seed,
            trials: 10_000,
            risk_limit: 0.05,
        }
    }
}

/// Two candidates on one collection. The tie-break order favors the
/// reported winner.
pub fn two_candidate_election(spec: &TwoCandidateSpec) -> Result<SyntheticElection> {
    let loser = if spec.reported_winner == "A" { "B" } else { "A" };
    let contest = Contest::plurality(
        CONTEST,
        &["A", "B"],
        &[spec.reported_winner.as_str(), loser],
        &spec.reported_winner,
        COLLECTION,
        spec.ballots,
    )?;
    let manifest = BallotManifest::single_box(COLLECTION, spec.ballots);
    let mut votes: Vec<&str> = (0..spec.ballots)
        .map(|i| if i < spec.votes_for_a { "A" } else { "B" })
        .collect();
    votes.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let truth: HashMap<BallotAddress, BTreeMap<String, String>> = manifest
        .addresses()
        .zip(&votes)
        .map(|(a, v)| (a, [(CONTEST.to_owned(), (*v).to_owned())].into_iter().collect()))
        .collect();
    let cvrs = spec.with_cvrs.then(|| {
        Source::Inline(CastVoteRecordFile {
            collection: COLLECTION.to_owned(),
            records: manifest
                .addresses()
                .map(|address| CastVoteRecord {
                    votes: truth[&address].clone(),
                    address,
                    imprinted_id: None,
                })
                .collect(),
        })
    });
    let config = AuditConfig {
        seed: AuditSeed::new(format!("{}", spec.seed.wrapping_mul(2654435761).wrapping_add(1)))?,
        risk_limit: spec.risk_limit,
        prior: PriorKind::Haldane,
        comparison_prior: ComparisonPriorConfig::default(),
        fuzzer: FuzzerKind::Gamma,
        num_trials: spec.trials,
        simulation_mode: SimulationMode::Full,
        escalation: Escalation::default(),
        full_count_threshold: 0.6,
        contests: vec![contest],
        collections: vec![CollectionConfig {
            manifest: Source::Inline(manifest),
            cvrs,
            hand_count: None,
        }],
    };
    Ok(SyntheticElection { config, truth })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRun {
    pub state: AuditState,
    pub rounds: u32,
    /// Ballots examined when the audit ended.
    pub sample_size: u64,
}

impl AuditRun {
    pub fn status(&self, contest: &str) -> ContestStatus {
        self.state.statuses[contest]
    }
}

/// Runs an audit to completion, answering every pull list from the truth.
pub fn run_audit(election: &SyntheticElection, execution: Execution) -> Result<AuditRun> {
    let mut state = AuditState::start(election.config.clone())?;
    let mut rounds = 0;
    loop {
        let entries: Vec<Interpretation> = state
            .open_selections()
            .into_iter()
            .map(|s| Interpretation {
                votes: election.truth[&s.ballot.address].clone(),
                address: s.ballot.address,
            })
            .collect();
        state.record_interpretations(&entries)?;
        let report = state.close_round_with(execution)?;
        rounds += 1;
        if !report.any_escalating() {
            break;
        }
    }
    Ok(AuditRun {
        sample_size: state.audited.len() as u64,
        rounds,
        state,
    })
}
