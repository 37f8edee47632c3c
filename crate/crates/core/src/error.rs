use thiserror::Error;

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("contest {contest}: unknown choice {choice:?}")]
    UnknownChoice { contest: String, choice: String },

    #[error("invalid contest {contest}: {reason}")]
    InvalidContest { contest: String, reason: String },

    #[error("invalid ballot manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid ballot address {0:?}")]
    InvalidAddress(String),

    #[error("invalid audit seed: {0}")]
    InvalidSeed(String),

    #[error("population size must be at least 1")]
    EmptyPopulation,

    #[error("cannot draw {requested} more ballots: only {available} remain undrawn")]
    PopulationExhausted { requested: u64, available: u64 },

    #[error("duplicate ballot address {0}")]
    DuplicateAddress(String),

    #[error("count must be nonnegative and finite, got {0}")]
    InvalidCount(f64),

    #[error("the {kind} fuzzer needs integral counts, got {value}")]
    NonIntegralCount { kind: &'static str, value: f64 },

    #[error("the {0} fuzzer works on whole tallies, not single counts")]
    TallyLevelFuzzer(&'static str),

    #[error("tally has no positive entry; cannot form multinomial probabilities")]
    DegenerateTally,

    #[error(
        "stratum {stratum} has an all-zero posterior but {nonsample} unaudited ballots; \
         use a Jeffreys (or other positive) prior or sample the stratum first"
    )]
    DegeneratePosterior { stratum: String, nonsample: u64 },

    #[error("outcome rule needs at least one candidate")]
    NoCandidates,

    #[error("unknown outcome rule {0:?}")]
    UnknownRule(String),

    #[error("prior is not neutral: {0}")]
    NonNeutralPrior(String),

    #[error("choice sets do not match: {0}")]
    ChoiceMismatch(String),

    #[error("risk measurement needs at least one stratum")]
    NoStrata,

    #[error("trial count must be at least 1")]
    NoTrials,

    #[error("invalid audit configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    #[error("ballot {0} is not in the open selection")]
    NotSelected(String),

    #[error("ballot {0} was already recorded")]
    AlreadyRecorded(String),

    #[error("interpretation for {address} is missing contest {contest}")]
    MissingVote { address: String, contest: String },

    #[error("round is incomplete; {} selected ballots unrecorded: {}", .0.len(), .0.join(", "))]
    RoundIncomplete(Vec<String>),

    #[error("ballot {0} has no cast vote record")]
    MissingCvr(String),

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("audit has no open round")]
    NoOpenRound,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
