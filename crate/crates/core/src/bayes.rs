//! Priors, Bayes updates, stratum models and Monte Carlo risk measurement.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::election::{AuditedBallot, CastVoteRecord, Contest, VoteTally};
use crate::error::{AuditError, Result};
use crate::fuzz::{fuzz_dense, multinomial_into, normalize_in_place, FuzzerKind};
use crate::parallel::{fold_indexed, Execution};
use crate::prng::TrialStreams;
use crate::rules::OutcomeEvaluator;

/// Default number of test vote tallies per risk measurement.
pub const DEFAULT_TRIALS: u64 = 1_000_000;

/// A fuzzed tally that came out all zero is redrawn from the same trial
/// stream at most this many times.
const MAX_FUZZ_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PriorKind {
    /// Every pseudocount 0: the posterior is the sample tally.
    #[default]
    Haldane,
    /// Every pseudocount 1/2.
    Jeffreys,
    /// Explicit pseudocounts; must give all candidates the same weight.
    Custom(BTreeMap<String, f64>),
}

/// Dirichlet pseudocounts over a contest's choices for one stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub contest: String,
    pub stratum: String,
    pub pseudocounts: BTreeMap<String, f64>,
    /// All candidate pseudocounts equal.
    pub neutral: bool,
}

impl Hyperparameters {
    /// Choices missing from `pseudocounts` get 0; unknown ids are rejected.
    pub fn new(
        contest: &Contest,
        stratum: &str,
        pseudocounts: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let full = VoteTally::from_counts(contest, pseudocounts.iter().map(|(k, &v)| (k.clone(), v)))?;
        let mut candidate_values = contest
            .choices
            .iter()
            .filter(|c| c.is_candidate())
            .map(|c| full.get(&c.id));
        let first = candidate_values.next();
        let neutral = candidate_values.all(|v| Some(v) == first);
        Ok(Self {
            contest: contest.id.clone(),
            stratum: stratum.to_owned(),
            pseudocounts: full.counts,
            neutral,
        })
    }

    pub fn get(&self, choice: &str) -> f64 {
        self.pseudocounts.get(choice).copied().unwrap_or(0.0)
    }

    /// Sum of the pseudocounts.
    pub fn initial_size(&self) -> f64 {
        self.pseudocounts.values().sum()
    }

    pub fn as_tally(&self) -> VoteTally {
        VoteTally {
            contest: self.contest.clone(),
            counts: self.pseudocounts.clone(),
        }
    }
}

pub fn make_prior(kind: &PriorKind, contest: &Contest, stratum: &str) -> Result<Hyperparameters> {
    let uniform = |v: f64| -> BTreeMap<String, f64> {
        contest.choices.iter().map(|c| (c.id.clone(), v)).collect()
    };
    match kind {
        PriorKind::Haldane => Hyperparameters::new(contest, stratum, &uniform(0.0)),
        PriorKind::Jeffreys => Hyperparameters::new(contest, stratum, &uniform(0.5)),
        PriorKind::Custom(counts) => {
            let prior = Hyperparameters::new(contest, stratum, counts)?;
            if !prior.neutral {
                return Err(AuditError::NonNeutralPrior(format!(
                    "contest {}: candidate pseudocounts differ",
                    contest.id
                )));
            }
            Ok(prior)
        }
    }
}

/// Adds a sample tally to the prior. Both must cover the same choices.
pub fn update_posterior(prior: &Hyperparameters, sample: &VoteTally) -> Result<Hyperparameters> {
    if prior.contest != sample.contest {
        return Err(AuditError::ChoiceMismatch(format!(
            "prior for contest {} but sample for {}",
            prior.contest, sample.contest
        )));
    }
    if !prior.pseudocounts.keys().eq(sample.counts.keys()) {
        return Err(AuditError::ChoiceMismatch(format!(
            "prior choices {:?} vs sample choices {:?}",
            prior.pseudocounts.keys().collect::<Vec<_>>(),
            sample.counts.keys().collect::<Vec<_>>()
        )));
    }
    let mut posterior = prior.clone();
    for (slot, v) in posterior.pseudocounts.values_mut().zip(sample.counts.values()) {
        *slot += v;
    }
    Ok(posterior)
}

/// Comparison-audit prior: one row of pseudocounts per reported choice,
/// over the actual choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPriorMatrix {
    pub contest: String,
    /// reported choice -> actual choice -> pseudocount
    pub rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ComparisonPriorMatrix {
    pub fn new(contest: &Contest, rows: BTreeMap<String, BTreeMap<String, f64>>) -> Result<Self> {
        let mut diagonal = None;
        for reported in contest.sorted_choice_ids() {
            let row = rows.get(reported).ok_or_else(|| {
                AuditError::ChoiceMismatch(format!("comparison prior has no row {reported:?}"))
            })?;
            VoteTally::from_counts(contest, row.iter().map(|(k, &v)| (k.clone(), v)))?;
            let d = row.get(reported).copied().unwrap_or(0.0);
            if *diagonal.get_or_insert(d) != d {
                return Err(AuditError::NonNeutralPrior(format!(
                    "contest {}: comparison prior diagonal entries differ",
                    contest.id
                )));
            }
        }
        if let Some(extra) = rows.keys().find(|k| !contest.has_choice(k)) {
            return Err(AuditError::UnknownChoice {
                contest: contest.id.clone(),
                choice: extra.clone(),
            });
        }
        Ok(Self {
            contest: contest.id.clone(),
            rows,
        })
    }

    pub fn uniform(contest: &Contest, diagonal: f64, off_diagonal: f64) -> Result<Self> {
        let ids = contest.sorted_choice_ids();
        let rows = ids
            .iter()
            .map(|&r| {
                let row = ids
                    .iter()
                    .map(|&a| (a.to_owned(), if a == r { diagonal } else { off_diagonal }))
                    .collect();
                (r.to_owned(), row)
            })
            .collect();
        Self::new(contest, rows)
    }

    pub fn row(&self, contest: &Contest, reported: &str, stratum: &str) -> Result<Hyperparameters> {
        let row = self.rows.get(reported).ok_or_else(|| AuditError::UnknownChoice {
            contest: contest.id.clone(),
            choice: reported.to_owned(),
        })?;
        Hyperparameters::new(contest, stratum, row)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum StratumKind {
    BallotPolling,
    /// Ballots whose CVR reports `reported`; the model is over actual votes.
    ComparisonRow { reported: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StratumModel {
    pub stratum: String,
    #[serde(flatten)]
    pub kind: StratumKind,
    pub posterior: Hyperparameters,
    pub nonsample_size: u64,
    pub fuzzer: FuzzerKind,
}

impl StratumModel {
    /// Rejects an all-zero posterior that still has ballots to generate.
    pub fn check_generative(&self) -> Result<()> {
        if self.nonsample_size > 0 && !(self.posterior.initial_size() > 0.0) {
            return Err(AuditError::DegeneratePosterior {
                stratum: self.stratum.clone(),
                nonsample: self.nonsample_size,
            });
        }
        Ok(())
    }
}

/// A stratum model together with the stratum's actual sample tally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub model: StratumModel,
    pub sample: VoteTally,
}

impl Stratum {
    pub fn sample_size(&self) -> u64 {
        self.sample.total().round() as u64
    }

    pub fn population(&self) -> u64 {
        self.sample_size() + self.model.nonsample_size
    }
}

/// Ballot-polling stratum: prior plus sample, with the rest unaudited.
pub fn ballot_polling_stratum(
    contest: &Contest,
    stratum: &str,
    prior: &PriorKind,
    sample: VoteTally,
    population: u64,
    fuzzer: FuzzerKind,
) -> Result<Stratum> {
    let prior = make_prior(prior, contest, stratum)?;
    let sample = VoteTally::from_counts(contest, sample.counts)?;
    let posterior = update_posterior(&prior, &sample)?;
    let sampled = sample.total().round() as u64;
    if sampled > population {
        return Err(AuditError::PopulationExhausted {
            requested: sampled,
            available: population,
        });
    }
    Ok(Stratum {
        model: StratumModel {
            stratum: stratum.to_owned(),
            kind: StratumKind::BallotPolling,
            posterior,
            nonsample_size: population - sampled,
            fuzzer,
        },
        sample,
    })
}

/// One comparison-row stratum per reported choice present in the CVRs.
/// Audited ballots outside `cvrs` are rejected.
pub fn comparison_strata_from_cvrs(
    contest: &Contest,
    stratum_prefix: &str,
    cvrs: &[CastVoteRecord],
    audited: &[AuditedBallot],
    prior: &ComparisonPriorMatrix,
    fuzzer: FuzzerKind,
) -> Result<Vec<Stratum>> {
    let reported_of = |cvr: &CastVoteRecord| -> Result<String> {
        let choice = cvr.votes.get(&contest.id).ok_or_else(|| AuditError::MissingVote {
            address: cvr.address.to_string(),
            contest: contest.id.clone(),
        })?;
        if !contest.has_choice(choice) {
            return Err(AuditError::UnknownChoice {
                contest: contest.id.clone(),
                choice: choice.clone(),
            });
        }
        Ok(choice.clone())
    };
    let mut reported_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut by_address = HashMap::with_capacity(cvrs.len());
    for cvr in cvrs {
        let reported = reported_of(cvr)?;
        *reported_counts.entry(reported.clone()).or_default() += 1;
        by_address.insert(&cvr.address, reported);
    }
    let mut samples: BTreeMap<String, VoteTally> = BTreeMap::new();
    for ballot in audited {
        let reported = by_address
            .get(&ballot.address)
            .ok_or_else(|| AuditError::MissingCvr(ballot.address.to_string()))?;
        let actual = ballot.actual.get(&contest.id).ok_or_else(|| AuditError::MissingVote {
            address: ballot.address.to_string(),
            contest: contest.id.clone(),
        })?;
        let row = samples
            .entry(reported.clone())
            .or_insert_with(|| VoteTally::zero(contest));
        match row.counts.get_mut(actual) {
            Some(c) => *c += 1.0,
            None => {
                return Err(AuditError::UnknownChoice {
                    contest: contest.id.clone(),
                    choice: actual.clone(),
                })
            }
        }
    }
    reported_counts
        .into_iter()
        .map(|(reported, count)| {
            let stratum = format!("{stratum_prefix}:{reported}");
            let sample = samples.remove(&reported).unwrap_or_else(|| VoteTally::zero(contest));
            let posterior = update_posterior(&prior.row(contest, &reported, &stratum)?, &sample)?;
            let sampled = sample.total() as u64;
            Ok(Stratum {
                model: StratumModel {
                    stratum,
                    kind: StratumKind::ComparisonRow { reported },
                    posterior,
                    nonsample_size: count - sampled,
                    fuzzer,
                },
                sample,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SimulationMode {
    /// Fuzz, normalize, draw the nonsample, add the sample.
    #[default]
    Full,
    /// Use the fuzzed posterior itself as the test vote tally. Only sound
    /// when the sample is a small fraction of the stratum.
    SmallSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RiskConfig {
    pub trials: u64,
    #[serde(default)]
    pub mode: SimulationMode,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            mode: SimulationMode::Full,
            execution: Execution::Parallel,
        }
    }
}

impl RiskConfig {
    pub fn with_trials(trials: u64) -> Self {
        Self {
            trials,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RiskEstimate {
    pub contest: String,
    pub trials: u64,
    pub upset_count: u64,
    pub risk: f64,
    /// Outcome (winners joined by commas) to number of trials it won.
    pub win_counts: BTreeMap<String, u64>,
    pub win_frequencies: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StopDecision {
    Stop,
    Escalate,
}

impl fmt::Display for StopDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopDecision::Stop => "stop",
            StopDecision::Escalate => "escalate",
        })
    }
}

/// Stop exactly when the measured risk is below the limit.
pub fn stopping_decision(estimate: &RiskEstimate, risk_limit: f64) -> StopDecision {
    if estimate.risk < risk_limit {
        StopDecision::Stop
    } else {
        StopDecision::Escalate
    }
}

/// Dense, contest-ordered view of one stratum.
struct Prepared {
    posterior: Vec<f64>,
    sample: Vec<f64>,
    nonsample: u64,
    population: f64,
    fuzzer: FuzzerKind,
}

struct Scratch {
    fuzzed: Vec<f64>,
    drawn: Vec<f64>,
    total: Vec<f64>,
}

type OutcomeCounts = HashMap<Vec<usize>, u64>;

fn merge_counts(mut a: OutcomeCounts, b: OutcomeCounts) -> OutcomeCounts {
    for (k, v) in b {
        *a.entry(k).or_default() += v;
    }
    a
}

/// Fuzzes into `out` and normalizes, redrawing an all-zero result.
fn fuzz_normalized<R: rand::Rng>(
    stratum: &Prepared,
    id: &str,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    for _ in 0..MAX_FUZZ_ATTEMPTS {
        fuzz_dense(&stratum.posterior, stratum.fuzzer, rng, out)?;
        if normalize_in_place(out).is_ok() {
            return Ok(());
        }
    }
    Err(AuditError::DegeneratePosterior {
        stratum: id.to_owned(),
        nonsample: stratum.nonsample,
    })
}

/// Estimates the probability that the reported outcome is wrong, by summing
/// one simulated completion of every stratum per trial and applying the
/// contest's outcome rule.
pub fn measure_risk(
    strata: &[Stratum],
    contest: &Contest,
    evaluator: &OutcomeEvaluator,
    config: &RiskConfig,
    streams: &TrialStreams,
) -> Result<RiskEstimate> {
    if strata.is_empty() {
        return Err(AuditError::NoStrata);
    }
    if config.trials == 0 {
        return Err(AuditError::NoTrials);
    }
    if evaluator.contest() != contest.id {
        return Err(AuditError::ChoiceMismatch(format!(
            "evaluator for {} used on contest {}",
            evaluator.contest(),
            contest.id
        )));
    }
    let mut prepared = Vec::with_capacity(strata.len());
    for s in strata {
        if s.sample.contest != contest.id || s.model.posterior.contest != contest.id {
            return Err(AuditError::ChoiceMismatch(format!(
                "stratum {} does not belong to contest {}",
                s.model.stratum, contest.id
            )));
        }
        s.model.check_generative()?;
        prepared.push(Prepared {
            posterior: s.model.posterior.as_tally().to_dense(contest)?,
            sample: s.sample.to_dense(contest)?,
            nonsample: s.model.nonsample_size,
            population: s.population() as f64,
            fuzzer: s.model.fuzzer,
        });
    }
    let width = contest.choices.len();
    let scale_small_sample = strata.len() > 1;

    let step = |scratch: &mut Scratch, counts: &mut OutcomeCounts, trial: u64| -> Result<()> {
        let mut rng = streams.trial(trial);
        scratch.total.fill(0.0);
        for (p, s) in prepared.iter().zip(strata) {
            if p.nonsample == 0 {
                add_into(&mut scratch.total, &p.sample);
                continue;
            }
            fuzz_normalized(p, &s.model.stratum, &mut rng, &mut scratch.fuzzed)?;
            match config.mode {
                SimulationMode::Full => {
                    multinomial_into(&scratch.fuzzed, p.nonsample, &mut rng, &mut scratch.drawn);
                    add_into(&mut scratch.total, &p.sample);
                    add_into(&mut scratch.total, &scratch.drawn);
                }
                SimulationMode::SmallSample => {
                    // Rules are scale invariant, so one stratum needs no scaling.
                    let scale = if scale_small_sample { p.population } else { 1.0 };
                    for (t, f) in scratch.total.iter_mut().zip(&scratch.fuzzed) {
                        *t += f * scale;
                    }
                }
            }
        }
        let outcome = evaluator.evaluate(&scratch.total)?;
        *counts.entry(outcome).or_default() += 1;
        Ok(())
    };

    let counts = fold_indexed(
        config.execution,
        config.trials,
        || Scratch {
            fuzzed: vec![0.0; width],
            drawn: vec![0.0; width],
            total: vec![0.0; width],
        },
        OutcomeCounts::new,
        step,
        merge_counts,
    )?;
    Ok(estimate_from_counts(evaluator, config.trials, counts))
}

fn add_into(total: &mut [f64], values: &[f64]) {
    for (t, v) in total.iter_mut().zip(values) {
        *t += v;
    }
}

fn estimate_from_counts(
    evaluator: &OutcomeEvaluator,
    trials: u64,
    counts: OutcomeCounts,
) -> RiskEstimate {
    let mut upset_count = 0;
    let mut win_counts = BTreeMap::new();
    for (outcome, n) in counts {
        if !evaluator.is_reported(&outcome) {
            upset_count += n;
        }
        win_counts.insert(evaluator.outcome(&outcome).to_string(), n);
    }
    let risk = upset_count as f64 / trials as f64;
    let reported = evaluator.reported().to_string();
    let win_frequencies = win_counts
        .iter()
        .map(|(k, &n)| {
            // Written so that risk + reported frequency is exactly 1.
            let f = if *k == reported { 1.0 - risk } else { n as f64 / trials as f64 };
            (k.clone(), f)
        })
        .collect();
    RiskEstimate {
        contest: evaluator.contest().to_owned(),
        trials,
        upset_count,
        risk,
        win_counts,
        win_frequencies,
    }
}

/// Single-stratum risk computed the plain way, through map-level tallies and
/// the public fuzzing functions, one trial at a time. Kept as a reference
/// for the dense engine, which must agree with it exactly.
pub fn measure_risk_reference(
    stratum: &Stratum,
    contest: &Contest,
    evaluator: &OutcomeEvaluator,
    trials: u64,
    streams: &TrialStreams,
) -> Result<RiskEstimate> {
    if trials == 0 {
        return Err(AuditError::NoTrials);
    }
    let mut counts = OutcomeCounts::new();
    for trial in 0..trials {
        let mut rng = streams.trial(trial);
        let nonsample = crate::fuzz::generate_test_nonsample_tally(&stratum.model, &mut rng)?;
        let test_tally = stratum.sample.add(&nonsample);
        let outcome = evaluator.evaluate(&test_tally.to_dense(contest)?)?;
        *counts.entry(outcome).or_default() += 1;
    }
    Ok(estimate_from_counts(evaluator, trials, counts))
}

/// A reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
}

impl Fraction {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        let (mut a, mut b) = (numerator, denominator);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        let g = a.max(1);
        Self {
            numerator: numerator / g,
            denominator: denominator / g,
        }
    }

    pub fn value(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

/// Three cans, each holding a nut or not; all arrangements with one or two
/// nuts are equally likely. Returns the posterior probability that most
/// cans hold nuts, given what the first can showed (`None`: not opened).
pub fn nuts_in_cans(first_can_has_nut: Option<bool>) -> Fraction {
    let mut consistent = 0;
    let mut majority = 0;
    for mask in 0u8..8 {
        let nuts = mask.count_ones();
        if !(1..=2).contains(&nuts) {
            continue;
        }
        if let Some(seen) = first_can_has_nut {
            if (mask & 1 == 1) != seen {
                continue;
            }
        }
        consistent += 1;
        if nuts >= 2 {
            majority += 1;
        }
    }
    Fraction::new(majority, consistent)
}
