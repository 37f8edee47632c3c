use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AuditConfig, Escalation};
use crate::bayes::{
    ballot_polling_stratum, comparison_strata_from_cvrs, measure_risk, stopping_decision,
    ComparisonPriorMatrix, PriorKind, RiskConfig, RiskEstimate, StopDecision,
};
use crate::election::{
    AuditedBallot, BallotAddress, Contest, Interpretation, Outcome, VoteTally,
};
use crate::error::{AuditError, Result};
use crate::parallel::Execution;
use crate::planner::{
    plan_allocation, project_workload, proportional_split, AllocationPlan, ContestSnapshot,
    PlannerConfig, PlanningStratum,
};
use crate::prng::{global_ballot_order, HashValue, OrderedBallot, TrialStreams};
use crate::rules::{OutcomeEvaluator, RuleRegistry};

pub const STATE_FORMAT: &str = "bayes-audit-state/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ContestStatus {
    Auditing,
    Accepted,
    FullHandCountComplete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Decision {
    Stop,
    Escalate,
    /// Every ballot was examined; the hand count is the outcome.
    Complete,
}

/// One ballot on a round's pull list. Carries no reported choices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectedBallot {
    pub address: BallotAddress,
    /// 1-based position in its collection's sampling order.
    pub rank: u64,
    /// Hex of the ballot's sampling key.
    pub key: String,
    pub contests: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContestRoundResult {
    pub decision: Decision,
    pub risk_limit: f64,
    pub sample_size: u64,
    pub population: u64,
    pub estimate: RiskEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_count_outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_outcome_confirmed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_sample_size: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Round {
    pub number: u32,
    /// Per collection: how many ballots of its sampling order are selected
    /// once this round's pull list is included.
    pub cursors: BTreeMap<String, u64>,
    pub selections: Vec<SelectedBallot>,
    /// Set when the round closes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretations_hash: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub results: BTreeMap<String, ContestRoundResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<AllocationPlan>,
}

impl Round {
    pub fn is_closed(&self) -> bool {
        self.interpretations_hash.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoundReport {
    pub round: u32,
    pub results: BTreeMap<String, ContestRoundResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_round: Option<u32>,
    pub new_selections: usize,
}

impl RoundReport {
    pub fn any_escalating(&self) -> bool {
        self.next_round.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContestView {
    pub status: ContestStatus,
    pub reported_outcome: Outcome,
    pub risk_limit: f64,
    pub sample_size: u64,
    pub population: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_frequencies: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_count_outcome: Option<Outcome>,
    /// Risk after each closed round, oldest first.
    pub risk_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatusReport {
    pub round: u32,
    pub round_open: bool,
    pub pending_selections: usize,
    pub finished: bool,
    pub contests: BTreeMap<String, ContestView>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OpenSelection {
    #[serde(flatten)]
    pub ballot: SelectedBallot,
    pub recorded: bool,
}

/// Options for an on-demand plan.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct PlanRequest {
    pub planner: PlannerConfig,
    /// Overrides every contest's risk limit.
    pub risk_limit: Option<f64>,
    /// Total sample sizes at which to attach workload projections.
    pub grid: Vec<u64>,
}

/// Full audit state; also the public audit record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditState {
    pub format: String,
    pub config_hash: String,
    pub config: AuditConfig,
    pub statuses: BTreeMap<String, ContestStatus>,
    pub rounds: Vec<Round>,
    /// Every recorded interpretation, in recording order.
    pub audited: Vec<AuditedBallot>,
}

/// Collections' sampling orders (key order restricted to each collection).
fn collection_orders(config: &AuditConfig) -> Result<BTreeMap<String, Vec<OrderedBallot>>> {
    let sampled = config
        .collections
        .iter()
        .filter(|c| c.hand_count.is_none())
        .map(|c| c.manifest());
    let mut out: BTreeMap<String, Vec<OrderedBallot>> = BTreeMap::new();
    for ballot in global_ballot_order(sampled, &config.seed)? {
        out.entry(ballot.address.collection.clone()).or_default().push(ballot);
    }
    Ok(out)
}

fn hash_json<T: Serialize>(value: &T) -> String {
    HashValue::of(&serde_json::to_vec(value).expect("serializable")).to_hex()
}

/// Hash of a round's interpretations, independent of recording order.
fn interpretations_hash(ballots: &[&AuditedBallot]) -> String {
    let mut sorted: Vec<&&AuditedBallot> = ballots.iter().collect();
    sorted.sort_by_key(|b| b.address.to_string());
    hash_json(&sorted)
}

impl AuditState {
    /// Validates the config and draws the first round.
    pub fn start(config: AuditConfig) -> Result<Self> {
        config.validate()?;
        let mut state = AuditState {
            format: STATE_FORMAT.to_owned(),
            config_hash: config.hash(),
            statuses: config
                .contests
                .iter()
                .map(|c| (c.id.clone(), ContestStatus::Auditing))
                .collect(),
            config,
            rounds: Vec::new(),
            audited: Vec::new(),
        };
        let mut targets = BTreeMap::new();
        for contest in &state.config.contests {
            let sampled = state.sampled_population(contest);
            let prior = crate::bayes::make_prior(&state.config.prior, contest, "initial")?;
            let rule = contest.initial_sample_size.unwrap_or_else(|| {
                (10 * contest.candidate_ids().len() as u64).max(prior.initial_size().ceil() as u64)
            });
            targets.insert(contest.id.clone(), rule.min(sampled));
        }
        let cursors = state.cursors_for_targets(&targets, &BTreeMap::new());
        state.open_round(cursors, None)?;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: AuditState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(state)
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.export())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// The public audit record: the whole state as pretty JSON.
    pub fn export(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("state serializes");
        s.push('\n');
        s
    }

    fn contest(&self, id: &str) -> &Contest {
        self.config.contest(id).expect("status keys come from the config")
    }

    fn is_hand_counted(&self, collection: &str) -> bool {
        self.config
            .collection(collection)
            .is_some_and(|c| c.hand_count.is_some())
    }

    /// Sampled (not hand-counted) collections of a contest with their sizes.
    fn sampled_collections(&self, contest: &Contest) -> Vec<(String, u64)> {
        contest
            .universe
            .iter()
            .filter(|s| !self.is_hand_counted(&s.collection))
            .map(|s| (s.collection.clone(), s.ballots))
            .collect()
    }

    fn sampled_population(&self, contest: &Contest) -> u64 {
        self.sampled_collections(contest).iter().map(|(_, n)| n).sum()
    }

    fn current_cursors(&self) -> BTreeMap<String, u64> {
        self.rounds.last().map(|r| r.cursors.clone()).unwrap_or_default()
    }

    fn sample_in(&self, contest: &Contest, cursors: &BTreeMap<String, u64>) -> u64 {
        self.sampled_collections(contest)
            .iter()
            .map(|(c, _)| cursors.get(c).copied().unwrap_or(0))
            .sum()
    }

    /// Cursor positions that give each contest at least its target, spread
    /// over its collections in proportion to their size. Every collection
    /// of a contest gets at least one ballot when the target allows, so no
    /// stratum is left without data. Cursors never move backwards.
    fn cursors_for_targets(
        &self,
        targets: &BTreeMap<String, u64>,
        current: &BTreeMap<String, u64>,
    ) -> BTreeMap<String, u64> {
        let mut cursors = current.clone();
        for (id, &target) in targets {
            let collections = self.sampled_collections(self.contest(id));
            let sizes: Vec<u64> = collections.iter().map(|(_, n)| *n).collect();
            let k = sizes.iter().filter(|&&n| n > 0).count() as u64;
            let shares: Vec<u64> = if target >= k {
                let base: Vec<u64> = sizes.iter().map(|&n| n.saturating_sub(1)).collect();
                proportional_split(target - k, &base)
                    .into_iter()
                    .zip(&sizes)
                    .map(|(s, &n)| s + u64::from(n > 0))
                    .collect()
            } else {
                proportional_split(target, &sizes)
            };
            for ((c, _), share) in collections.iter().zip(shares) {
                let slot = cursors.entry(c.clone()).or_default();
                *slot = (*slot).max(share);
            }
        }
        cursors
    }

    fn open_round(
        &mut self,
        cursors: BTreeMap<String, u64>,
        plan: Option<AllocationPlan>,
    ) -> Result<usize> {
        let orders = collection_orders(&self.config)?;
        let previous = self.current_cursors();
        let mut selections = Vec::new();
        for (collection, &to) in &cursors {
            let from = previous.get(collection).copied().unwrap_or(0);
            let order = &orders[collection];
            let contests: Vec<String> = self
                .config
                .contests
                .iter()
                .filter(|c| c.covers(collection))
                .map(|c| c.id.clone())
                .collect();
            for (i, ballot) in order.iter().enumerate().take(to as usize).skip(from as usize) {
                selections.push((
                    ballot.key,
                    SelectedBallot {
                        address: ballot.address.clone(),
                        rank: i as u64 + 1,
                        key: ballot.key.to_hex(),
                        contests: contests.clone(),
                    },
                ));
            }
        }
        selections.sort_by(|a, b| a.0 .0.cmp(&b.0 .0));
        let count = selections.len();
        self.rounds.push(Round {
            number: self.rounds.len() as u32 + 1,
            cursors,
            selections: selections.into_iter().map(|(_, s)| s).collect(),
            interpretations_hash: None,
            results: BTreeMap::new(),
            plan,
        });
        Ok(count)
    }

    fn open_round_mut(&mut self) -> Result<&mut Round> {
        match self.rounds.last_mut() {
            Some(r) if !r.is_closed() => Ok(r),
            _ => Err(AuditError::NoOpenRound),
        }
    }

    fn open_round_ref(&self) -> Option<&Round> {
        self.rounds.last().filter(|r| !r.is_closed())
    }

    pub fn open_selections(&self) -> Vec<OpenSelection> {
        let Some(round) = self.open_round_ref() else {
            return Vec::new();
        };
        let recorded: HashSet<&BallotAddress> = self
            .audited
            .iter()
            .filter(|b| b.round == round.number)
            .map(|b| &b.address)
            .collect();
        round
            .selections
            .iter()
            .map(|s| OpenSelection {
                recorded: recorded.contains(&s.address),
                ballot: s.clone(),
            })
            .collect()
    }

    /// Records hand interpretations for ballots on the open pull list. The
    /// whole batch is checked before anything is stored.
    pub fn record_interpretations(&mut self, entries: &[Interpretation]) -> Result<usize> {
        let round = self.open_round_ref().ok_or(AuditError::NoOpenRound)?;
        let number = round.number;
        let selected: HashMap<&BallotAddress, &SelectedBallot> =
            round.selections.iter().map(|s| (&s.address, s)).collect();
        let mut seen: HashSet<&BallotAddress> = self
            .audited
            .iter()
            .filter(|b| b.round == number)
            .map(|b| &b.address)
            .collect();
        let mut cvr_maps: HashMap<&str, HashMap<&BallotAddress, &BTreeMap<String, String>>> =
            HashMap::new();
        let mut new = Vec::with_capacity(entries.len());
        for entry in entries {
            let address = entry.address.to_string();
            let sel = selected
                .get(&entry.address)
                .ok_or_else(|| AuditError::NotSelected(address.clone()))?;
            if !seen.insert(&entry.address) {
                return Err(AuditError::AlreadyRecorded(address));
            }
            for contest_id in &sel.contests {
                let contest = self.contest(contest_id);
                let vote = entry.votes.get(contest_id).ok_or_else(|| AuditError::MissingVote {
                    address: address.clone(),
                    contest: contest_id.clone(),
                })?;
                if !contest.has_choice(vote) {
                    return Err(AuditError::UnknownChoice {
                        contest: contest_id.clone(),
                        choice: vote.clone(),
                    });
                }
            }
            if let Some(extra) = entry.votes.keys().find(|k| !sel.contests.contains(k)) {
                return Err(AuditError::InvalidContest {
                    contest: extra.clone(),
                    reason: format!("not carried by ballot {address}"),
                });
            }
            let collection = entry.address.collection.as_str();
            let reported = match self.config.collection(collection).and_then(|c| c.cvrs()) {
                None => None,
                Some(file) => {
                    let map = cvr_maps.entry(collection).or_insert_with(|| {
                        file.records.iter().map(|r| (&r.address, &r.votes)).collect()
                    });
                    let votes = map
                        .get(&entry.address)
                        .ok_or_else(|| AuditError::MissingCvr(address.clone()))?;
                    Some(
                        votes
                            .iter()
                            .filter(|(k, _)| sel.contests.contains(k))
                            .map(|(k, v)| (k.clone(), v.clone()))
                            .collect(),
                    )
                }
            };
            new.push(AuditedBallot {
                address: entry.address.clone(),
                round: number,
                actual: entry.votes.clone(),
                reported,
            });
        }
        let n = new.len();
        self.audited.extend(new);
        Ok(n)
    }

    /// A contest's strata from everything recorded so far.
    fn strata(&self, contest: &Contest) -> Result<Vec<PlanningStratum>> {
        let cfg = &self.config;
        let mut out = Vec::new();
        for share in &contest.universe {
            let coll = cfg
                .collection(&share.collection)
                .expect("validated universe");
            let id = share.collection.as_str();
            if let Some(hand) = &coll.hand_count {
                let tally = VoteTally::from_counts(
                    contest,
                    hand[&contest.id].iter().map(|(k, &v)| (k.clone(), v)),
                )?;
                let stratum = ballot_polling_stratum(
                    contest,
                    id,
                    &PriorKind::Haldane,
                    tally,
                    share.ballots,
                    cfg.fuzzer,
                )?;
                out.push(PlanningStratum {
                    collection: id.to_owned(),
                    stratum,
                });
                continue;
            }
            let audited: Vec<AuditedBallot> = self
                .audited
                .iter()
                .filter(|b| b.address.collection == id)
                .cloned()
                .collect();
            if let Some(cvrs) = coll.cvrs() {
                let prior = ComparisonPriorMatrix::uniform(
                    contest,
                    cfg.comparison_prior.diagonal,
                    cfg.comparison_prior.off_diagonal,
                )?;
                for stratum in
                    comparison_strata_from_cvrs(contest, id, &cvrs.records, &audited, &prior, cfg.fuzzer)?
                {
                    out.push(PlanningStratum {
                        collection: id.to_owned(),
                        stratum,
                    });
                }
            } else {
                let mut tally = VoteTally::zero(contest);
                for b in &audited {
                    let vote = &b.actual[&contest.id];
                    *tally.counts.get_mut(vote).expect("validated on record") += 1.0;
                }
                let stratum =
                    ballot_polling_stratum(contest, id, &cfg.prior, tally, share.ballots, cfg.fuzzer)?;
                out.push(PlanningStratum {
                    collection: id.to_owned(),
                    stratum,
                });
            }
        }
        Ok(out)
    }

    fn snapshot(&self, contest: &Contest, risk_limit: Option<f64>) -> Result<ContestSnapshot> {
        Ok(ContestSnapshot {
            contest: contest.clone(),
            risk_limit: risk_limit.unwrap_or_else(|| self.config.risk_limit_for(contest)),
            strata: self.strata(contest)?,
            simulation: self.config.simulation_mode,
        })
    }

    /// Measures risk for every contest still under audit, updates statuses
    /// and opens the next round for contests that escalate.
    pub fn close_round(&mut self) -> Result<RoundReport> {
        self.close_round_with(Execution::Parallel)
    }

    pub fn close_round_with(&mut self, execution: Execution) -> Result<RoundReport> {
        let round = self.open_round_ref().ok_or(AuditError::NoOpenRound)?;
        let number = round.number;
        let mine: Vec<&AuditedBallot> =
            self.audited.iter().filter(|b| b.round == number).collect();
        let recorded: HashSet<&BallotAddress> = mine.iter().map(|b| &b.address).collect();
        let missing: Vec<String> = round
            .selections
            .iter()
            .filter(|s| !recorded.contains(&s.address))
            .map(|s| s.address.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(AuditError::RoundIncomplete(missing));
        }
        let hash = interpretations_hash(&mine);

        let registry = RuleRegistry::default();
        let risk_config = RiskConfig {
            trials: self.config.num_trials,
            mode: self.config.simulation_mode,
            execution,
        };
        let mut results = BTreeMap::new();
        let mut statuses = self.statuses.clone();
        for contest in &self.config.contests {
            if statuses[&contest.id] != ContestStatus::Auditing {
                continue;
            }
            let strata: Vec<_> = self.strata(contest)?.into_iter().map(|p| p.stratum).collect();
            let evaluator = OutcomeEvaluator::new(contest, &registry)?;
            let streams =
                TrialStreams::from_seed(&self.config.seed, &format!("risk,{},{number}", contest.id));
            let estimate = measure_risk(&strata, contest, &evaluator, &risk_config, &streams)?;
            let risk_limit = self.config.risk_limit_for(contest);
            let sample_size: u64 = strata.iter().map(|s| s.sample_size()).sum();
            let population = contest.population();
            let mut result = ContestRoundResult {
                decision: Decision::Escalate,
                risk_limit,
                sample_size,
                population,
                hand_count_outcome: None,
                reported_outcome_confirmed: None,
                next_sample_size: None,
                estimate,
            };
            if strata.iter().all(|s| s.model.nonsample_size == 0) {
                let total = strata
                    .iter()
                    .fold(VoteTally::zero(contest), |acc, s| acc.add(&s.sample));
                let outcome = evaluator.evaluate_tally(contest, &total)?;
                result.decision = Decision::Complete;
                result.reported_outcome_confirmed = Some(&outcome == evaluator.reported());
                result.hand_count_outcome = Some(outcome);
                statuses.insert(contest.id.clone(), ContestStatus::FullHandCountComplete);
            } else if stopping_decision(&result.estimate, risk_limit) == StopDecision::Stop {
                result.decision = Decision::Stop;
                statuses.insert(contest.id.clone(), ContestStatus::Accepted);
            }
            results.insert(contest.id.clone(), result);
        }

        let escalating: Vec<String> = results
            .iter()
            .filter(|(_, r)| r.decision == Decision::Escalate)
            .map(|(id, _)| id.clone())
            .collect();
        let current = self.current_cursors();
        let (targets, plan) = self.next_targets(&escalating, &current, number)?;
        for (id, &t) in &targets {
            results.get_mut(id).expect("escalating").next_sample_size = Some(t);
        }

        let round = self.open_round_mut()?;
        round.interpretations_hash = Some(hash);
        round.results = results.clone();
        self.statuses = statuses;
        let (next_round, new_selections) = if escalating.is_empty() {
            (None, 0)
        } else {
            let mut cursors = self.cursors_for_targets(&targets, &current);
            if let Some(plan) = &plan {
                for (c, add) in &plan.allocations {
                    let slot = cursors.entry(c.clone()).or_default();
                    *slot = (*slot).max(current.get(c).copied().unwrap_or(0) + add);
                }
            }
            let n = self.open_round(cursors, plan)?;
            (Some(number + 1), n)
        };
        Ok(RoundReport {
            round: number,
            results,
            next_round,
            new_selections,
        })
    }

    /// Next sampled-ballot target per escalating contest.
    fn next_targets(
        &self,
        escalating: &[String],
        cursors: &BTreeMap<String, u64>,
        round: u32,
    ) -> Result<(BTreeMap<String, u64>, Option<AllocationPlan>)> {
        let grow = |current: u64, fraction: f64| -> u64 {
            ((current as f64 * (1.0 + fraction)).ceil() as u64).max(current + 1)
        };
        let mut plan = None;
        let mut proposed: BTreeMap<String, u64> = BTreeMap::new();
        match self.config.escalation {
            Escalation::Percent(p) => {
                for id in escalating {
                    let current = self.sample_in(self.contest(id), cursors);
                    proposed.insert(id.clone(), grow(current, p));
                }
            }
            Escalation::Planner(planner) => {
                let snapshots = escalating
                    .iter()
                    .map(|id| self.snapshot(self.contest(id), None))
                    .collect::<Result<Vec<_>>>()?;
                let remaining = self.remaining_by_collection(cursors);
                let streams = TrialStreams::from_seed(&self.config.seed, &format!("plan,{round}"));
                let p = plan_allocation(&snapshots, &remaining, &planner, &streams)?;
                for id in escalating {
                    let contest = self.contest(id);
                    let current = self.sample_in(contest, cursors);
                    let planned: u64 = self
                        .sampled_collections(contest)
                        .iter()
                        .map(|(c, _)| p.allocations.get(c).copied().unwrap_or(0))
                        .sum();
                    let target = if planned == 0 {
                        grow(current, Escalation::default_percent())
                    } else {
                        current + planned
                    };
                    proposed.insert(id.clone(), target);
                }
                plan = Some(p);
            }
        }
        let mut targets = BTreeMap::new();
        for (id, target) in proposed {
            let population = self.sampled_population(self.contest(&id));
            let threshold = self.config.full_count_threshold * population as f64;
            let t = if target as f64 > threshold { population } else { target.min(population) };
            targets.insert(id, t);
        }
        if let Some(p) = &mut plan {
            // Contests switched to a full count take their whole collections.
            for (id, &t) in &targets {
                let contest = self.contest(id);
                if t == self.sampled_population(contest) {
                    for (c, n) in self.sampled_collections(contest) {
                        let already = cursors.get(&c).copied().unwrap_or(0);
                        p.allocations.insert(c, n - already);
                    }
                }
            }
            p.total_additional = p.allocations.values().sum();
        }
        Ok((targets, plan))
    }

    fn remaining_by_collection(&self, cursors: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
        self.config
            .collections
            .iter()
            .map(|c| {
                let id = c.id().to_owned();
                let left = if c.hand_count.is_some() {
                    0
                } else {
                    c.manifest().total() - cursors.get(&id).copied().unwrap_or(0)
                };
                (id, left)
            })
            .collect()
    }

    /// Plans additional sampling for contests still under audit, from the
    /// interpretations recorded so far.
    pub fn plan(&self, request: &PlanRequest) -> Result<AllocationPlan> {
        if !self.rounds.iter().any(Round::is_closed) {
            return Err(AuditError::Planning(
                "no round has closed yet, so there is no posterior to plan from".to_owned(),
            ));
        }
        let active: Vec<&Contest> = self
            .config
            .contests
            .iter()
            .filter(|c| self.statuses[&c.id] == ContestStatus::Auditing)
            .collect();
        let snapshots = active
            .iter()
            .map(|c| self.snapshot(c, request.risk_limit))
            .collect::<Result<Vec<_>>>()?;
        let mut audited: BTreeMap<String, u64> = BTreeMap::new();
        for b in &self.audited {
            *audited.entry(b.address.collection.clone()).or_default() += 1;
        }
        let remaining = self.remaining_by_collection(&audited);
        let streams = TrialStreams::from_seed(
            &self.config.seed,
            &format!("plan-request,{}", self.rounds.len()),
        );
        let mut plan = plan_allocation(&snapshots, &remaining, &request.planner, &streams)?;
        for s in &snapshots {
            let lo = s.current_sample_size();
            let hi = s.population();
            let grid: Vec<u64> = request
                .grid
                .iter()
                .copied()
                .filter(|&g| g >= lo && g <= hi)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if !grid.is_empty() {
                plan.projections
                    .push(project_workload(s, &grid, &request.planner, &streams)?);
            }
        }
        Ok(plan)
    }

    pub fn status(&self) -> StatusReport {
        let mut contests = BTreeMap::new();
        let mut audited: BTreeMap<&str, u64> = BTreeMap::new();
        for b in &self.audited {
            *audited.entry(b.address.collection.as_str()).or_default() += 1;
        }
        for contest in &self.config.contests {
            let latest = self
                .rounds
                .iter()
                .rev()
                .find_map(|r| r.results.get(&contest.id));
            let sample_size = contest
                .universe
                .iter()
                .map(|s| {
                    if self.is_hand_counted(&s.collection) {
                        s.ballots
                    } else {
                        audited.get(s.collection.as_str()).copied().unwrap_or(0)
                    }
                })
                .sum();
            contests.insert(
                contest.id.clone(),
                ContestView {
                    status: self.statuses[&contest.id],
                    reported_outcome: contest.reported_outcome.clone(),
                    risk_limit: self.config.risk_limit_for(contest),
                    sample_size,
                    population: contest.population(),
                    risk: latest.map(|r| r.estimate.risk),
                    decision: latest.map(|r| r.decision),
                    win_frequencies: latest.map(|r| r.estimate.win_frequencies.clone()),
                    hand_count_outcome: latest.and_then(|r| r.hand_count_outcome.clone()),
                    risk_history: self
                        .rounds
                        .iter()
                        .filter_map(|r| r.results.get(&contest.id))
                        .map(|r| r.estimate.risk)
                        .collect(),
                },
            );
        }
        let open = self.open_round_ref();
        StatusReport {
            round: self.rounds.last().map_or(0, |r| r.number),
            round_open: open.is_some(),
            pending_selections: self.open_selections().iter().filter(|s| !s.recorded).count(),
            finished: self.is_finished(),
            contests,
        }
    }

    /// No contest is still under audit.
    pub fn is_finished(&self) -> bool {
        self.statuses.values().all(|s| *s != ContestStatus::Auditing)
    }
}

impl Escalation {
    fn default_percent() -> f64 {
        match Escalation::default() {
            Escalation::Percent(p) => p,
            Escalation::Planner(_) => unreachable!(),
        }
    }
}

/// Result of re-running an exported record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplayReport {
    pub rounds_checked: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-runs a record from its config and seed: every selection, every
/// interpretations hash and every risk estimate must come out identical.
pub fn replay(record: &AuditState) -> Result<ReplayReport> {
    replay_with(record, Execution::Parallel)
}

pub fn replay_with(record: &AuditState, execution: Execution) -> Result<ReplayReport> {
    let mut mismatches = Vec::new();
    if record.config.hash() != record.config_hash {
        mismatches.push("config hash does not match the recorded config".to_owned());
    }
    let mut fresh = AuditState::start(record.config.clone())?;
    let mut checked = 0;
    for (i, round) in record.rounds.iter().enumerate() {
        let n = round.number;
        let Some(mine) = fresh.rounds.get(i) else {
            mismatches.push(format!("round {n}: not reproduced"));
            break;
        };
        checked += 1;
        if serde_json::to_string(&mine.selections)? != serde_json::to_string(&round.selections)? {
            mismatches.push(format!("round {n}: selections differ"));
        }
        if !round.is_closed() {
            break;
        }
        let entries: Vec<&AuditedBallot> = record.audited.iter().filter(|b| b.round == n).collect();
        if round.interpretations_hash.as_deref() != Some(interpretations_hash(&entries).as_str()) {
            mismatches.push(format!("round {n}: interpretations hash mismatch"));
        }
        let interpretations: Vec<Interpretation> = entries
            .iter()
            .map(|b| Interpretation {
                address: b.address.clone(),
                votes: b.actual.clone(),
            })
            .collect();
        if let Err(e) = fresh.record_interpretations(&interpretations) {
            mismatches.push(format!("round {n}: interpretations rejected: {e}"));
            break;
        }
        let report = match fresh.close_round_with(execution) {
            Ok(r) => r,
            Err(e) => {
                mismatches.push(format!("round {n}: close failed: {e}"));
                break;
            }
        };
        for (id, result) in &round.results {
            let again = report.results.get(id).map(serde_json::to_string).transpose()?;
            if again.as_deref() != Some(serde_json::to_string(result)?.as_str()) {
                mismatches.push(format!("round {n}: contest {id} result differs"));
            }
        }
        if report.results.len() != round.results.len() {
            mismatches.push(format!("round {n}: different set of contests measured"));
        }
    }
    if checked == record.rounds.len() && fresh.rounds.len() != record.rounds.len() {
        mismatches.push(format!(
            "replay produced {} rounds, record has {}",
            fresh.rounds.len(),
            record.rounds.len()
        ));
    }
    if mismatches.is_empty() && fresh.statuses != record.statuses {
        mismatches.push("final contest statuses differ".to_owned());
    }
    Ok(ReplayReport {
        rounds_checked: checked,
        mismatches,
    })
}
