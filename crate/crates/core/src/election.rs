//! Contests, choices, tallies, ballot manifests and cast vote records.
//!
//! Everything here is an immutable value type. Choice ids are opaque strings;
//! a preferential choice is its candidate ids joined by `>` in preference
//! order (`"Jones>Smith>Berman"`). The ids `invalid`, `undervote` and
//! `overvote` are reserved for non-candidate choices.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Non-candidate choice ids recognised without an explicit `kind`.
pub const RESERVED_NON_CANDIDATES: [&str; 3] = ["invalid", "undervote", "overvote"];

/// Separator between candidates in a preferential choice id.
pub const PREFERENCE_SEPARATOR: char = '>';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ChoiceKind {
    Candidate,
    NonCandidate,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "ChoiceRepr", into = "ChoiceRepr")]
pub struct Choice {
    pub id: String,
    pub kind: ChoiceKind,
}

impl Choice {
    /// Infers the kind from the id: reserved ids are non-candidates.
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        let kind = if RESERVED_NON_CANDIDATES.contains(&id.as_str()) {
            ChoiceKind::NonCandidate
        } else {
            ChoiceKind::Candidate
        };
        Self { id, kind }
    }

    pub fn non_candidate(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: ChoiceKind::NonCandidate,
        }
    }

    pub fn is_candidate(&self) -> bool {
        self.kind == ChoiceKind::Candidate
    }

    /// Candidate ids in preference order; a single-candidate choice yields itself.
    pub fn preferences(&self) -> impl Iterator<Item = &str> {
        self.id.split(PREFERENCE_SEPARATOR).map(str::trim)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ChoiceRepr {
    Id(String),
    Full { id: String, kind: ChoiceKind },
}

impl From<ChoiceRepr> for Choice {
    fn from(repr: ChoiceRepr) -> Self {
        match repr {
            ChoiceRepr::Id(id) => Choice::new(id),
            ChoiceRepr::Full { id, kind } => Choice { id, kind },
        }
    }
}

impl From<Choice> for ChoiceRepr {
    fn from(choice: Choice) -> Self {
        if Choice::new(choice.id.clone()).kind == choice.kind {
            ChoiceRepr::Id(choice.id)
        } else {
            ChoiceRepr::Full {
                id: choice.id,
                kind: choice.kind,
            }
        }
    }
}

/// A contest outcome: the winning candidate ids. Single-winner rules produce
/// exactly one; the type leaves room for multi-winner rules.
///
/// Serialized as a bare string when there is one winner, else as a list.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "OutcomeRepr", into = "OutcomeRepr")]
pub struct Outcome {
    pub winners: Vec<String>,
}

impl Outcome {
    pub fn single(winner: impl Into<String>) -> Self {
        Self {
            winners: vec![winner.into()],
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.winners.join(","))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OutcomeRepr {
    One(String),
    Many(Vec<String>),
}

impl From<OutcomeRepr> for Outcome {
    fn from(repr: OutcomeRepr) -> Self {
        match repr {
            OutcomeRepr::One(w) => Outcome { winners: vec![w] },
            OutcomeRepr::Many(winners) => Outcome { winners },
        }
    }
}

impl From<Outcome> for OutcomeRepr {
    fn from(outcome: Outcome) -> Self {
        match <[String; 1]>::try_from(outcome.winners) {
            Ok([w]) => OutcomeRepr::One(w),
            Err(winners) => OutcomeRepr::Many(winners),
        }
    }
}

/// One collection's share of a contest's universe of cast ballots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionShare {
    pub collection: String,
    /// Ballots in this collection carrying the contest; 0 means "take it from
    /// the collection's manifest" when loading an audit configuration.
    #[serde(default)]
    pub ballots: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Contest {
    pub id: String,
    pub choices: Vec<Choice>,
    #[serde(default = "default_rule")]
    pub outcome_rule: String,
    pub tie_break_order: Vec<String>,
    pub reported_outcome: Outcome,
    #[serde(default)]
    pub universe: Vec<CollectionShare>,
    /// Per-contest override of the audit-wide risk limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_limit: Option<f64>,
    /// Per-contest override of the initial sample size rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_sample_size: Option<u64>,
}

fn default_rule() -> String {
    "plurality".to_owned()
}

impl Contest {
    /// Builds and validates a contest.
    pub fn new(
        id: impl Into<String>,
        choices: Vec<Choice>,
        outcome_rule: impl Into<String>,
        tie_break_order: Vec<String>,
        reported_outcome: Outcome,
        universe: Vec<CollectionShare>,
    ) -> Result<Self> {
        let contest = Contest {
            id: id.into(),
            choices,
            outcome_rule: outcome_rule.into(),
            tie_break_order,
            reported_outcome,
            universe,
            risk_limit: None,
            initial_sample_size: None,
        };
        contest.validate()?;
        Ok(contest)
    }

    /// Shorthand for a plurality contest over one collection.
    pub fn plurality<S: AsRef<str>>(
        id: &str,
        choices: &[S],
        tie_break_order: &[S],
        reported_winner: &str,
        collection: &str,
        ballots: u64,
    ) -> Result<Self> {
        Contest::new(
            id,
            choices.iter().map(|c| Choice::new(c.as_ref())).collect(),
            "plurality",
            tie_break_order.iter().map(|c| c.as_ref().to_owned()).collect(),
            Outcome::single(reported_winner),
            vec![CollectionShare {
                collection: collection.to_owned(),
                ballots,
            }],
        )
    }

    fn invalid(&self, reason: impl Into<String>) -> AuditError {
        AuditError::InvalidContest {
            contest: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.invalid("empty contest id"));
        }
        let mut seen = HashSet::new();
        for choice in &self.choices {
            if choice.id.is_empty() {
                return Err(self.invalid("empty choice id"));
            }
            if !seen.insert(choice.id.as_str()) {
                return Err(self.invalid(format!("duplicate choice {:?}", choice.id)));
            }
        }
        let candidates = self.candidate_ids();
        if candidates.is_empty() {
            return Err(self.invalid("no candidate choices"));
        }
        let order: BTreeSet<&str> = self.tie_break_order.iter().map(String::as_str).collect();
        let cands: BTreeSet<&str> = candidates.iter().copied().collect();
        if order.len() != self.tie_break_order.len() || order != cands {
            return Err(self.invalid(
                "tie-break order must be a permutation of all candidate ids",
            ));
        }
        let winners = &self.reported_outcome.winners;
        if winners.is_empty() {
            return Err(self.invalid("reported outcome names no winner"));
        }
        let distinct: BTreeSet<&str> = winners.iter().map(String::as_str).collect();
        if distinct.len() != winners.len() {
            return Err(self.invalid("reported outcome repeats a winner"));
        }
        if let Some(w) = winners.iter().find(|w| !cands.contains(w.as_str())) {
            return Err(self.invalid(format!("reported winner {w:?} is not a candidate")));
        }
        if self.universe.iter().any(|s| s.ballots == 0) || self.population() == 0 {
            return Err(self.invalid("contest universe must contain ballots"));
        }
        let collections: BTreeSet<&str> =
            self.universe.iter().map(|s| s.collection.as_str()).collect();
        if collections.len() != self.universe.len() {
            return Err(self.invalid("collection listed twice in universe"));
        }
        if let Some(limit) = self.risk_limit {
            if !(limit > 0.0 && limit < 1.0) {
                return Err(self.invalid("risk limit must lie strictly between 0 and 1"));
            }
        }
        Ok(())
    }

    /// Distinct candidate ids in order of first appearance among the
    /// candidate choices (for preferential contests, across all orderings).
    pub fn candidate_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for choice in self.choices.iter().filter(|c| c.is_candidate()) {
            for name in choice.preferences() {
                if seen.insert(name) {
                    out.push(name);
                }
            }
        }
        out
    }

    pub fn choice(&self, id: &str) -> Option<&Choice> {
        self.choices.iter().find(|c| c.id == id)
    }

    pub fn has_choice(&self, id: &str) -> bool {
        self.choice(id).is_some()
    }

    /// Choice ids sorted; the index space of every dense tally in the engine.
    pub fn sorted_choice_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.choices.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    /// Total universe size `n`.
    pub fn population(&self) -> u64 {
        self.universe.iter().map(|s| s.ballots).sum()
    }

    pub fn covers(&self, collection: &str) -> bool {
        self.universe.iter().any(|s| s.collection == collection)
    }
}

/// Count per choice for one contest (or one stratum of it). Counts are reals
/// so that fuzzed tallies fit the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    pub contest: String,
    pub counts: BTreeMap<String, f64>,
}

impl VoteTally {
    /// All declared choices at zero.
    pub fn zero(contest: &Contest) -> Self {
        Self {
            contest: contest.id.clone(),
            counts: contest.choices.iter().map(|c| (c.id.clone(), 0.0)).collect(),
        }
    }

    pub fn from_counts<K: Into<String>>(
        contest: &Contest,
        counts: impl IntoIterator<Item = (K, f64)>,
    ) -> Result<Self> {
        let mut tally = Self::zero(contest);
        for (id, count) in counts {
            let id = id.into();
            if !(count.is_finite() && count >= 0.0) {
                return Err(AuditError::InvalidCount(count));
            }
            match tally.counts.get_mut(&id) {
                Some(slot) => *slot += count,
                None => {
                    return Err(AuditError::UnknownChoice {
                        contest: contest.id.clone(),
                        choice: id,
                    })
                }
            }
        }
        Ok(tally)
    }

    /// Values in sorted-choice-id order. Keys absent from the tally read as 0.
    pub fn to_dense(&self, contest: &Contest) -> Result<Vec<f64>> {
        if let Some(k) = self.counts.keys().find(|k| !contest.has_choice(k)) {
            return Err(AuditError::UnknownChoice {
                contest: contest.id.clone(),
                choice: k.clone(),
            });
        }
        Ok(contest
            .sorted_choice_ids()
            .into_iter()
            .map(|id| self.counts.get(id).copied().unwrap_or(0.0))
            .collect())
    }

    pub fn from_dense(contest: &Contest, values: &[f64]) -> Self {
        Self {
            contest: contest.id.clone(),
            counts: contest
                .sorted_choice_ids()
                .into_iter()
                .zip(values)
                .map(|(id, &v)| (id.to_owned(), v))
                .collect(),
        }
    }

    pub fn get(&self, choice: &str) -> f64 {
        self.counts.get(choice).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// Entrywise sum; keys present in either side survive.
    pub fn add(&self, other: &VoteTally) -> VoteTally {
        let mut counts = self.counts.clone();
        for (k, v) in &other.counts {
            *counts.entry(k.clone()).or_insert(0.0) += v;
        }
        VoteTally {
            contest: self.contest.clone(),
            counts,
        }
    }

    /// Counts normalized by their sum; `None` for an empty tally.
    pub fn voteshares(&self) -> Option<BTreeMap<String, f64>> {
        let total = self.total();
        (total > 0.0).then(|| {
            self.counts
                .iter()
                .map(|(k, v)| (k.clone(), v / total))
                .collect()
        })
    }
}

/// Tallies a list of votes (choice ids) for a contest.
pub fn tally<S: AsRef<str>>(votes: &[S], contest: &Contest) -> Result<VoteTally> {
    let mut out = VoteTally::zero(contest);
    for vote in votes {
        let vote = vote.as_ref();
        match out.counts.get_mut(vote) {
            Some(count) => *count += 1.0,
            None => {
                return Err(AuditError::UnknownChoice {
                    contest: contest.id.clone(),
                    choice: vote.to_owned(),
                })
            }
        }
    }
    Ok(out)
}

/// Physical location of one paper ballot: collection, container label and
/// 1-based position within the container.
///
/// The canonical text form `collection/container/position` is the sampling
/// key and the replay key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BallotAddress {
    pub collection: String,
    pub container: String,
    pub position: u64,
}

impl BallotAddress {
    pub fn new(collection: &str, container: &str, position: u64) -> Self {
        Self {
            collection: collection.to_owned(),
            container: container.to_owned(),
            position,
        }
    }
}

impl fmt::Display for BallotAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.collection, self.container, self.position)
    }
}

impl FromStr for BallotAddress {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || AuditError::InvalidAddress(s.to_owned());
        let mut parts = s.split('/');
        let (Some(collection), Some(container), Some(position), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let position: u64 = position.parse().map_err(|_| bad())?;
        if collection.is_empty() || container.is_empty() || position == 0 {
            return Err(bad());
        }
        Ok(BallotAddress::new(collection, container, position))
    }
}

impl Serialize for BallotAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BallotAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Container {
    pub label: String,
    pub count: u64,
    /// Free-form ballot-style annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
}

/// Where every cast paper ballot of one collection is stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotManifest {
    pub collection: String,
    pub containers: Vec<Container>,
}

impl BallotManifest {
    pub fn new(collection: &str, containers: &[(&str, u64)]) -> Result<Self> {
        let manifest = Self {
            collection: collection.to_owned(),
            containers: containers
                .iter()
                .map(|&(label, count)| Container {
                    label: label.to_owned(),
                    count,
                    style: None,
                })
                .collect(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// A collection of `n` ballots in a single container labelled `box`.
    pub fn single_box(collection: &str, n: u64) -> Self {
        Self {
            collection: collection.to_owned(),
            containers: vec![Container {
                label: "box".to_owned(),
                count: n,
                style: None,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad_label = |s: &str| s.is_empty() || s.contains('/');
        if bad_label(&self.collection) {
            return Err(AuditError::InvalidManifest(format!(
                "collection id {:?} must be non-empty and contain no '/'",
                self.collection
            )));
        }
        let mut labels = HashSet::new();
        for c in &self.containers {
            if bad_label(&c.label) {
                return Err(AuditError::InvalidManifest(format!(
                    "container label {:?} must be non-empty and contain no '/'",
                    c.label
                )));
            }
            if !labels.insert(c.label.as_str()) {
                return Err(AuditError::InvalidManifest(format!(
                    "duplicate container label {:?}",
                    c.label
                )));
            }
        }
        Ok(())
    }

    /// `N`, the number of ballots in the collection.
    pub fn total(&self) -> u64 {
        self.containers.iter().map(|c| c.count).sum()
    }

    pub fn contains(&self, address: &BallotAddress) -> bool {
        address.collection == self.collection
            && self
                .containers
                .iter()
                .any(|c| c.label == address.container && (1..=c.count).contains(&address.position))
    }

    /// Every ballot address, container by container.
    pub fn addresses(&self) -> impl Iterator<Item = BallotAddress> + '_ {
        self.containers.iter().flat_map(move |c| {
            (1..=c.count).map(move |p| BallotAddress::new(&self.collection, &c.label, p))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CastVoteRecord {
    pub address: BallotAddress,
    /// Reported choice per contest id.
    pub votes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imprinted_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastVoteRecordFile {
    pub collection: String,
    pub records: Vec<CastVoteRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "camelCase")]
pub enum ManifestFinding {
    CollectionMismatch { manifest: String, cvrs: String },
    CountMismatch { manifest: u64, cvrs: u64 },
    DuplicateLocation { address: String },
    OutOfRange { address: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<ManifestFinding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Cross-checks a CVR file against the ballot manifest of its collection.
/// Problems are reported, never raised.
pub fn validate_cvrs_against_manifest(
    manifest: &BallotManifest,
    cvrs: &CastVoteRecordFile,
) -> ValidationReport {
    let mut findings = Vec::new();
    if manifest.collection != cvrs.collection {
        findings.push(ManifestFinding::CollectionMismatch {
            manifest: manifest.collection.clone(),
            cvrs: cvrs.collection.clone(),
        });
    }
    let n = manifest.total();
    let m = cvrs.records.len() as u64;
    if n != m {
        findings.push(ManifestFinding::CountMismatch {
            manifest: n,
            cvrs: m,
        });
    }
    let mut seen = HashSet::new();
    for record in &cvrs.records {
        let address = record.address.to_string();
        if !manifest.contains(&record.address) {
            findings.push(ManifestFinding::OutOfRange {
                address: address.clone(),
            });
        }
        if !seen.insert(record.address.clone()) {
            findings.push(ManifestFinding::DuplicateLocation { address });
        }
    }
    ValidationReport { findings }
}

/// What an auditor read from one ballot. Interpreters never see reported
/// choices: this is the whole input surface.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interpretation {
    pub address: BallotAddress,
    /// Actual choice per contest id.
    pub votes: BTreeMap<String, String>,
}

/// A recorded hand interpretation, with the CVR's reported choices joined in
/// by the engine for comparison collections.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditedBallot {
    pub address: BallotAddress,
    pub round: u32,
    pub actual: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported: Option<BTreeMap<String, String>>,
}
