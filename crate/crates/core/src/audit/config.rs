use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bayes::{make_prior, ComparisonPriorMatrix, PriorKind, SimulationMode, DEFAULT_TRIALS};
use crate::election::{
    validate_cvrs_against_manifest, BallotManifest, CastVoteRecordFile, Contest, VoteTally,
};
use crate::error::{AuditError, Result};
use crate::fuzz::FuzzerKind;
use crate::planner::PlannerConfig;
use crate::prng::{AuditSeed, HashValue};

/// A document given inline or as a path relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(PathBuf),
    Inline(T),
}

impl<T: DeserializeOwned> Source<T> {
    fn resolve(self, base: &Path) -> Result<T> {
        match self {
            Source::Inline(v) => Ok(v),
            Source::Path(p) => {
                let path = if p.is_absolute() { p } else { base.join(p) };
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
                })?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }

    fn inline(&self) -> Option<&T> {
        match self {
            Source::Inline(v) => Some(v),
            Source::Path(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CollectionConfig {
    pub manifest: Source<BallotManifest>,
    /// Present for collections scanned with cast vote records; their
    /// contests are audited by comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvrs: Option<Source<CastVoteRecordFile>>,
    /// Complete hand tallies (contest -> choice -> count) for collections
    /// that were fully counted by hand. They are never sampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_count: Option<BTreeMap<String, BTreeMap<String, f64>>>,
}

impl CollectionConfig {
    /// Panics on unresolved sources; only used after [`AuditConfig::resolve`].
    pub fn manifest(&self) -> &BallotManifest {
        self.manifest.inline().expect("resolved config")
    }

    pub fn cvrs(&self) -> Option<&CastVoteRecordFile> {
        self.cvrs.as_ref().map(|c| c.inline().expect("resolved config"))
    }

    pub fn id(&self) -> &str {
        &self.manifest().collection
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonPriorConfig {
    pub diagonal: f64,
    pub off_diagonal: f64,
}

impl Default for ComparisonPriorConfig {
    fn default() -> Self {
        Self {
            diagonal: 50.0,
            off_diagonal: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Escalation {
    /// Grow each escalating contest's sample by this fraction per round.
    Percent(f64),
    /// Size the next round with the allocation planner.
    Planner(PlannerConfig),
}

impl Default for Escalation {
    fn default() -> Self {
        Escalation::Percent(0.3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditConfig {
    pub seed: AuditSeed,
    #[serde(default = "default_risk_limit")]
    pub risk_limit: f64,
    #[serde(default)]
    pub prior: PriorKind,
    #[serde(default)]
    pub comparison_prior: ComparisonPriorConfig,
    #[serde(default)]
    pub fuzzer: FuzzerKind,
    #[serde(default = "default_trials")]
    pub num_trials: u64,
    #[serde(default)]
    pub simulation_mode: SimulationMode,
    #[serde(default)]
    pub escalation: Escalation,
    /// Switch a contest to a full hand count once its next sample would
    /// exceed this fraction of its population.
    #[serde(default = "default_full_count_threshold")]
    pub full_count_threshold: f64,
    pub contests: Vec<Contest>,
    pub collections: Vec<CollectionConfig>,
}

fn default_risk_limit() -> f64 {
    0.05
}

fn default_trials() -> u64 {
    DEFAULT_TRIALS
}

fn default_full_count_threshold() -> f64 {
    0.6
}

impl AuditConfig {
    /// Reads a config file and inlines every referenced document.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: AuditConfig = serde_json::from_str(&text)?;
        config.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    /// Inlines referenced documents and fills contest universe sizes from
    /// the manifests.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        for c in &mut self.collections {
            let manifest = std::mem::replace(&mut c.manifest, Source::Path(PathBuf::new()));
            c.manifest = Source::Inline(manifest.resolve(base)?);
            if let Some(cvrs) = c.cvrs.take() {
                c.cvrs = Some(Source::Inline(cvrs.resolve(base)?));
            }
        }
        let sizes: BTreeMap<String, u64> = self
            .collections
            .iter()
            .map(|c| (c.id().to_owned(), c.manifest().total()))
            .collect();
        for contest in &mut self.contests {
            for share in &mut contest.universe {
                if share.ballots == 0 {
                    share.ballots = sizes.get(&share.collection).copied().unwrap_or(0);
                }
            }
        }
        Ok(self)
    }

    pub fn collection(&self, id: &str) -> Option<&CollectionConfig> {
        self.collections.iter().find(|c| c.id() == id)
    }

    pub fn contest(&self, id: &str) -> Option<&Contest> {
        self.contests.iter().find(|c| c.id == id)
    }

    pub fn risk_limit_for(&self, contest: &Contest) -> f64 {
        contest.risk_limit.unwrap_or(self.risk_limit)
    }

    /// Every problem found, in a stable order. Empty means valid.
    pub fn findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.risk_limit > 0.0 && self.risk_limit < 1.0) {
            out.push(format!("riskLimit {} must lie strictly between 0 and 1", self.risk_limit));
        }
        if self.num_trials == 0 {
            out.push("numTrials must be at least 1".to_owned());
        }
        if !(self.full_count_threshold > 0.0 && self.full_count_threshold <= 1.0) {
            out.push("fullCountThreshold must lie in (0, 1]".to_owned());
        }
        match self.escalation {
            Escalation::Percent(p) if !(p > 0.0 && p.is_finite()) => {
                out.push("escalation percent must be positive".to_owned())
            }
            Escalation::Planner(p) if !(p.confidence > 0.0 && p.confidence < 1.0) => {
                out.push("planner confidence must lie strictly between 0 and 1".to_owned())
            }
            _ => {}
        }
        let cp = self.comparison_prior;
        if !(cp.diagonal >= 0.0 && cp.off_diagonal >= 0.0) {
            out.push("comparison prior pseudocounts must be nonnegative".to_owned());
        }
        if self.fuzzer.needs_integral_counts() {
            let fractional = |v: f64| v.fract() != 0.0;
            let prior_fractional = match &self.prior {
                PriorKind::Haldane => false,
                PriorKind::Jeffreys => true,
                PriorKind::Custom(m) => m.values().any(|&v| fractional(v)),
            };
            let has_cvrs = self.collections.iter().any(|c| c.cvrs.is_some());
            if prior_fractional || (has_cvrs && (fractional(cp.diagonal) || fractional(cp.off_diagonal))) {
                out.push(format!(
                    "fuzzer {} needs integral pseudocounts but the configured prior has fractional ones",
                    self.fuzzer.name()
                ));
            }
        }
        if self.contests.is_empty() {
            out.push("no contests".to_owned());
        }
        if self.collections.is_empty() {
            out.push("no collections".to_owned());
        }

        let mut ids = BTreeSet::new();
        for c in &self.collections {
            let Some(manifest) = c.manifest.inline() else {
                out.push("unresolved manifest reference".to_owned());
                continue;
            };
            if let Err(e) = manifest.validate() {
                out.push(e.to_string());
            }
            if !ids.insert(manifest.collection.clone()) {
                out.push(format!("collection {} listed twice", manifest.collection));
            }
            if c.cvrs.is_some() && c.hand_count.is_some() {
                out.push(format!(
                    "collection {} has both CVRs and a hand count",
                    manifest.collection
                ));
            }
            if let Some(cvrs) = c.cvrs.as_ref().and_then(Source::inline) {
                let report = validate_cvrs_against_manifest(manifest, cvrs);
                for f in report.findings {
                    out.push(format!(
                        "collection {}: {}",
                        manifest.collection,
                        serde_json::to_string(&f).unwrap_or_default()
                    ));
                }
            }
        }

        let mut contest_ids = BTreeSet::new();
        for contest in &self.contests {
            if !contest_ids.insert(contest.id.as_str()) {
                out.push(format!("contest {} listed twice", contest.id));
            }
            if let Err(e) = contest.validate() {
                out.push(e.to_string());
                continue;
            }
            if let Err(e) = make_prior(&self.prior, contest, "check") {
                out.push(e.to_string());
            }
            for share in &contest.universe {
                let Some(coll) = self.collection(&share.collection) else {
                    out.push(format!(
                        "contest {} names unknown collection {}",
                        contest.id, share.collection
                    ));
                    continue;
                };
                let total = coll.manifest().total();
                if share.ballots != total {
                    out.push(format!(
                        "contest {} claims {} ballots in collection {}, whose manifest lists {total}",
                        contest.id, share.ballots, share.collection
                    ));
                }
                if let Some(cvrs) = coll.cvrs() {
                    if let Err(e) = ComparisonPriorMatrix::uniform(contest, cp.diagonal, cp.off_diagonal)
                    {
                        out.push(e.to_string());
                    }
                    for r in &cvrs.records {
                        match r.votes.get(&contest.id) {
                            None => {
                                out.push(format!(
                                    "CVR {} has no entry for contest {}",
                                    r.address, contest.id
                                ));
                                break;
                            }
                            Some(v) if !contest.has_choice(v) => {
                                out.push(format!(
                                    "CVR {} reports unknown choice {v:?} for contest {}",
                                    r.address, contest.id
                                ));
                                break;
                            }
                            _ => {}
                        }
                    }
                }
                if let Some(hand) = &coll.hand_count {
                    match hand.get(&contest.id) {
                        None => out.push(format!(
                            "hand-counted collection {} has no tally for contest {}",
                            share.collection, contest.id
                        )),
                        Some(t) => match VoteTally::from_counts(contest, t.iter().map(|(k, &v)| (k.clone(), v))) {
                            Err(e) => out.push(e.to_string()),
                            Ok(t) if t.total() != total as f64 => out.push(format!(
                                "hand count of contest {} in {} sums to {}, manifest lists {total}",
                                contest.id,
                                share.collection,
                                t.total()
                            )),
                            Ok(_) => {}
                        },
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let findings = self.findings();
        if findings.is_empty() {
            Ok(())
        } else {
            Err(AuditError::InvalidConfig(findings))
        }
    }

    /// Hex SHA256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        HashValue::of(&bytes).to_hex()
    }
}
