//! Contest outcome rules.
//!
//! A rule maps a (possibly non-integral) tally to an outcome, breaking ties
//! with the contest's pre-committed tie-break order: the candidate earliest
//! in the order wins a tie, and the latest is eliminated first. Rules only
//! ever see dense tallies indexed by sorted choice id, with candidates
//! identified by their position in the tie-break order.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::election::{
    Contest, Outcome, VoteTally, PREFERENCE_SEPARATOR, RESERVED_NON_CANDIDATES,
};
use crate::error::{AuditError, Result};

/// Candidate and ballot-ranking layout shared by all rules for one contest.
#[derive(Clone, Debug)]
pub struct RuleContext {
    /// Candidate ids in tie-break order; a candidate's index is its priority.
    candidates: Vec<String>,
    /// Per dense choice: the ranked candidate indices, `None` for non-candidates.
    rankings: Vec<Option<Vec<usize>>>,
}

impl RuleContext {
    pub fn for_contest(contest: &Contest) -> Result<Self> {
        let ids = contest.sorted_choice_ids();
        let kinds = ids.iter().map(|id| {
            let choice = contest.choice(id).expect("id comes from the contest");
            (*id, choice.is_candidate())
        });
        Self::build(&contest.id, kinds, &contest.tie_break_order)
    }

    /// Context for a bare tally: keys in the tie-break order (or orderings of
    /// them) are candidate choices, reserved ids are non-candidates.
    pub fn for_tally(tally: &VoteTally, tie_break_order: &[String]) -> Result<Self> {
        let kinds = tally
            .counts
            .keys()
            .map(|k| (k.as_str(), !RESERVED_NON_CANDIDATES.contains(&k.as_str())));
        Self::build(&tally.contest, kinds, tie_break_order)
    }

    fn build<'a>(
        contest: &str,
        choices: impl Iterator<Item = (&'a str, bool)>,
        tie_break_order: &[String],
    ) -> Result<Self> {
        let priority: HashMap<&str, usize> = tie_break_order
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut rankings = Vec::new();
        for (id, is_candidate) in choices {
            if !is_candidate {
                rankings.push(None);
                continue;
            }
            let ranking = id
                .split(PREFERENCE_SEPARATOR)
                .map(|name| {
                    priority.get(name.trim()).copied().ok_or_else(|| AuditError::UnknownChoice {
                        contest: contest.to_owned(),
                        choice: id.to_owned(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rankings.push(Some(ranking));
        }
        Ok(Self {
            candidates: tie_break_order.to_vec(),
            rankings,
        })
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn num_choices(&self) -> usize {
        self.rankings.len()
    }

    pub fn outcome(&self, winners: &[usize]) -> Outcome {
        Outcome {
            winners: winners.iter().map(|&i| self.candidates[i].clone()).collect(),
        }
    }

    pub fn outcome_indices(&self, outcome: &Outcome) -> Result<Vec<usize>> {
        outcome
            .winners
            .iter()
            .map(|w| {
                self.candidates
                    .iter()
                    .position(|c| c == w)
                    .ok_or_else(|| AuditError::UnknownChoice {
                        contest: String::new(),
                        choice: w.clone(),
                    })
            })
            .collect()
    }

    /// First-preference weight per candidate, counting only candidates still
    /// in `continuing` (all of them when `None`).
    fn first_preferences(&self, tally: &[f64], continuing: Option<&[bool]>, out: &mut [f64]) {
        out.fill(0.0);
        for (ranking, &weight) in self.rankings.iter().zip(tally) {
            let Some(ranking) = ranking else { continue };
            let top = match continuing {
                None => ranking.first(),
                Some(alive) => ranking.iter().find(|&&c| alive[c]),
            };
            if let Some(&c) = top {
                out[c] += weight;
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index (tie-break priority).
fn argmax_by_priority(values: &[f64], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        match best {
            Some(b) if !(v > values[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// A deterministic contest outcome rule.
pub trait OutcomeRule: Send + Sync {
    fn id(&self) -> &str;

    /// Winning candidate indices for a dense tally laid out by `ctx`.
    fn evaluate(&self, ctx: &RuleContext, tally: &[f64]) -> Result<Vec<usize>>;
}

impl fmt::Debug for dyn OutcomeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OutcomeRule({})", self.id())
    }
}

/// First past the post.
#[derive(Clone, Copy, Debug, Default)]
pub struct Plurality;

impl OutcomeRule for Plurality {
    fn id(&self) -> &str {
        "plurality"
    }

    fn evaluate(&self, ctx: &RuleContext, tally: &[f64]) -> Result<Vec<usize>> {
        let mut totals = vec![0.0; ctx.candidates.len()];
        ctx.first_preferences(tally, None, &mut totals);
        argmax_by_priority(&totals, |_| true)
            .map(|w| vec![w])
            .ok_or(AuditError::NoCandidates)
    }
}

/// Most-approved candidate; tally entries are approval counts.
#[derive(Clone, Copy, Debug, Default)]
pub struct Approval;

impl OutcomeRule for Approval {
    fn id(&self) -> &str {
        "approval"
    }

    fn evaluate(&self, ctx: &RuleContext, tally: &[f64]) -> Result<Vec<usize>> {
        let mut approvals = vec![0.0; ctx.candidates.len()];
        for (ranking, &weight) in ctx.rankings.iter().zip(tally) {
            for &c in ranking.iter().flatten() {
                approvals[c] += weight;
            }
        }
        argmax_by_priority(&approvals, |_| true)
            .map(|w| vec![w])
            .ok_or(AuditError::NoCandidates)
    }
}

/// Instant runoff: repeatedly eliminate the candidate with the least
/// first-preference weight until someone holds a strict majority of the
/// weight still on continuing candidates. Exhausted and non-candidate
/// weight never counts toward the threshold.
#[derive(Clone, Copy, Debug, Default)]
pub struct InstantRunoff;

impl OutcomeRule for InstantRunoff {
    fn id(&self) -> &str {
        "irv"
    }

    fn evaluate(&self, ctx: &RuleContext, tally: &[f64]) -> Result<Vec<usize>> {
        let m = ctx.candidates.len();
        if m == 0 {
            return Err(AuditError::NoCandidates);
        }
        let mut continuing = vec![true; m];
        let mut remaining = m;
        let mut totals = vec![0.0; m];
        loop {
            ctx.first_preferences(tally, Some(&continuing), &mut totals);
            let leader = argmax_by_priority(&totals, |c| continuing[c]).expect("remaining > 0");
            if remaining == 1 {
                return Ok(vec![leader]);
            }
            let active: f64 = (0..m).filter(|&c| continuing[c]).map(|c| totals[c]).sum();
            if totals[leader] > active / 2.0 {
                return Ok(vec![leader]);
            }
            // Lowest total; among equals the latest in tie-break order goes.
            let mut loser = None;
            for c in (0..m).rev().filter(|&c| continuing[c]) {
                match loser {
                    Some(l) if !(totals[c] < totals[l]) => {}
                    _ => loser = Some(c),
                }
            }
            continuing[loser.expect("remaining > 1")] = false;
            remaining -= 1;
        }
    }
}

/// Outcome rules keyed by id. Third parties add rules with [`register`].
///
/// [`register`]: RuleRegistry::register
#[derive(Clone)]
pub struct RuleRegistry {
    rules: HashMap<String, Arc<dyn OutcomeRule>>,
}

impl Default for RuleRegistry {
    fn default() -> Self {
        let mut registry = Self {
            rules: HashMap::new(),
        };
        registry.register(Arc::new(Plurality));
        registry.register(Arc::new(Approval));
        registry.register(Arc::new(InstantRunoff));
        registry
    }
}

impl RuleRegistry {
    pub fn register(&mut self, rule: Arc<dyn OutcomeRule>) {
        self.rules.insert(rule.id().to_owned(), rule);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn OutcomeRule>> {
        self.rules
            .get(id)
            .cloned()
            .ok_or_else(|| AuditError::UnknownRule(id.to_owned()))
    }
}

/// A contest's rule bound to its layout and reported outcome.
#[derive(Clone, Debug)]
pub struct OutcomeEvaluator {
    contest: String,
    ctx: RuleContext,
    rule: Arc<dyn OutcomeRule>,
    reported: Vec<usize>,
    reported_outcome: Outcome,
}

impl OutcomeEvaluator {
    pub fn new(contest: &Contest, registry: &RuleRegistry) -> Result<Self> {
        let ctx = RuleContext::for_contest(contest)?;
        let reported = ctx.outcome_indices(&contest.reported_outcome)?;
        Ok(Self {
            contest: contest.id.clone(),
            rule: registry.get(&contest.outcome_rule)?,
            ctx,
            reported,
            reported_outcome: contest.reported_outcome.clone(),
        })
    }

    pub fn contest(&self) -> &str {
        &self.contest
    }

    pub fn context(&self) -> &RuleContext {
        &self.ctx
    }

    pub fn evaluate(&self, tally: &[f64]) -> Result<Vec<usize>> {
        self.rule.evaluate(&self.ctx, tally)
    }

    pub fn evaluate_tally(&self, contest: &Contest, tally: &VoteTally) -> Result<Outcome> {
        let dense = tally.to_dense(contest)?;
        Ok(self.ctx.outcome(&self.evaluate(&dense)?))
    }

    /// Compares full outcome values, not just the first winner.
    pub fn is_reported(&self, outcome: &[usize]) -> bool {
        outcome == self.reported.as_slice()
    }

    pub fn reported(&self) -> &Outcome {
        &self.reported_outcome
    }

    pub fn outcome(&self, winners: &[usize]) -> Outcome {
        self.ctx.outcome(winners)
    }
}

fn single_winner(rule: &dyn OutcomeRule, tally: &VoteTally, tie_break_order: &[String]) -> Result<String> {
    if tie_break_order.is_empty() {
        return Err(AuditError::NoCandidates);
    }
    let ctx = RuleContext::for_tally(tally, tie_break_order)?;
    let dense: Vec<f64> = tally.counts.values().copied().collect();
    let winners = rule.evaluate(&ctx, &dense)?;
    Ok(ctx.candidates[winners[0]].clone())
}

/// Plurality winner of a tally.
pub fn plurality(tally: &VoteTally, tie_break_order: &[String]) -> Result<String> {
    single_winner(&Plurality, tally, tie_break_order)
}

/// Approval winner of a tally of approval counts.
pub fn approval(tally: &VoteTally, tie_break_order: &[String]) -> Result<String> {
    single_winner(&Approval, tally, tie_break_order)
}

/// IRV winner of a tally keyed by preference orderings.
pub fn irv(tally: &VoteTally, tie_break_order: &[String]) -> Result<String> {
    single_winner(&InstantRunoff, tally, tie_break_order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn t(pairs: &[(&str, f64)]) -> VoteTally {
        VoteTally {
            contest: "c".into(),
            counts: pairs.iter().map(|&(k, v)| (k.to_owned(), v)).collect::<BTreeMap<_, _>>(),
        }
    }

    fn order(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn plurality_examples() {
        let tally = t(&[("Jones", 234.0), ("Smith", 3122.0), ("Berman", 43.0), ("undervote", 2.0)]);
        assert_eq!(plurality(&tally, &order(&["Jones", "Smith", "Berman"])).unwrap(), "Smith");
        assert_eq!(plurality(&t(&[("A", 118.0), ("B", 136.0)]), &order(&["A", "B"])).unwrap(), "B");
        assert_eq!(plurality(&t(&[("A", 5.0), ("B", 5.0)]), &order(&["B", "A"])).unwrap(), "B");
        assert!(matches!(
            plurality(&t(&[("undervote", 3.0)]), &[]),
            Err(AuditError::NoCandidates)
        ));
    }

    #[test]
    fn non_candidates_never_win() {
        let tally = t(&[("A", 1.0), ("B", 0.0), ("undervote", 100.0)]);
        assert_eq!(plurality(&tally, &order(&["B", "A"])).unwrap(), "A");
    }

    #[test]
    fn approval_examples() {
        assert_eq!(approval(&t(&[("X", 10.0), ("Y", 3.0)]), &order(&["X", "Y"])).unwrap(), "X");
        assert_eq!(approval(&t(&[("X", 7.0), ("Y", 7.0)]), &order(&["Y", "X"])).unwrap(), "Y");
        assert_eq!(
            approval(&t(&[("X", 0.0), ("Y", 0.0), ("Z", 1.0)]), &order(&["X", "Y", "Z"])).unwrap(),
            "Z"
        );
    }

    #[test]
    fn irv_on_preferential_table() {
        let tally = t(&[
            ("Jones>Smith>Berman", 234.0),
            ("Jones>Berman>Smith", 1.0),
            ("Smith>Jones>Berman", 2192.0),
            ("Smith>Berman>Jones", 344.0),
            ("Berman>Smith>Jones", 19.0),
            ("invalid", 2.0),
        ]);
        assert_eq!(irv(&tally, &order(&["Jones", "Smith", "Berman"])).unwrap(), "Smith");
        assert_eq!(irv(&tally, &order(&["Berman", "Jones", "Smith"])).unwrap(), "Smith");
    }

    #[test]
    fn irv_ties_and_single_candidate() {
        assert_eq!(irv(&t(&[("A", 0.0)]), &order(&["A"])).unwrap(), "A");
        let tied = t(&[("A>B", 2.0), ("B>A", 2.0)]);
        assert_eq!(irv(&tied, &order(&["A", "B"])).unwrap(), "A");
        assert_eq!(irv(&tied, &order(&["B", "A"])).unwrap(), "B");
    }

    #[test]
    fn irv_transfers_votes() {
        // C eliminated first; its ballots carry B past A.
        let tally = t(&[("A>B>C", 40.0), ("B>A>C", 35.0), ("C>B>A", 25.0)]);
        assert_eq!(irv(&tally, &order(&["A", "B", "C"])).unwrap(), "B");
        // Plurality on the same ballots picks A.
        let firsts = t(&[("A", 40.0), ("B", 35.0), ("C", 25.0)]);
        assert_eq!(plurality(&firsts, &order(&["A", "B", "C"])).unwrap(), "A");
    }

    #[test]
    fn irv_exhausted_weight_leaves_threshold() {
        // After C goes, the C-only ballots exhaust: A has 40 of 75 continuing.
        let tally = t(&[("A", 40.0), ("B", 35.0), ("C", 25.0), ("undervote", 50.0)]);
        assert_eq!(irv(&tally, &order(&["B", "A", "C"])).unwrap(), "A");
    }

    #[test]
    fn registry_lookup() {
        let registry = RuleRegistry::default();
        for id in ["plurality", "approval", "irv"] {
            assert_eq!(registry.get(id).unwrap().id(), id);
        }
        assert!(matches!(registry.get("schulze"), Err(AuditError::UnknownRule(_))));
    }

    #[test]
    fn brute_force_plurality_oracle() {
        let ids = ["A", "B", "C"];
        let orders = [order(&["A", "B", "C"]), order(&["C", "A", "B"]), order(&["B", "C", "A"])];
        for a in 0..=4 {
            for b in 0..=4 {
                for c in 0..=4 {
                    let counts = [a as f64, b as f64, c as f64];
                    let tally = t(&[("A", counts[0]), ("B", counts[1]), ("C", counts[2])]);
                    for tie in &orders {
                        let max = counts.iter().cloned().fold(f64::MIN, f64::max);
                        let expected = tie
                            .iter()
                            .find(|name| {
                                let i = ids.iter().position(|x| x == *name).unwrap();
                                counts[i] == max
                            })
                            .unwrap();
                        assert_eq!(&plurality(&tally, tie).unwrap(), expected);
                    }
                }
            }
        }
    }
}
