//! Workload projection and sample allocation.
//!
//! A projection asks: if the sample grew to size `F`, how likely is the
//! audit to stop there? Each repetition draws plausible extra ballots from
//! the current posterior (a Dirichlet draw, then a multinomial), re-measures
//! risk on the enlarged sample, and records whether it fell below the limit.
//!
//! Allocation searches per-collection sample increments by coordinate
//! descent: start from counting everything, shrink one collection at a time
//! while every contest still stops with the required confidence, halve the
//! step when nothing shrinks, quit when the step drops below one ballot.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bayes::{measure_risk, RiskConfig, SimulationMode, Stratum};
use crate::election::Contest;
use crate::error::{AuditError, Result};
use crate::fuzz::{fuzz_dense, multinomial_into, normalize_in_place, FuzzerKind};
use crate::parallel::{map_indexed, Execution};
use crate::prng::TrialStreams;
use crate::rules::{OutcomeEvaluator, RuleRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct PlannerConfig {
    pub inner_reps: u64,
    pub inner_trials: u64,
    /// Required probability that a plan completes every contest's audit.
    pub confidence: f64,
    pub execution: Execution,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            inner_reps: 50,
            inner_trials: 10_000,
            confidence: 0.9,
            execution: Execution::Parallel,
        }
    }
}

/// A stratum tagged with the collection its ballots are pulled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningStratum {
    pub collection: String,
    pub stratum: Stratum,
}

/// Everything the planner needs to know about one contest.
#[derive(Clone, Debug)]
pub struct ContestSnapshot {
    pub contest: Contest,
    pub risk_limit: f64,
    pub strata: Vec<PlanningStratum>,
    pub simulation: SimulationMode,
}

impl ContestSnapshot {
    pub fn current_sample_size(&self) -> u64 {
        self.strata.iter().map(|s| s.stratum.sample_size()).sum()
    }

    pub fn population(&self) -> u64 {
        self.strata.iter().map(|s| s.stratum.population()).sum()
    }

    /// Unaudited ballots of this contest per collection.
    pub fn remaining(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for s in &self.strata {
            *out.entry(s.collection.clone()).or_default() += s.stratum.model.nonsample_size;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkloadPoint {
    pub sample_size: u64,
    pub stop_probability: f64,
    pub additional_ballots: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkloadProjection {
    pub contest: String,
    pub current_sample_size: u64,
    pub points: Vec<WorkloadPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContestPlan {
    pub stop_probability: f64,
    pub mean_projected_risk: f64,
    pub full_hand_count_required: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocationPlan {
    /// Additional ballots to pull per collection.
    pub allocations: BTreeMap<String, u64>,
    pub contests: BTreeMap<String, ContestPlan>,
    pub total_additional: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub projections: Vec<WorkloadProjection>,
}

/// Splits `total` in proportion to `weights` by largest remainder (ties to
/// the earlier entry). Each share is at most its weight when `total` does
/// not exceed the weight sum.
pub fn proportional_split(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut shares: Vec<u64> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let exact = total as u128 * w as u128;
        shares.push((exact / sum) as u64);
        remainders.push((exact % sum, i));
    }
    let mut left = total - shares.iter().sum::<u64>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in remainders {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    shares
}

/// Adds `extra` simulated ballots to a stratum, drawn from a Dirichlet
/// sample of its posterior.
fn extend_stratum<R: rand::Rng>(
    stratum: &Stratum,
    contest: &Contest,
    extra: u64,
    rng: &mut R,
) -> Result<Stratum> {
    if extra == 0 {
        return Ok(stratum.clone());
    }
    stratum.model.check_generative()?;
    let posterior = stratum.model.posterior.as_tally().to_dense(contest)?;
    let mut probs = vec![0.0; posterior.len()];
    fuzz_dense(&posterior, FuzzerKind::Gamma, rng, &mut probs)?;
    normalize_in_place(&mut probs).map_err(|_| AuditError::DegeneratePosterior {
        stratum: stratum.model.stratum.clone(),
        nonsample: stratum.model.nonsample_size,
    })?;
    let mut drawn = vec![0.0; probs.len()];
    multinomial_into(&probs, extra, rng, &mut drawn);
    let mut out = stratum.clone();
    for (id, v) in contest.sorted_choice_ids().into_iter().zip(&drawn) {
        *out.sample.counts.get_mut(id).expect("dense ids") += v;
        *out.model.posterior.pseudocounts.get_mut(id).expect("dense ids") += v;
    }
    out.model.nonsample_size -= extra;
    Ok(out)
}

struct StopStats {
    stop_probability: f64,
    mean_risk: f64,
}

/// Per-collection increments for one contest, split over its strata.
fn stratum_extensions(snapshot: &ContestSnapshot, by_collection: &BTreeMap<String, u64>) -> Vec<u64> {
    let mut out = vec![0; snapshot.strata.len()];
    let remaining = snapshot.remaining();
    for (collection, &left) in &remaining {
        let want = by_collection.get(collection).copied().unwrap_or(0).min(left);
        let idx: Vec<usize> = (0..snapshot.strata.len())
            .filter(|&i| &snapshot.strata[i].collection == collection)
            .collect();
        let weights: Vec<u64> = idx
            .iter()
            .map(|&i| snapshot.strata[i].stratum.model.nonsample_size)
            .collect();
        for (i, share) in idx.into_iter().zip(proportional_split(want, &weights)) {
            out[i] = share;
        }
    }
    out
}

fn stop_stats(
    snapshot: &ContestSnapshot,
    evaluator: &OutcomeEvaluator,
    extensions: &[u64],
    config: &PlannerConfig,
    streams: &TrialStreams,
) -> Result<StopStats> {
    let risk_config = RiskConfig {
        trials: config.inner_trials,
        mode: snapshot.simulation,
        execution: Execution::Sequential,
    };
    let streams = streams.child(&snapshot.contest.id);
    let measure = |rep: u64| -> Result<f64> {
        let mut rng = streams.child("extension").trial(rep);
        let strata = snapshot
            .strata
            .iter()
            .zip(extensions)
            .map(|(s, &e)| extend_stratum(&s.stratum, &snapshot.contest, e, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let risk_streams = streams.child(&format!("risk,{rep}"));
        Ok(measure_risk(&strata, &snapshot.contest, evaluator, &risk_config, &risk_streams)?.risk)
    };
    // No extension means nothing random is drawn: one measurement decides.
    let reps = if extensions.iter().all(|&e| e == 0) {
        1
    } else {
        config.inner_reps.max(1)
    };
    let risks = map_indexed(config.execution, reps, measure)?;
    let stops = risks.iter().filter(|&&r| r < snapshot.risk_limit).count();
    Ok(StopStats {
        stop_probability: stops as f64 / reps as f64,
        mean_risk: risks.iter().sum::<f64>() / reps as f64,
    })
}

/// Estimated stop probability at each future total sample size.
pub fn project_workload(
    snapshot: &ContestSnapshot,
    future_sizes: &[u64],
    config: &PlannerConfig,
    streams: &TrialStreams,
) -> Result<WorkloadProjection> {
    let evaluator = OutcomeEvaluator::new(&snapshot.contest, &RuleRegistry::default())?;
    let current = snapshot.current_sample_size();
    let population = snapshot.population();
    let remaining = snapshot.remaining();
    let collections: Vec<&String> = remaining.keys().collect();
    let weights: Vec<u64> = remaining.values().copied().collect();
    let mut points = Vec::with_capacity(future_sizes.len());
    for &size in future_sizes {
        if size < current {
            return Err(AuditError::Planning(format!(
                "future size {size} is below the current sample size {current}"
            )));
        }
        if size > population {
            return Err(AuditError::Planning(format!(
                "future size {size} exceeds contest {} population {population}",
                snapshot.contest.id
            )));
        }
        let additional = size - current;
        let by_collection: BTreeMap<String, u64> = collections
            .iter()
            .map(|c| (*c).clone())
            .zip(proportional_split(additional, &weights))
            .collect();
        let ext = stratum_extensions(snapshot, &by_collection);
        let stats = stop_stats(snapshot, &evaluator, &ext, config, streams)?;
        points.push(WorkloadPoint {
            sample_size: size,
            stop_probability: stats.stop_probability,
            additional_ballots: additional,
        });
    }
    Ok(WorkloadProjection {
        contest: snapshot.contest.id.clone(),
        current_sample_size: current,
        points,
    })
}

/// Coordinate-descent allocation of additional ballots per collection.
/// `remaining` lists every collection's unsampled ballots.
pub fn plan_allocation(
    snapshots: &[ContestSnapshot],
    remaining: &BTreeMap<String, u64>,
    config: &PlannerConfig,
    streams: &TrialStreams,
) -> Result<AllocationPlan> {
    if snapshots.is_empty() {
        return Ok(AllocationPlan::default());
    }
    let registry = RuleRegistry::default();
    let evaluators = snapshots
        .iter()
        .map(|s| OutcomeEvaluator::new(&s.contest, &registry))
        .collect::<Result<Vec<_>>>()?;
    for s in snapshots {
        if let Some(c) = s.remaining().keys().find(|c| !remaining.contains_key(*c)) {
            return Err(AuditError::Planning(format!(
                "contest {} uses collection {c} with no remaining count",
                s.contest.id
            )));
        }
    }
    let evaluate = |i: usize, alloc: &BTreeMap<String, u64>| -> Result<StopStats> {
        let ext = stratum_extensions(&snapshots[i], alloc);
        stop_stats(&snapshots[i], &evaluators[i], &ext, config, streams)
    };

    let mut alloc = remaining.clone();
    let mut stats = Vec::with_capacity(snapshots.len());
    let mut full_count = vec![false; snapshots.len()];
    for i in 0..snapshots.len() {
        let s = evaluate(i, &alloc)?;
        full_count[i] = s.stop_probability < config.confidence;
        stats.push(s);
    }
    // Collections of contests that need a full count stay fully allocated.
    let pinned: Vec<String> = snapshots
        .iter()
        .zip(&full_count)
        .filter(|(_, &f)| f)
        .flat_map(|(s, _)| s.remaining().into_keys())
        .collect();
    let users = |collection: &str| -> Vec<usize> {
        (0..snapshots.len())
            .filter(|&i| !full_count[i] && snapshots[i].remaining().contains_key(collection))
            .collect()
    };

    let mut step = remaining.values().copied().max().unwrap_or(0) / 2;
    while step >= 1 {
        let mut shrunk = false;
        for collection in remaining.keys() {
            if pinned.contains(collection) || alloc[collection] == 0 {
                continue;
            }
            let mut trial = alloc.clone();
            let slot = trial.get_mut(collection).expect("known collection");
            *slot = slot.saturating_sub(step);
            let affected = users(collection);
            let mut candidate = Vec::with_capacity(affected.len());
            let mut feasible = true;
            for &i in &affected {
                let s = evaluate(i, &trial)?;
                if s.stop_probability < config.confidence {
                    feasible = false;
                    break;
                }
                candidate.push((i, s));
            }
            if feasible {
                alloc = trial;
                for (i, s) in candidate {
                    stats[i] = s;
                }
                shrunk = true;
            }
        }
        if !shrunk {
            step /= 2;
        }
    }

    let contests = snapshots
        .iter()
        .zip(&stats)
        .zip(&full_count)
        .map(|((s, st), &f)| {
            (
                s.contest.id.clone(),
                ContestPlan {
                    stop_probability: st.stop_probability,
                    mean_projected_risk: st.mean_risk,
                    full_hand_count_required: f,
                },
            )
        })
        .collect();
    Ok(AllocationPlan {
        total_additional: alloc.values().sum(),
        allocations: alloc,
        contests,
        projections: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{ballot_polling_stratum, PriorKind};
    use crate::election::{CollectionShare, VoteTally};

    #[test]
    fn split_is_exact_and_capped() {
        assert_eq!(proportional_split(10, &[1, 1, 1]), vec![4, 3, 3]);
        assert_eq!(proportional_split(0, &[5, 5]), vec![0, 0]);
        assert_eq!(proportional_split(7, &[0, 0]), vec![0, 0]);
        for total in 0..=30u64 {
            let w = [3u64, 10, 17];
            let s = proportional_split(total, &w);
            assert_eq!(s.iter().sum::<u64>(), total);
            assert!(s.iter().zip(&w).all(|(a, b)| a <= b));
        }
    }

    fn snapshot(a: f64, b: f64, n: u64) -> ContestSnapshot {
        let contest = Contest::plurality("c", &["A", "B"], &["A", "B"], "A", "x", n).unwrap();
        let sample = VoteTally::from_counts(&contest, [("A", a), ("B", b)]).unwrap();
        let stratum =
            ballot_polling_stratum(&contest, "x", &PriorKind::Haldane, sample, n, FuzzerKind::Gamma)
                .unwrap();
        ContestSnapshot {
            contest,
            risk_limit: 0.05,
            strata: vec![PlanningStratum {
                collection: "x".into(),
                stratum,
            }],
            simulation: SimulationMode::Full,
        }
    }

    fn quick() -> PlannerConfig {
        PlannerConfig {
            inner_reps: 40,
            inner_trials: 2000,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn current_size_projection_is_zero_or_one() {
        let t = TrialStreams::from_u64(5);
        let close = project_workload(&snapshot(28.0, 26.0, 1000), &[54], &quick(), &t).unwrap();
        assert_eq!(close.points[0].stop_probability, 0.0);
        let clear = project_workload(&snapshot(50.0, 10.0, 1000), &[60], &quick(), &t).unwrap();
        assert_eq!(clear.points[0].stop_probability, 1.0);
    }

    #[test]
    fn landslide_full_count_stops() {
        let t = TrialStreams::from_u64(6);
        let p = project_workload(&snapshot(95.0, 5.0, 10_000), &[10_000], &quick(), &t).unwrap();
        assert!(p.points[0].stop_probability > 0.97);
    }

    #[test]
    fn projection_rejects_bad_sizes() {
        let t = TrialStreams::from_u64(6);
        let s = snapshot(30.0, 20.0, 200);
        assert!(project_workload(&s, &[10], &quick(), &t).is_err());
        assert!(project_workload(&s, &[201], &quick(), &t).is_err());
    }

    #[test]
    fn projection_grows_with_size() {
        let t = TrialStreams::from_u64(7);
        let p = project_workload(&snapshot(55.0, 45.0, 5000), &[100, 300, 900], &quick(), &t)
            .unwrap();
        let probs: Vec<f64> = p.points.iter().map(|x| x.stop_probability).collect();
        assert!(probs[0] <= probs[1] + 0.15 && probs[1] <= probs[2] + 0.15, "{probs:?}");
        assert!(probs[2] > probs[0]);
    }

    #[test]
    fn empty_plan() {
        let plan = plan_allocation(&[], &BTreeMap::new(), &quick(), &TrialStreams::from_u64(1))
            .unwrap();
        assert_eq!(plan, AllocationPlan::default());
    }

    #[test]
    fn single_collection_plan_is_feasible_and_tight() {
        let s = snapshot(55.0, 45.0, 5000);
        let remaining: BTreeMap<String, u64> = [("x".to_owned(), 4900)].into_iter().collect();
        let t = TrialStreams::from_u64(9);
        let plan = plan_allocation(std::slice::from_ref(&s), &remaining, &quick(), &t).unwrap();
        let x = plan.allocations["x"];
        assert!(x > 0 && x < 4900, "{x}");
        assert!(plan.contests["c"].stop_probability >= 0.9);
        let below = project_workload(&s, &[100 + x / 2], &quick(), &t).unwrap();
        assert!(below.points[0].stop_probability < 0.9);
    }

    #[test]
    fn close_contest_gets_its_collection_sampled_harder() {
        // S is close and lives only in collection j1; R is a landslide over both.
        let n = 2000;
        let close = Contest::plurality("S", &["A", "B"], &["A", "B"], "A", "j1", n).unwrap();
        let mut wide = Contest::plurality("R", &["C", "D"], &["C", "D"], "C", "j1", n).unwrap();
        wide.universe.push(CollectionShare {
            collection: "j2".into(),
            ballots: n,
        });
        let polling = |c: &Contest, stratum: &str, a: f64, b: f64| {
            let ids = c.candidate_ids();
            let sample = VoteTally::from_counts(c, [(ids[0], a), (ids[1], b)]).unwrap();
            ballot_polling_stratum(c, stratum, &PriorKind::Haldane, sample, n, FuzzerKind::Gamma)
                .unwrap()
        };
        let snaps = vec![
            ContestSnapshot {
                contest: close.clone(),
                risk_limit: 0.05,
                strata: vec![PlanningStratum {
                    collection: "j1".into(),
                    stratum: polling(&close, "j1", 55.0, 45.0),
                }],
                simulation: SimulationMode::Full,
            },
            ContestSnapshot {
                contest: wide.clone(),
                risk_limit: 0.05,
                strata: vec![
                    PlanningStratum {
                        collection: "j1".into(),
                        stratum: polling(&wide, "j1", 75.0, 25.0),
                    },
                    PlanningStratum {
                        collection: "j2".into(),
                        stratum: polling(&wide, "j2", 75.0, 25.0),
                    },
                ],
                simulation: SimulationMode::Full,
            },
        ];
        let remaining: BTreeMap<String, u64> =
            [("j1".to_owned(), n - 100), ("j2".to_owned(), n - 100)].into_iter().collect();
        let plan = plan_allocation(&snaps, &remaining, &quick(), &TrialStreams::from_u64(11))
            .unwrap();
        assert!(plan.allocations["j1"] > plan.allocations["j2"], "{plan:?}");
        assert!(plan.allocations.values().zip(remaining.values()).all(|(a, r)| a <= r));
    }
}
