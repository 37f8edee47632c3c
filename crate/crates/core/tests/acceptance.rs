//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use bayes_audit::audit::{replay_with, AuditState, ContestStatus, Source};
use bayes_audit::bayes::{
    ballot_polling_stratum, measure_risk, measure_risk_reference, nuts_in_cans, update_posterior,
    Fraction, Hyperparameters, PriorKind, RiskConfig, Stratum,
};
use bayes_audit::election::{Contest, Outcome, VoteTally};
use bayes_audit::fuzz::{fuzz_count, FuzzerKind};
use bayes_audit::parallel::Execution;
use bayes_audit::prng::{AuditSeed, PrngStream, TrialStreams};
use bayes_audit::rules::{OutcomeEvaluator, RuleRegistry};
use bayes_audit::sim::{self, run_audit, two_candidate_election, TwoCandidateSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

struct Outcomes {
    passed: usize,
    failed: Vec<&'static str>,
}

impl Outcomes {
    fn record(&mut self, name: &'static str, elapsed: Duration, result: Result<String, String>) {
        let secs = elapsed.as_secs_f64();
        match result {
            Ok(detail) => {
                self.passed += 1;
                println!("PASS {name}: {detail} [{secs:.1}s]");
            }
            Err(detail) => {
                self.failed.push(name);
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn run(outcomes: &mut Outcomes, name: &'static str, f: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let result = f();
    outcomes.record(name, start.elapsed(), result);
}

fn two_way(reported: &str, tie_order: [&str; 2], population: u64) -> (Contest, OutcomeEvaluator) {
    let contest =
        Contest::plurality("c", &["A", "B"], &tie_order, reported, "x", population).unwrap();
    let evaluator = OutcomeEvaluator::new(&contest, &RuleRegistry::default()).unwrap();
    (contest, evaluator)
}

fn polling(contest: &Contest, id: &str, a: u64, b: u64, population: u64) -> Stratum {
    let sample = VoteTally::from_counts(contest, [("A", a as f64), ("B", b as f64)]).unwrap();
    ballot_polling_stratum(contest, id, &PriorKind::Haldane, sample, population, FuzzerKind::Gamma)
        .unwrap()
}

/// P(X >= threshold) for X ~ Beta-Binomial(n; alpha, beta).
fn beta_binomial_upper_tail(n: u64, alpha: f64, beta: f64, threshold: u64) -> f64 {
    let ln_beta = |a: f64, b: f64| ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let nf = n as f64;
    (threshold..=n)
        .map(|x| {
            let x = x as f64;
            let ln_choose = ln_gamma(nf + 1.0) - ln_gamma(x + 1.0) - ln_gamma(nf - x + 1.0);
            (ln_choose + ln_beta(x + alpha, nf - x + beta) - ln_beta(alpha, beta)).exp()
        })
        .sum()
}

fn worked_example() -> Result<String, String> {
    // 254 ballots, 54 sampled (A 23, B 31), B reported. A ties count as A.
    let (contest, evaluator) = two_way("B", ["A", "B"], 254);
    let stratum = polling(&contest, "x", 23, 31, 254);
    let start = Instant::now();
    let est = measure_risk(
        &[stratum],
        &contest,
        &evaluator,
        &RiskConfig::default(),
        &TrialStreams::from_u64(20_160_101),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    // A wins the full count when 23 + X >= 31 + (200 - X), i.e. X >= 104.
    let oracle = beta_binomial_upper_tail(200, 23.0, 31.0, 104);
    let se = (oracle * (1.0 - oracle) / est.trials as f64).sqrt();
    let a_freq = est.win_frequencies.get("A").copied().unwrap_or(0.0);
    let detail = format!(
        "P(A wins)={a_freq:.5} risk={:.5} oracle={oracle:.5} 4se={:.5} trials={} engine={elapsed:.2}s",
        est.risk,
        4.0 * se,
        est.trials
    );
    let ok = est.trials == 1_000_000
        && a_freq == est.risk
        && (a_freq - 0.1148).abs() <= 0.005
        && (a_freq - oracle).abs() <= 4.0 * se
        && elapsed <= 10.0;
    if ok { Ok(detail) } else { Err(detail) }
}

fn prng_vectors() -> Result<String, String> {
    let mut stream = PrngStream::new(AuditSeed::new("107432020578817523419453").unwrap());
    let got = [stream.next_value().to_decimal(), stream.next_value().to_decimal()];
    let want = [
        "097411546950308080061616750587378383961909559564631478751824138412344194481105",
        "031176744492396048120565507363585400255289825756640350739975511058891174407379",
    ];
    if got == want {
        Ok("counters 1 and 2 reproduce both 78-digit outputs".into())
    } else {
        Err(format!("got {got:?}"))
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(mut x: Vec<f64>, mut y: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

fn fuzzer_moments() -> Result<String, String> {
    const N: usize = 1_000_000;
    let mut problems = Vec::new();
    let mut parts = Vec::new();
    for k in [1.0f64, 5.0, 23.0, 100.0] {
        let mut rng = TrialStreams::from_u64(k as u64).trial(0);
        let draws: Vec<f64> =
            (0..N).map(|_| fuzz_count(k, FuzzerKind::Gamma, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / N as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        let mean_tol = 3.0 * k.sqrt() / (N as f64).sqrt();
        parts.push(format!("k={k}: mean={mean:.4} var={var:.3}"));
        if (mean - k).abs() > mean_tol {
            problems.push(format!("k={k} mean {mean} outside {k}±{mean_tol:.4}"));
        }
        if (var - k).abs() > 0.05 * k {
            problems.push(format!("k={k} variance {var} outside {k}±5%"));
        }
    }
    const M: usize = 200_000;
    let streams = TrialStreams::from_u64(516);
    let mut r1 = streams.child("sum").trial(0);
    let mut r2 = streams.child("single").trial(0);
    let sums: Vec<f64> = (0..M)
        .map(|_| {
            fuzz_count(5.0, FuzzerKind::Gamma, &mut r1).unwrap()
                + fuzz_count(11.0, FuzzerKind::Gamma, &mut r1).unwrap()
        })
        .collect();
    let singles: Vec<f64> =
        (0..M).map(|_| fuzz_count(16.0, FuzzerKind::Gamma, &mut r2).unwrap()).collect();
    let d = ks_statistic(sums, singles);
    // Asymptotic two-sample critical value at alpha = 0.001.
    let c_alpha = (-(0.001f64 / 2.0).ln() / 2.0).sqrt();
    let critical = c_alpha * (2.0 / M as f64).sqrt();
    parts.push(format!("KS D={d:.5} crit={critical:.5}"));
    if d > critical {
        problems.push(format!("additivity rejected: D={d} > {critical}"));
    }
    if problems.is_empty() { Ok(parts.join("; ")) } else { Err(problems.join("; ")) }
}

fn bayes_update() -> Result<String, String> {
    let (contest, _) = two_way("A", ["A", "B"], 100);
    let prior: BTreeMap<String, f64> = [("A".into(), 5.0), ("B".into(), 6.0)].into();
    let prior = Hyperparameters::new(&contest, "x", &prior).unwrap();
    let sample = VoteTally::from_counts(&contest, [("A", 10.0), ("B", 15.0)]).unwrap();
    let post = update_posterior(&prior, &sample).map_err(|e| e.to_string())?;
    let got = (post.get("A"), post.get("B"));
    if got == (15.0, 21.0) {
        Ok("(5, 6) + (10, 15) = (15, 21)".into())
    } else {
        Err(format!("got {got:?}"))
    }
}

fn nuts() -> Result<String, String> {
    let f = nuts_in_cans(Some(true));
    if f == Fraction::new(2, 3) && f.denominator == 3 {
        Ok(format!("P(majority nuts | first can has a nut) = {f}"))
    } else {
        Err(format!("got {f}"))
    }
}

fn full_recount() -> Result<String, String> {
    let mut checked = 0;
    for n in 1..=8u64 {
        for a in 0..=n {
            for reported in ["A", "B"] {
                let truth = if 2 * a > n || (2 * a == n && reported == "A") { "A" } else { "B" };
                let correct = truth == reported;

                // Engine: the whole stratum is sample.
                let other = if reported == "A" { "B" } else { "A" };
                let (contest, evaluator) = two_way(reported, [reported, other], n);
                let stratum = polling(&contest, "x", a, n - a, n);
                let est = measure_risk(
                    &[stratum],
                    &contest,
                    &evaluator,
                    &RiskConfig::with_trials(1000),
                    &TrialStreams::from_u64(n * 100 + a),
                )
                .map_err(|e| e.to_string())?;
                let want_risk = if correct { 0.0 } else { 1.0 };
                if est.risk != want_risk {
                    return Err(format!("n={n} a={a} reported={reported}: risk {}", est.risk));
                }

                // Orchestrator: a population this small is counted in full.
                let mut spec = TwoCandidateSpec::new(n, a, reported, n * 31 + a);
                spec.trials = 1000;
                let election = two_candidate_election(&spec).map_err(|e| e.to_string())?;
                let run = run_audit(&election, Execution::Parallel).map_err(|e| e.to_string())?;
                let result = &run.state.rounds.last().unwrap().results[sim::CONTEST];
                let ok = run.status(sim::CONTEST) == ContestStatus::FullHandCountComplete
                    && run.sample_size == n
                    && result.estimate.risk == want_risk
                    && result.hand_count_outcome == Some(Outcome::single(truth))
                    && result.reported_outcome_confirmed == Some(correct);
                if !ok {
                    return Err(format!("n={n} a={a} reported={reported}: {result:?}"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} elections, engine and orchestrator"))
}

fn stratification() -> Result<String, String> {
    const N: u64 = 2000;
    const TRIALS: u64 = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for config in 0..20u64 {
        let s1 = rng.random_range(400..=1600u64);
        let s2 = N - s1;
        let share = rng.random_range(0.51..0.56);
        let n1 = (s1 as f64 / 10.0).round() as u64;
        let n2 = 200 - n1;
        let a1 = (n1 as f64 * share).round() as u64;
        let a2 = (n2 as f64 * share).round() as u64;
        let (contest, evaluator) = two_way("A", ["A", "B"], N);
        let config_rc = RiskConfig::with_trials(TRIALS);
        let streams = TrialStreams::from_u64(1000 + config);
        let whole = measure_risk(
            &[polling(&contest, "all", a1 + a2, 200 - a1 - a2, N)],
            &contest,
            &evaluator,
            &config_rc,
            &streams.child("whole"),
        )
        .map_err(|e| e.to_string())?;
        let split = measure_risk(
            &[polling(&contest, "s1", a1, n1 - a1, s1), polling(&contest, "s2", a2, n2 - a2, s2)],
            &contest,
            &evaluator,
            &config_rc,
            &streams.child("split"),
        )
        .map_err(|e| e.to_string())?;
        let var = |p: f64| (p * (1.0 - p)).max(1.0 / TRIALS as f64) / TRIALS as f64;
        let sigma = (var(whole.risk) + var(split.risk)).sqrt();
        let z = (whole.risk - split.risk).abs() / sigma;
        worst = worst.max(z);
        if z > 3.0 {
            return Err(format!(
                "config {config} (strata {s1}/{s2}, share {share:.3}): whole {} split {} z={z:.2}",
                whole.risk, split.risk
            ));
        }
    }

    let (contest, evaluator) = two_way("A", ["A", "B"], 500);
    let stratum = polling(&contest, "x", 27, 23, 500);
    let streams = TrialStreams::from_u64(99);
    let mut config = RiskConfig::with_trials(20_000);
    let mut estimates = Vec::new();
    for execution in [Execution::Sequential, Execution::Parallel] {
        config.execution = execution;
        estimates.push(
            measure_risk(std::slice::from_ref(&stratum), &contest, &evaluator, &config, &streams)
                .map_err(|e| e.to_string())?,
        );
    }
    let reference = measure_risk_reference(&stratum, &contest, &evaluator, 20_000, &streams)
        .map_err(|e| e.to_string())?;
    let bitwise = estimates.iter().all(|e| {
        e.win_counts == reference.win_counts && e.risk.to_bits() == reference.risk.to_bits()
    });
    if !bitwise {
        return Err(format!("single stratum {:?} vs plain {:?}", estimates[0], reference));
    }
    Ok(format!(
        "20 configs, worst |z|={worst:.2}; single stratum bitwise equal to plain path (risk {})",
        reference.risk
    ))
}

fn soundness() -> Result<String, String> {
    let start = Instant::now();
    let wrong = 200u64;
    let mut early = 0;
    for i in 0..wrong {
        // Reported A, true margin from -2% down to -20%.
        let margin = -0.02 - 0.18 * i as f64 / (wrong - 1) as f64;
        let votes_for_a = (2000.0 * (0.5 + margin / 2.0)).round() as u64;
        let spec = TwoCandidateSpec::new(2000, votes_for_a, "A", 10_000 + i);
        let election = two_candidate_election(&spec).map_err(|e| e.to_string())?;
        let run = run_audit(&election, Execution::Parallel).map_err(|e| e.to_string())?;
        if run.status(sim::CONTEST) == ContestStatus::Accepted {
            early += 1;
        }
    }
    let rate = early as f64 / wrong as f64;

    let mut fractions = Vec::new();
    for seed in 0..50u64 {
        let spec = TwoCandidateSpec::new(10_000, 7000, "A", 20_000 + seed);
        let election = two_candidate_election(&spec).map_err(|e| e.to_string())?;
        let run = run_audit(&election, Execution::Parallel).map_err(|e| e.to_string())?;
        if run.status(sim::CONTEST) != ContestStatus::Accepted {
            return Err(format!("landslide seed {seed} not accepted"));
        }
        fractions.push(run.sample_size as f64 / 10_000.0);
    }
    fractions.sort_by(f64::total_cmp);
    let median = (fractions[24] + fractions[25]) / 2.0;
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "wrong-outcome early acceptance {early}/{wrong} = {rate:.3}; landslide median audited fraction {:.2}%; {elapsed:.0}s",
        100.0 * median
    );
    if rate <= 0.08 && median <= 0.05 && elapsed <= 900.0 { Ok(detail) } else { Err(detail) }
}

fn comparison_beats_polling() -> Result<String, String> {
    let mut totals = [0u64; 2];
    for seed in 0..50u64 {
        for (slot, with_cvrs) in [(0, false), (1, true)] {
            let mut spec = TwoCandidateSpec::new(10_000, 5500, "A", 30_000 + seed);
            spec.with_cvrs = with_cvrs;
            let election = two_candidate_election(&spec).map_err(|e| e.to_string())?;
            let run = run_audit(&election, Execution::Parallel).map_err(|e| e.to_string())?;
            totals[slot] += run.sample_size;
        }
    }
    let (polling, comparison) = (totals[0] as f64 / 50.0, totals[1] as f64 / 50.0);
    let detail = format!("mean sample: comparison {comparison:.1} vs polling {polling:.1}");
    if comparison < polling { Ok(detail) } else { Err(detail) }
}

fn replay_one(election: &sim::SyntheticElection) -> Result<(usize, u64), String> {
    let run = run_audit(election, Execution::Parallel).map_err(|e| e.to_string())?;
    let exported = run.state.export();
    let back: AuditState = serde_json::from_str(&exported).map_err(|e| e.to_string())?;
    if back.export() != exported {
        return Err("export does not survive a parse".into());
    }
    let report = replay_with(&back, Execution::Sequential).map_err(|e| e.to_string())?;
    if !report.ok() || report.rounds_checked != run.rounds as usize {
        return Err(format!("{report:?}"));
    }
    Ok((report.rounds_checked, run.sample_size))
}

fn replay_determinism() -> Result<String, String> {
    let mut spec = TwoCandidateSpec::new(3000, 1560, "A", 41);
    spec.trials = 20_000;
    let polling = two_candidate_election(&spec).map_err(|e| e.to_string())?;
    let (rounds, ballots) = replay_one(&polling)?;
    if rounds < 3 {
        return Err(format!("close race finished in {rounds} rounds"));
    }

    spec.with_cvrs = true;
    let mut comparison = two_candidate_election(&spec).map_err(|e| e.to_string())?;
    // Misreport some ballots so the comparison strata carry discrepancies.
    if let Some(Source::Inline(file)) = comparison.config.collections[0].cvrs.as_mut() {
        for record in file.records.iter_mut().step_by(7) {
            record.votes.insert(sim::CONTEST.into(), "A".into());
        }
    }
    let (c_rounds, c_ballots) = replay_one(&comparison)?;
    Ok(format!(
        "polling {rounds} rounds/{ballots} ballots, comparison {c_rounds} rounds/{c_ballots} ballots: selections and estimates identical"
    ))
}

fn main() {
    let mut outcomes = Outcomes { passed: 0, failed: Vec::new() };
    run(&mut outcomes, "worked-example-risk", worked_example);
    run(&mut outcomes, "prng-bit-exactness", prng_vectors);
    run(&mut outcomes, "fuzzer-moments", fuzzer_moments);
    run(&mut outcomes, "bayes-update", bayes_update);
    run(&mut outcomes, "nuts-in-cans", nuts);
    run(&mut outcomes, "full-recount-correctness", full_recount);
    run(&mut outcomes, "stratification-consistency", stratification);
    run(&mut outcomes, "soundness", soundness);
    run(&mut outcomes, "comparison-beats-polling", comparison_beats_polling);
    run(&mut outcomes, "replay-determinism", replay_determinism);
    let total = outcomes.passed + outcomes.failed.len();
    println!("acceptance: {}/{} criteria passed", outcomes.passed, total);
    if !outcomes.failed.is_empty() {
        println!("failed: {}", outcomes.failed.join(", "));
        std::process::exit(1);
    }
}
