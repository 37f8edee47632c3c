//! Tally fuzzing and posterior sampling.
//!
//! Replacing each count `k` of a posterior by an independent Gamma(k, 1)
//! variate and normalizing yields a Dirichlet draw; drawing the nonsample
//! from the resulting multinomial completes one test nonsample tally. The
//! other fuzzer kinds are cruder stand-ins with the same mean (and, except
//! negative-binomial, the same variance).
//!
//! Every function here comes in a map-level form over [`VoteTally`] and a
//! dense form over slices used by the risk engine. Both consume the random
//! stream identically when the map keys are the contest's sorted choice ids.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Hypergeometric, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::bayes::StratumModel;
use crate::election::VoteTally;
use crate::error::{AuditError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuzzerKind {
    /// Gamma(k, 1): mean k, variance k.
    #[default]
    Gamma,
    /// Each ballot's weight becomes 0 or 2 on a fair coin.
    DoubleOrNothing,
    /// Tally a random half of the sample and double it.
    ShuffleAndCut,
    /// Normal(k, k); may go negative.
    Normal,
    /// Poisson(k).
    Poisson,
    /// Negative binomial(k, 1/2): mean k, variance 2k.
    NegativeBinomial,
    /// Resample the sample with replacement.
    Bootstrap,
}

impl FuzzerKind {
    pub fn name(self) -> &'static str {
        match self {
            FuzzerKind::Gamma => "gamma",
            FuzzerKind::DoubleOrNothing => "double-or-nothing",
            FuzzerKind::ShuffleAndCut => "shuffle-and-cut",
            FuzzerKind::Normal => "normal",
            FuzzerKind::Poisson => "poisson",
            FuzzerKind::NegativeBinomial => "negative-binomial",
            FuzzerKind::Bootstrap => "bootstrap",
        }
    }

    /// Kinds that resample ballots and therefore need whole counts.
    pub fn needs_integral_counts(self) -> bool {
        matches!(
            self,
            FuzzerKind::DoubleOrNothing | FuzzerKind::ShuffleAndCut | FuzzerKind::Bootstrap
        )
    }

    /// Kinds defined on a whole tally rather than count by count.
    pub fn is_tally_level(self) -> bool {
        matches!(self, FuzzerKind::ShuffleAndCut | FuzzerKind::Bootstrap)
    }
}

fn check_count(k: f64) -> Result<()> {
    if k.is_finite() && k >= 0.0 {
        Ok(())
    } else {
        Err(AuditError::InvalidCount(k))
    }
}

fn whole(k: f64, kind: FuzzerKind) -> Result<u64> {
    if k.fract() == 0.0 {
        Ok(k as u64)
    } else {
        Err(AuditError::NonIntegralCount {
            kind: kind.name(),
            value: k,
        })
    }
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("0 < p < 1").sample(rng)
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda > 0.0 {
        Poisson::new(lambda).expect("positive finite mean").sample(rng)
    } else {
        0.0
    }
}

/// Fuzzes a single count. Shape 0 always fuzzes to exactly 0.
pub fn fuzz_count<R: Rng + ?Sized>(k: f64, kind: FuzzerKind, rng: &mut R) -> Result<f64> {
    check_count(k)?;
    if kind.is_tally_level() {
        return Err(AuditError::TallyLevelFuzzer(kind.name()));
    }
    if k == 0.0 {
        // Integer-valued kinds still validate (trivially) and consume nothing.
        return Ok(0.0);
    }
    Ok(match kind {
        FuzzerKind::Gamma => Gamma::new(k, 1.0).expect("positive shape").sample(rng),
        FuzzerKind::DoubleOrNothing => 2.0 * binomial(whole(k, kind)?, 0.5, rng) as f64,
        FuzzerKind::Normal => Normal::new(k, k.sqrt()).expect("finite sd").sample(rng),
        FuzzerKind::Poisson => poisson(k, rng),
        // Gamma-Poisson mixture: NB(k, 1/2), defined for real k.
        FuzzerKind::NegativeBinomial => {
            let lambda: f64 = Gamma::new(k, 1.0).expect("positive shape").sample(rng);
            poisson(lambda, rng)
        }
        FuzzerKind::ShuffleAndCut | FuzzerKind::Bootstrap => unreachable!(),
    })
}

/// Dense fuzzing of a whole tally into `out`.
pub(crate) fn fuzz_dense<R: Rng + ?Sized>(
    counts: &[f64],
    kind: FuzzerKind,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    match kind {
        FuzzerKind::Bootstrap => {
            let whole_counts = counts.iter().map(|&k| check_count(k).and_then(|_| whole(k, kind)));
            let whole_counts: Vec<u64> = whole_counts.collect::<Result<_>>()?;
            let size: u64 = whole_counts.iter().sum();
            if size == 0 {
                out.fill(0.0);
                return Ok(());
            }
            let probs: Vec<f64> = whole_counts.iter().map(|&c| c as f64 / size as f64).collect();
            multinomial_into(&probs, size, rng, out);
        }
        FuzzerKind::ShuffleAndCut => {
            let whole_counts = counts.iter().map(|&k| check_count(k).and_then(|_| whole(k, kind)));
            let whole_counts: Vec<u64> = whole_counts.collect::<Result<_>>()?;
            let mut population: u64 = whole_counts.iter().sum();
            // The tallied half takes the odd ballot.
            let mut draws = population.div_ceil(2);
            for (slot, &c) in out.iter_mut().zip(&whole_counts) {
                let taken = if draws == 0 || c == 0 {
                    0
                } else if c == population {
                    draws
                } else {
                    Hypergeometric::new(population, c, draws)
                        .expect("valid hypergeometric parameters")
                        .sample(rng)
                };
                *slot = 2.0 * taken as f64;
                population -= c;
                draws -= taken;
            }
        }
        _ => {
            for (slot, &k) in out.iter_mut().zip(counts) {
                *slot = fuzz_count(k, kind, rng)?;
            }
        }
    }
    Ok(())
}

/// Fuzzes every entry of a tally (or a posterior viewed as one). The result
/// is generally non-integral and need not keep the original sum.
pub fn fuzz_tally<R: Rng + ?Sized>(
    tally: &VoteTally,
    kind: FuzzerKind,
    rng: &mut R,
) -> Result<VoteTally> {
    let counts: Vec<f64> = tally.counts.values().copied().collect();
    let mut out = vec![0.0; counts.len()];
    fuzz_dense(&counts, kind, rng, &mut out)?;
    Ok(VoteTally {
        contest: tally.contest.clone(),
        counts: tally.counts.keys().cloned().zip(out).collect(),
    })
}

/// Probabilities of one test multinomial: nonnegative and summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultinomialProbabilities {
    pub contest: String,
    pub probs: BTreeMap<String, f64>,
}

impl MultinomialProbabilities {
    pub fn new(contest: &str, probs: BTreeMap<String, f64>) -> Result<Self> {
        if let Some(&bad) = probs.values().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(AuditError::InvalidCount(bad));
        }
        let sum: f64 = probs.values().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(AuditError::InvalidCount(sum));
        }
        Ok(Self {
            contest: contest.to_owned(),
            probs,
        })
    }

    pub fn get(&self, choice: &str) -> f64 {
        self.probs.get(choice).copied().unwrap_or(0.0)
    }
}

/// Normalizes fuzzed values in place. Negative entries (normal fuzzer) are
/// clamped to 0 first.
pub(crate) fn normalize_in_place(values: &mut [f64]) -> Result<()> {
    let mut sum = 0.0;
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        sum += *v;
    }
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(AuditError::DegenerateTally);
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Fuzzed tally to multinomial probabilities.
pub fn to_multinomial(fuzzed: &VoteTally) -> Result<MultinomialProbabilities> {
    let mut values: Vec<f64> = fuzzed.counts.values().copied().collect();
    normalize_in_place(&mut values)?;
    Ok(MultinomialProbabilities {
        contest: fuzzed.contest.clone(),
        probs: fuzzed.counts.keys().cloned().zip(values).collect(),
    })
}

/// Multinomial draw of `size` items by conditional binomials; the last
/// positive-probability cell absorbs the remainder so counts sum to `size`.
pub(crate) fn multinomial_into<R: Rng + ?Sized>(
    probs: &[f64],
    size: u64,
    rng: &mut R,
    out: &mut [f64],
) {
    out.fill(0.0);
    let Some(last) = probs.iter().rposition(|&p| p > 0.0) else {
        return;
    };
    let mut remaining = size;
    let mut mass: f64 = probs[..=last].iter().sum();
    for i in 0..last {
        if remaining == 0 {
            return;
        }
        let p = probs[i];
        if p > 0.0 {
            let x = binomial(remaining, (p / mass).min(1.0), rng);
            out[i] = x as f64;
            remaining -= x;
        }
        mass -= p;
    }
    out[last] = remaining as f64;
}

/// Simulates drawing `size` ballots from the multinomial.
pub fn draw_multinomial_tally<R: Rng + ?Sized>(
    probs: &MultinomialProbabilities,
    size: u64,
    rng: &mut R,
) -> VoteTally {
    let p: Vec<f64> = probs.probs.values().copied().collect();
    let mut out = vec![0.0; p.len()];
    multinomial_into(&p, size, rng, &mut out);
    VoteTally {
        contest: probs.contest.clone(),
        counts: probs.probs.keys().cloned().zip(out).collect(),
    }
}

/// One simulated completion of a stratum's unaudited ballots: fuzz the
/// posterior, normalize, and draw the nonsample from the multinomial.
pub fn generate_test_nonsample_tally<R: Rng + ?Sized>(
    model: &StratumModel,
    rng: &mut R,
) -> Result<VoteTally> {
    let posterior = model.posterior.as_tally();
    if model.nonsample_size == 0 {
        let mut zero = posterior;
        zero.counts.values_mut().for_each(|v| *v = 0.0);
        return Ok(zero);
    }
    model.check_generative()?;
    let fuzzed = fuzz_tally(&posterior, model.fuzzer, rng)?;
    let probs = to_multinomial(&fuzzed).map_err(|_| AuditError::DegeneratePosterior {
        stratum: model.stratum.clone(),
        nonsample: model.nonsample_size,
    })?;
    Ok(draw_multinomial_tally(&probs, model.nonsample_size, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn tally(pairs: &[(&str, f64)]) -> VoteTally {
        VoteTally {
            contest: "c".into(),
            counts: pairs.iter().map(|&(k, v)| (k.to_owned(), v)).collect(),
        }
    }

    #[test]
    fn zero_count_fuzzes_to_zero() {
        let mut r = rng();
        for kind in [
            FuzzerKind::Gamma,
            FuzzerKind::DoubleOrNothing,
            FuzzerKind::Normal,
            FuzzerKind::Poisson,
            FuzzerKind::NegativeBinomial,
        ] {
            assert_eq!(fuzz_count(0.0, kind, &mut r).unwrap(), 0.0);
        }
    }

    #[test]
    fn negative_and_nonintegral_counts_rejected() {
        let mut r = rng();
        assert!(matches!(
            fuzz_count(-1.0, FuzzerKind::Gamma, &mut r),
            Err(AuditError::InvalidCount(_))
        ));
        assert!(matches!(
            fuzz_count(1.5, FuzzerKind::DoubleOrNothing, &mut r),
            Err(AuditError::NonIntegralCount { .. })
        ));
        assert!(matches!(
            fuzz_count(3.0, FuzzerKind::Bootstrap, &mut r),
            Err(AuditError::TallyLevelFuzzer(_))
        ));
    }

    #[test]
    fn double_or_nothing_gives_even_values_in_range() {
        let mut r = rng();
        for _ in 0..1000 {
            let v = fuzz_count(7.0, FuzzerKind::DoubleOrNothing, &mut r).unwrap();
            assert!(v >= 0.0 && v <= 14.0 && v % 2.0 == 0.0);
        }
    }

    #[test]
    fn exponential_weights_view() {
        // Per-ballot weights summed by choice: A,A,B,A,B.
        let weights = [0.583, 0.311, 2.439, 0.554, 1.640];
        let votes = ["A", "A", "B", "A", "B"];
        let mut a = 0.0;
        let mut b = 0.0;
        for (w, v) in weights.iter().zip(votes) {
            if v == "A" { a += w } else { b += w }
        }
        assert!((a - 1.448f64).abs() < 1e-9);
        assert!((b - 4.079f64).abs() < 1e-9);
        let probs = to_multinomial(&tally(&[("A", a), ("B", b)])).unwrap();
        assert!(probs.get("B") > probs.get("A"));
    }

    #[test]
    fn all_zero_gamma_fuzz_stays_zero() {
        let fuzzed = fuzz_tally(&tally(&[("A", 0.0), ("B", 0.0)]), FuzzerKind::Gamma, &mut rng())
            .unwrap();
        assert!(fuzzed.counts.values().all(|&v| v == 0.0));
    }

    #[test]
    fn to_multinomial_examples() {
        let p = to_multinomial(&tally(&[("A", 26.0), ("B", 25.2)])).unwrap();
        assert_eq!(format!("{:.3}", p.get("A")), "0.508");
        assert_eq!(format!("{:.3}", p.get("B")), "0.492");
        let p = to_multinomial(&tally(&[("A", 4.0), ("B", 0.0)])).unwrap();
        assert_eq!((p.get("A"), p.get("B")), (1.0, 0.0));
        assert!(matches!(
            to_multinomial(&tally(&[("A", 0.0), ("B", 0.0)])),
            Err(AuditError::DegenerateTally)
        ));
        let clamped = to_multinomial(&tally(&[("A", -2.0), ("B", 3.0)])).unwrap();
        assert_eq!(clamped.get("A"), 0.0);
    }

    #[test]
    fn multinomial_edge_cases() {
        let mut r = rng();
        let half = MultinomialProbabilities::new(
            "c",
            [("A".to_owned(), 0.508), ("B".to_owned(), 0.492)].into_iter().collect(),
        )
        .unwrap();
        assert_eq!(draw_multinomial_tally(&half, 0, &mut r).total(), 0.0);
        for _ in 0..100 {
            assert_eq!(draw_multinomial_tally(&half, 200, &mut r).total(), 200.0);
        }
        let sure = MultinomialProbabilities::new(
            "c",
            [("A".to_owned(), 1.0), ("B".to_owned(), 0.0)].into_iter().collect(),
        )
        .unwrap();
        let t = draw_multinomial_tally(&sure, 200, &mut r);
        assert_eq!((t.get("A"), t.get("B")), (200.0, 0.0));
        assert!(MultinomialProbabilities::new("c", [("A".to_owned(), 0.7)].into_iter().collect())
            .is_err());
    }

    #[test]
    fn multinomial_sums_exactly_with_awkward_probabilities() {
        let mut r = rng();
        let probs = [0.1, 0.2, 0.3, 0.0, 0.4 - 1e-17, 0.0];
        let mut out = [0.0; 6];
        for size in [1u64, 7, 1000, 123_457] {
            multinomial_into(&probs, size, &mut r, &mut out);
            assert_eq!(out.iter().sum::<f64>(), size as f64);
            assert_eq!(out[3], 0.0);
            assert_eq!(out[5], 0.0);
        }
    }

    #[test]
    fn shuffle_and_cut_halves_then_doubles() {
        let mut r = rng();
        let mut out = [0.0; 2];
        for _ in 0..200 {
            fuzz_dense(&[3.0, 4.0], FuzzerKind::ShuffleAndCut, &mut r, &mut out).unwrap();
            // ceil(7/2) = 4 ballots tallied, doubled.
            assert_eq!(out[0] + out[1], 8.0);
            assert!(out[0] <= 6.0 && out[1] <= 8.0);
        }
        assert!(fuzz_dense(&[0.5, 1.0], FuzzerKind::ShuffleAndCut, &mut r, &mut out).is_err());
    }

    #[test]
    fn bootstrap_keeps_sample_size() {
        let mut r = rng();
        let mut out = [0.0; 3];
        for _ in 0..200 {
            fuzz_dense(&[5.0, 0.0, 9.0], FuzzerKind::Bootstrap, &mut r, &mut out).unwrap();
            assert_eq!(out.iter().sum::<f64>(), 14.0);
            assert_eq!(out[1], 0.0);
        }
    }
}
