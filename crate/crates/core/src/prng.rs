//! Replayable randomness.
//!
//! Ballot selection runs SHA-256 in counter mode: the `i`-th value is the
//! hash of the ASCII string `"<seed>,<i>"` read as a big-endian 256-bit
//! integer, counting from 1. Multi-contest scheduling instead sorts ballots by
//! a per-address key `SHA256("<seed>,<address>")`. Monte Carlo trials draw
//! from ChaCha streams keyed off the same seed so every risk estimate can be
//! recomputed by anyone holding the seed.

use std::collections::HashSet;
use std::fmt;

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::election::{BallotAddress, BallotManifest};
use crate::error::{AuditError, Result};

/// Width of the zero-padded decimal rendering of a hash value.
pub const DECIMAL_WIDTH: usize = 78;

/// Decimal digits from a public randomness ceremony (e.g. 20+ rolled dice).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AuditSeed(String);

impl AuditSeed {
    pub fn new(digits: impl Into<String>) -> Result<Self> {
        let digits = digits.into();
        if digits.is_empty() {
            return Err(AuditError::InvalidSeed("seed is empty".into()));
        }
        if let Some(c) = digits.chars().find(|c| !c.is_ascii_digit()) {
            return Err(AuditError::InvalidSeed(format!(
                "seed may only contain decimal digits, found {c:?}"
            )));
        }
        Ok(Self(digits))
    }

    pub fn digits(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AuditSeed {
    type Error = AuditError;
    fn try_from(s: String) -> Result<Self> {
        AuditSeed::new(s)
    }
}

impl From<AuditSeed> for String {
    fn from(seed: AuditSeed) -> String {
        seed.0
    }
}

impl fmt::Display for AuditSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A 256-bit SHA-256 output, interpreted big-endian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashValue(pub [u8; 32]);

impl HashValue {
    pub fn of(input: &[u8]) -> Self {
        HashValue(Sha256::digest(input).into())
    }

    pub fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }

    /// Decimal rendering zero-padded to 78 digits.
    pub fn to_decimal(&self) -> String {
        format!("{:0>width$}", self.to_biguint(), width = DECIMAL_WIDTH)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// `self mod m` without going through a bignum.
    pub fn rem(&self, m: u64) -> u64 {
        let m = m as u128;
        self.0
            .iter()
            .fold(0u128, |r, &b| ((r << 8) | b as u128) % m) as u64
    }
}

/// SHA-256 counter-mode stream. `counter` is the next value to use.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrngStream {
    pub seed: AuditSeed,
    pub counter: u64,
}

impl PrngStream {
    pub fn new(seed: AuditSeed) -> Self {
        Self { seed, counter: 1 }
    }

    pub fn with_counter(seed: AuditSeed, counter: u64) -> Self {
        Self { seed, counter }
    }

    /// Hash of `"<seed>,<counter>"`; advances the counter.
    pub fn next_value(&mut self) -> HashValue {
        let value = HashValue::of(format!("{},{}", self.seed, self.counter).as_bytes());
        self.counter += 1;
        value
    }

    /// 1-based index: `(value mod population) + 1`. Consumes one counter value.
    pub fn draw_index(&mut self, population: u64) -> Result<u64> {
        if population == 0 {
            return Err(AuditError::EmptyPopulation);
        }
        Ok(self.next_value().rem(population) + 1)
    }
}

/// One counter value spent by the sampler, kept for the public log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub counter: u64,
    pub purpose: String,
    pub index: u64,
    pub address: BallotAddress,
    /// False when the draw hit an already-picked ballot and was retried.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub addresses: Vec<BallotAddress>,
    pub draws: Vec<DrawRecord>,
}

/// Addresses of one or more collections in manifest order; index `i` (1-based)
/// is the `i`-th ballot.
#[derive(Clone, Debug)]
pub struct Population {
    addresses: Vec<BallotAddress>,
}

impl Population {
    pub fn from_manifests<'a>(manifests: impl IntoIterator<Item = &'a BallotManifest>) -> Self {
        Self {
            addresses: manifests.into_iter().flat_map(|m| m.addresses()).collect(),
        }
    }

    pub fn len(&self) -> u64 {
        self.addresses.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&BallotAddress> {
        index
            .checked_sub(1)
            .and_then(|i| self.addresses.get(i as usize))
    }
}

/// Draws `k` fresh ballots by repeating [`PrngStream::draw_index`] until an
/// unpicked location turns up. Every counter value consumed is logged,
/// rejected retries included.
pub fn sample_without_replacement(
    stream: &mut PrngStream,
    population: &Population,
    k: u64,
    already_drawn: &HashSet<BallotAddress>,
    purpose: &str,
) -> Result<Selection> {
    let drawn_here = population
        .addresses
        .iter()
        .filter(|a| already_drawn.contains(*a))
        .count() as u64;
    let available = population.len() - drawn_here;
    if k > available {
        return Err(AuditError::PopulationExhausted {
            requested: k,
            available,
        });
    }
    let mut picked: HashSet<&BallotAddress> = HashSet::new();
    let mut addresses = Vec::with_capacity(k as usize);
    let mut draws = Vec::new();
    while (addresses.len() as u64) < k {
        let counter = stream.counter;
        let index = stream.draw_index(population.len())?;
        let address = population.get(index).expect("index within population");
        let accepted = !already_drawn.contains(address) && picked.insert(address);
        if accepted {
            addresses.push(address.clone());
        }
        draws.push(DrawRecord {
            counter,
            purpose: purpose.to_owned(),
            index,
            address: address.clone(),
            accepted,
        });
    }
    Ok(Selection { addresses, draws })
}

/// `SHA256("<seed>,<canonical address>")`.
pub fn ballot_key(seed: &AuditSeed, address: &BallotAddress) -> HashValue {
    HashValue::of(format!("{seed},{address}").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedBallot {
    pub address: BallotAddress,
    #[serde(with = "hex_key")]
    pub key: HashValue,
}

mod hex_key {
    use super::HashValue;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &HashValue, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&key.to_hex())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<HashValue, D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(HashValue(out))
    }
}

/// Total order on every ballot of every collection: ascending ballot key.
/// Ballots with smaller keys are examined first.
pub fn global_ballot_order<'a>(
    manifests: impl IntoIterator<Item = &'a BallotManifest>,
    seed: &AuditSeed,
) -> Result<Vec<OrderedBallot>> {
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    for manifest in manifests {
        for address in manifest.addresses() {
            if !seen.insert(address.clone()) {
                return Err(AuditError::DuplicateAddress(address.to_string()));
            }
            order.push(OrderedBallot {
                key: ballot_key(seed, &address),
                address,
            });
        }
    }
    order.sort_by(|a, b| a.key.cmp(&b.key).then_with(|| a.address.cmp(&b.address)));
    Ok(order)
}

/// 32-byte key `SHA256("<seed>,<label>")` for deriving independent streams.
pub fn derive_key(seed: &AuditSeed, label: &str) -> [u8; 32] {
    HashValue::of(format!("{seed},{label}").as_bytes()).0
}

/// Per-trial random streams. Trial `i` always gets the same ChaCha stream, so
/// Monte Carlo results do not depend on how trials are split across workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialStreams {
    key: [u8; 32],
}

impl TrialStreams {
    pub fn new(key: [u8; 32]) -> Self {
        Self { key }
    }

    pub fn from_seed(seed: &AuditSeed, label: &str) -> Self {
        Self::new(derive_key(seed, label))
    }

    /// Convenience for tests and simulations.
    pub fn from_u64(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self::new(HashValue::of(&key).0)
    }

    pub fn trial(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }

    /// An independent family, e.g. one per planner repetition.
    pub fn child(&self, label: &str) -> TrialStreams {
        let mut input = self.key.to_vec();
        input.extend_from_slice(label.as_bytes());
        Self::new(HashValue::of(&input).0)
    }
}
