//! Smart-meter readings and per-region billing aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_WINDOW_MS: u64 = 60_000;

/// Wall-clock time in milliseconds since the Unix epoch, with sub-millisecond precision.
pub fn now_ms() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64() * 1000.0)
        .unwrap_or(0.0)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("schema violation: {0}")]
pub struct SchemaError(pub String);

/// Non-negative energy with milliwatt-hour resolution.
///
/// Stored as an integer so totals are exact regardless of summation order; on
/// the wire it is a plain JSON number of watt-hours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Energy(u64);

impl Energy {
    pub const ZERO: Energy = Energy(0);

    pub const fn from_milli_wh(milli: u64) -> Self {
        Energy(milli)
    }

    pub fn from_wh(wh: f64) -> Result<Self, SchemaError> {
        if !wh.is_finite() || wh < 0.0 {
            return Err(SchemaError(format!("consumption must be a non-negative number, got {wh}")));
        }
        let milli = (wh * 1000.0).round();
        if milli > (1u64 << 53) as f64 {
            return Err(SchemaError(format!("consumption {wh} out of range")));
        }
        Ok(Energy(milli as u64))
    }

    pub const fn milli_wh(self) -> u64 {
        self.0
    }

    pub fn wh(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn checked_add(self, other: Energy) -> Option<Energy> {
        self.0.checked_add(other.0).map(Energy)
    }
}

impl std::ops::Add for Energy {
    type Output = Energy;
    fn add(self, rhs: Energy) -> Energy {
        Energy(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Energy {
    fn sum<I: Iterator<Item = Energy>>(iter: I) -> Energy {
        iter.fold(Energy::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.wh())
    }
}

impl FromStr for Energy {
    type Err = SchemaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wh: f64 = s
            .trim()
            .parse()
            .map_err(|_| SchemaError(format!("not a number: {s:?}")))?;
        Energy::from_wh(wh)
    }
}

impl Serialize for Energy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.wh())
    }
}

impl<'de> Deserialize<'de> for Energy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wh = f64::deserialize(d)?;
        Energy::from_wh(wh).map_err(de::Error::custom)
    }
}

/// One reading. Serialized with compact keys `{"p","r","c","s","t"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measurement {
    #[serde(rename = "p")]
    pub producer_id: String,
    #[serde(rename = "r")]
    pub region: String,
    #[serde(rename = "c")]
    pub consumption_wh: Energy,
    #[serde(rename = "s")]
    pub seq: u64,
    #[serde(rename = "t")]
    pub produced_at: f64,
}

impl Measurement {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("measurement serializes")
    }

    /// Parses and validates a JSON payload.
    pub fn from_json(bytes: &[u8]) -> Result<Self, SchemaError> {
        let m: Measurement =
            serde_json::from_slice(bytes).map_err(|e| SchemaError(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self, SchemaError> {
        let m = Measurement::deserialize(value).map_err(|e| SchemaError(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<(), SchemaError> {
        if self.producer_id.is_empty() || self.region.is_empty() {
            return Err(SchemaError("producer and region must be non-empty".into()));
        }
        if !self.produced_at.is_finite() || self.produced_at < 0.0 {
            return Err(SchemaError("produced_at must be a non-negative timestamp".into()));
        }
        Ok(())
    }
}

/// Delivery timing of one measurement, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    pub producer_id: String,
    pub region: String,
    pub seq: u64,
    pub produced_at: f64,
    pub consumed_at: f64,
    pub latency_ms: f64,
}

impl CycleTiming {
    pub fn new(m: &Measurement, consumed_at: f64) -> Self {
        Self {
            producer_id: m.producer_id.clone(),
            region: m.region.clone(),
            seq: m.seq,
            produced_at: m.produced_at,
            consumed_at,
            latency_ms: consumed_at - m.produced_at,
        }
    }
}

/// Billing total for one region over one tumbling window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub region: String,
    pub window_start: u64,
    pub window_end: u64,
    pub total_wh: Energy,
    pub contributing: BTreeMap<String, u64>,
    pub duplicates_discarded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingest {
    Accepted,
    Duplicate,
}

/// Sums distinct `(producer_id, seq)` readings into tumbling windows keyed by
/// `produced_at`.
#[derive(Debug)]
pub struct Aggregator {
    window_ms: u64,
    seen: HashSet<(String, u64)>,
    windows: BTreeMap<(String, u64), AggregateReport>,
}

impl Default for Aggregator {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_MS)
    }
}

impl Aggregator {
    pub fn new(window_ms: u64) -> Self {
        assert!(window_ms > 0, "window must be positive");
        Self {
            window_ms,
            seen: HashSet::new(),
            windows: BTreeMap::new(),
        }
    }

    pub fn ingest(&mut self, m: &Measurement) -> Ingest {
        let start = (m.produced_at as u64 / self.window_ms) * self.window_ms;
        let window_ms = self.window_ms;
        let report = self
            .windows
            .entry((m.region.clone(), start))
            .or_insert_with(|| AggregateReport {
                region: m.region.clone(),
                window_start: start,
                window_end: start + window_ms,
                total_wh: Energy::ZERO,
                contributing: BTreeMap::new(),
                duplicates_discarded: 0,
            });
        if !self.seen.insert((m.producer_id.clone(), m.seq)) {
            report.duplicates_discarded += 1;
            return Ingest::Duplicate;
        }
        report.total_wh = report.total_wh + m.consumption_wh;
        *report.contributing.entry(m.producer_id.clone()).or_default() += 1;
        Ingest::Accepted
    }

    pub fn reports(&self) -> Vec<AggregateReport> {
        self.windows.values().cloned().collect()
    }

    /// Sum over all windows per region.
    pub fn totals_by_region(&self) -> BTreeMap<String, Energy> {
        let mut totals = BTreeMap::new();
        for r in self.windows.values() {
            let e: &mut Energy = totals.entry(r.region.clone()).or_default();
            *e = *e + r.total_wh;
        }
        totals
    }

    pub fn accepted(&self) -> usize {
        self.seen.len()
    }

    pub fn duplicates(&self) -> u64 {
        self.windows.values().map(|r| r.duplicates_discarded).sum()
    }
}

/// Source of consumption values for simulated meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueGenerator {
    Constant { wh: Energy },
    Uniform { min_wh: Energy, max_wh: Energy },
    /// Values replayed in order, wrapping around.
    Trace { values: Vec<Energy> },
}

impl Default for ValueGenerator {
    fn default() -> Self {
        ValueGenerator::Uniform {
            min_wh: Energy::from_milli_wh(0),
            max_wh: Energy::from_milli_wh(500_000),
        }
    }
}

impl ValueGenerator {
    /// Loads a trace file with one watt-hour value per line; blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_trace_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.parse::<Energy>()
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "trace file holds no values",
            ));
        }
        Ok(ValueGenerator::Trace { values })
    }

    /// A per-producer deterministic stream derived from `seed` and `producer_id`.
    pub fn series(&self, seed: u64, producer_id: &str) -> ValueSeries {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(producer_id.as_bytes());
        ValueSeries {
            generator: self.clone(),
            rng: ChaCha8Rng::from_seed(h.finalize().into()),
            index: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValueSeries {
    generator: ValueGenerator,
    rng: ChaCha8Rng,
    index: usize,
}

impl Iterator for ValueSeries {
    type Item = Energy;

    fn next(&mut self) -> Option<Energy> {
        let value = match &self.generator {
            ValueGenerator::Constant { wh } => *wh,
            ValueGenerator::Uniform { min_wh, max_wh } => {
                let (lo, hi) = (min_wh.milli_wh().min(max_wh.milli_wh()), min_wh.milli_wh().max(max_wh.milli_wh()));
                Energy::from_milli_wh(self.rng.gen_range(lo..=hi))
            }
            ValueGenerator::Trace { values } if values.is_empty() => Energy::ZERO,
            ValueGenerator::Trace { values } => values[self.index % values.len()],
        };
        self.index += 1;
        Some(value)
    }
}
