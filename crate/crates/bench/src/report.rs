use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vaultcast_core::measurement::{CycleTiming, Energy};
use vaultcast_services::agents::{Mode, ProducerSummary};
use vaultcast_services::broker::DeliveryStats;
use vaultcast_services::pep::PepStats;
use vaultcast_services::vault::VaultAudit;

use crate::config::ScenarioConfig;
use crate::stats::{mean, LatencyStats};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    /// Producer attesting the vault.
    Producer,
    /// Vault attesting a consumer, timed at the consumer.
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationTiming {
    pub party: Party,
    pub agent_id: String,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerTotals {
    pub notifications: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub poison: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PepSnapshot {
    pub vault: PepStats,
    pub broker: PepStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub producers: usize,
    pub cycles_per_producer: u64,
    pub regions: usize,
    pub interval_ms: u64,
    /// End-to-end latency of each delivered reading, in delivery order.
    pub latencies_ms: Vec<f64>,
    pub latency: LatencyStats,
    pub attestations: Vec<AttestationTiming>,
    pub attestation_mean_ms: Option<f64>,
    /// Upserts the broker accepted.
    pub published: u64,
    pub publish_errors: u64,
    /// Producers that could not authenticate or attest the vault.
    pub producer_failures: Vec<String>,
    pub delivery: DeliveryStats,
    pub consumers: ConsumerTotals,
    /// Distinct readings each producer got into an aggregate.
    pub delivered_per_producer: BTreeMap<String, u64>,
    /// Totals computed by the consumers.
    pub region_totals: BTreeMap<String, Energy>,
    /// Totals of what the producers generated and the broker accepted.
    pub expected_totals: BTreeMap<String, Energy>,
    pub vault_audit_before_publish: Option<VaultAudit>,
    pub vault_audit: Option<VaultAudit>,
    pub pep: Option<PepSnapshot>,
    pub settled: bool,
    pub wall_clock_ms: f64,
}

impl RunReport {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            mode: cfg.mode,
            seed: cfg.seed,
            producers: cfg.producers,
            cycles_per_producer: cfg.cycles_per_producer,
            regions: cfg.regions,
            interval_ms: cfg.interval_ms,
            ..Default::default()
        }
    }

    /// Recomputes the summary statistics from the raw samples.
    pub fn finish_stats(&mut self) {
        self.latency = LatencyStats::from_samples(&self.latencies_ms);
        let durations: Vec<f64> = self.attestations.iter().map(|a| a.duration_ms).collect();
        self.attestation_mean_ms = (!durations.is_empty()).then(|| mean(&durations));
    }

    /// Broker deliveries over accepted upserts, 1.0 when nothing was published.
    pub fn delivered_ratio(&self) -> f64 {
        if self.published == 0 {
            return 1.0;
        }
        self.delivery.delivered as f64 / self.published as f64
    }

    pub fn totals_match(&self) -> bool {
        self.region_totals == self.expected_totals
    }

    /// Failed acceptance gates for a single run; empty when all pass.
    pub fn gate_failures(&self) -> Vec<String> {
        let mut failures = Vec::new();
        if !self.producer_failures.is_empty() {
            failures.push(format!("{} producers failed to start", self.producer_failures.len()));
        }
        if !self.totals_match() {
            failures.push("consumer totals differ from producer-side totals".into());
        }
        if self.delivered_ratio() < 0.99 {
            failures.push(format!("delivered ratio {:.4} below 0.99", self.delivered_ratio()));
        }
        if self.delivery.delivered + self.delivery.dropped != self.delivery.enqueued {
            failures.push("delivered + dropped != enqueued".into());
        }
        if self.mode == Mode::Secure {
            if let Some(audit) = &self.vault_audit {
                if audit.get("public_key_served") != self.producers as u64 {
                    failures.push("public_key_served differs from producer count".into());
                }
                if audit.get("private_key_served") != self.regions as u64 {
                    failures.push("private_key_served differs from consumer count".into());
                }
                if self.vault_audit_before_publish.as_ref() != Some(audit) {
                    failures.push("vault traffic during steady-state publication".into());
                }
            }
        }
        failures
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Serialize)]
struct CycleRow<'a> {
    producer_id: &'a str,
    region: &'a str,
    seq: u64,
    produced_at: f64,
    consumed_at: f64,
    latency_ms: f64,
}

#[derive(Debug, Serialize)]
struct PublishedRow<'a> {
    producer_id: &'a str,
    region: &'a str,
    seq: u64,
    consumption_wh: f64,
    produced_at: f64,
    accepted: bool,
}

/// Writes `cycles.csv`, `published.csv`, `attestation.csv`, `report.json` and
/// `latency.svg` into `dir`, returning the created paths.
pub fn write_artifacts(
    dir: &Path,
    report: &RunReport,
    timings: &[CycleTiming],
    producers: &[ProducerSummary],
) -> Result<Vec<PathBuf>, BenchError> {
    let mut written = Vec::new();
    let csv_err = |e: csv::Error| BenchError::Io(std::io::Error::other(e));

    let path = dir.join("cycles.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for t in timings {
        w.serialize(CycleRow {
            producer_id: &t.producer_id,
            region: &t.region,
            seq: t.seq,
            produced_at: t.produced_at,
            consumed_at: t.consumed_at,
            latency_ms: t.latency_ms,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("published.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for p in producers {
        for c in &p.cycles {
            w.serialize(PublishedRow {
                producer_id: &p.producer_id,
                region: &p.region,
                seq: c.seq,
                consumption_wh: c.consumption_wh.wh(),
                produced_at: c.produced_at,
                accepted: c.accepted,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("attestation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for a in &report.attestations {
        w.serialize(a).map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(report).expect("report serializes"))?;
    written.push(path);

    if !report.latencies_ms.is_empty() {
        let path = dir.join("latency.svg");
        crate::plot::latency_series(&path, &report.latencies_ms, &format!("{} mode", report.mode))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_statistics_recompute_from_raw_rows() {
        let dir = tempfile::tempdir().unwrap();
        let timings: Vec<CycleTiming> = (1..=9)
            .map(|i| CycleTiming {
                producer_id: "p0000".into(),
                region: "region-A".into(),
                seq: i,
                produced_at: 1000.0 * i as f64,
                consumed_at: 1000.0 * i as f64 + i as f64 * 0.5,
                latency_ms: i as f64 * 0.5,
            })
            .collect();
        let mut report = RunReport {
            latencies_ms: timings.iter().map(|t| t.latency_ms).collect(),
            ..Default::default()
        };
        report.finish_stats();
        write_artifacts(dir.path(), &report, &timings, &[]).unwrap();

        let mut rdr = csv::Reader::from_path(dir.path().join("cycles.csv")).unwrap();
        let col = rdr.headers().unwrap().iter().position(|h| h == "latency_ms").unwrap();
        let raw: Vec<f64> = rdr
            .records()
            .map(|r| r.unwrap()[col].parse().unwrap())
            .collect();
        assert_eq!(LatencyStats::from_samples(&raw), report.latency);
        let back = RunReport::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn delivery_gates() {
        let mut r = RunReport {
            published: 100,
            delivery: DeliveryStats {
                enqueued: 100,
                delivered: 99,
                dropped: 1,
                retried: 0,
            },
            ..Default::default()
        };
        assert!(r.gate_failures().is_empty());
        r.delivery.delivered = 98;
        r.delivery.dropped = 2;
        assert_eq!(r.gate_failures().len(), 1);
    }
}
