use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vaultcast_core::measurement::ValueGenerator;
use vaultcast_services::agents::Mode;

use crate::BenchError;

/// Fixed ports for each service; `0` or absent picks a free one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ports {
    #[serde(default)]
    pub idm: u16,
    #[serde(default)]
    pub vault: u16,
    #[serde(default)]
    pub vault_pep: u16,
    #[serde(default)]
    pub broker: u16,
    #[serde(default)]
    pub broker_pep: u16,
    /// First consumer port; consumer `i` listens on `consumer_base + i`.
    #[serde(default)]
    pub consumer_base: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub mode: Mode,
    pub producers: usize,
    pub cycles_per_producer: u64,
    #[serde(default)]
    pub interval_ms: u64,
    #[serde(default = "one")]
    pub regions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: ValueGenerator,
    #[serde(default = "localhost")]
    pub host: String,
    #[serde(default)]
    pub ports: Ports,
    /// Where CSV, JSON, plots and service state go. A temporary directory if absent.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Record all bytes on the producer→broker and broker→consumer links.
    #[serde(default)]
    pub wire_capture: bool,
    /// Expose the vault's audit route over HTTP.
    #[serde(default)]
    pub audit_route: bool,
    /// PEP token-validation cache lifetime.
    #[serde(default)]
    pub validation_cache_ms: Option<u64>,
    /// How long to wait for every notification to be delivered after publication ends.
    #[serde(default = "settle_ms")]
    pub settle_timeout_ms: u64,
}

fn one() -> usize {
    1
}

fn localhost() -> String {
    "127.0.0.1".into()
}

fn settle_ms() -> u64 {
    60_000
}

impl ScenarioConfig {
    pub fn new(mode: Mode, producers: usize, cycles_per_producer: u64) -> Self {
        Self {
            mode,
            producers,
            cycles_per_producer,
            interval_ms: 0,
            regions: 1,
            seed: 0,
            generator: ValueGenerator::default(),
            host: localhost(),
            ports: Ports::default(),
            out_dir: None,
            wire_capture: false,
            audit_route: false,
            validation_cache_ms: None,
            settle_timeout_ms: settle_ms(),
        }
    }

    /// Loads TOML, or JSON when the extension is `.json`. `BENCH_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<(), BenchError> {
        if let Ok(s) = std::env::var("BENCH_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| BenchError::Config(format!("BENCH_SEED must be an unsigned integer, got {s:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.producers == 0 {
            return Err(BenchError::Config("producers must be at least 1".into()));
        }
        if self.regions == 0 || self.regions > self.producers {
            return Err(BenchError::Config(format!(
                "regions must be between 1 and the producer count ({}), got {}",
                self.producers, self.regions
            )));
        }
        if self.cycles_per_producer == 0 {
            return Err(BenchError::Config("cycles_per_producer must be at least 1".into()));
        }
        Ok(())
    }

    pub fn region_names(&self) -> Vec<String> {
        (0..self.regions).map(region_name).collect()
    }

    /// `(producer_id, region)` for every producer, regions assigned round-robin.
    pub fn producer_roster(&self) -> Vec<(String, String)> {
        (0..self.producers)
            .map(|i| (format!("p{i:04}"), region_name(i % self.regions)))
            .collect()
    }

    pub fn total_cycles(&self) -> u64 {
        self.producers as u64 * self.cycles_per_producer
    }
}

pub fn region_name(i: usize) -> String {
    if i < 26 {
        format!("region-{}", (b'A' + i as u8) as char)
    } else {
        format!("region-{i}")
    }
}
