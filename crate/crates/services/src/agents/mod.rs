//! Simulated smart meters (producers) and enclave aggregators (consumers).
//!
//! A producer authenticates, attests the vault and fetches its region's
//! public key once, then publishes encrypted readings to the broker. A
//! consumer authenticates, is attested by the vault to receive the region's
//! private key, subscribes to its region's meters and aggregates decrypted
//! readings into tumbling windows.
//!
//! In plain mode both sides skip identity, vault and encryption and exchange
//! the measurement JSON directly through the broker.

mod consumer;
mod producer;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vaultcast_core::attestation::Measurement;
use vaultcast_core::codec::b64_array;

pub use consumer::{
    consumer_run, consumer_run_on, decrypt_and_parse, ConsumerConfig, ConsumerHandle, ConsumerState, ConsumerStats,
    PoisonMessage,
};
pub use producer::{producer_run, ConnectedProducer, ProducerConfig, ProducerSummary, PublishedCycle};

/// Entity type producers publish under.
pub const METER_TYPE: &str = "SmartMeter";
/// Attribute holding the (encrypted) reading.
pub const READING_ATTR: &str = "consumption";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Secure,
    Plain,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "secure" => Ok(Mode::Secure),
            "plain" => Ok(Mode::Plain),
            other => Err(format!("unknown mode {other:?}, expected secure or plain")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Secure => "secure",
            Mode::Plain => "plain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

/// What a party needs to decide whether an enclave is genuine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustAnchors {
    #[serde(with = "b64_array")]
    pub avs_root_public: [u8; 32],
    pub expected_measurement: Measurement,
}

/// Secure-mode endpoints and credentials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecureEndpoints {
    pub idm_url: String,
    pub vault_url: String,
    pub credentials: Credentials,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("attestation failed: {0}")]
    AttestationFailed(String),
    #[error("secure mode needs idm, vault and credentials")]
    MissingSecureConfig,
    #[error("{0}")]
    Service(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Entity id for a producer, matched by the region's subscription pattern.
pub fn entity_id(region: &str, producer_id: &str) -> String {
    format!("meter-{region}-{producer_id}")
}

/// Subscription pattern covering every meter of `region`.
pub fn region_pattern(region: &str) -> String {
    format!("meter-{region}-*")
}

/// Loads an agent config from TOML, or JSON when the extension is `.json`.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, AgentError> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests;
