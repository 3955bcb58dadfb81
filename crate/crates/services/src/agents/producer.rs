use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use vaultcast_core::envelope::{self, PublicKeyInfo};
use vaultcast_core::measurement::{now_ms, Energy, Measurement, ValueGenerator, ValueSeries};

use super::{entity_id, AgentError, Mode, SecureEndpoints, TrustAnchors, METER_TYPE, READING_ATTR};
use crate::idm::{IdmClient, IdmError};
use crate::vault::{VaultClient, VaultClientError};
use crate::AUTH_HEADER;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerConfig {
    pub producer_id: String,
    pub region: String,
    #[serde(default)]
    pub mode: Mode,
    pub broker_url: String,
    /// Required in secure mode.
    #[serde(default)]
    pub secure: Option<SecureEndpoints>,
    /// Required in secure mode.
    #[serde(default)]
    pub trust: Option<TrustAnchors>,
    pub count: u64,
    #[serde(default)]
    pub interval_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: ValueGenerator,
}

/// A reading as the producer generated it, kept for oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedCycle {
    pub seq: u64,
    pub consumption_wh: Energy,
    pub produced_at: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerSummary {
    pub producer_id: String,
    pub region: String,
    pub cycles: Vec<PublishedCycle>,
    /// Upserts the broker did not accept after the retry.
    pub errors: u64,
    /// 401/403 answers that triggered a token refresh and retry.
    pub auth_retries: u64,
    /// Wall-clock time of the attested public-key exchange.
    pub attestation_ms: Option<f64>,
    pub key_id: Option<String>,
}

struct SecureSession {
    idm: IdmClient,
    credentials: super::Credentials,
    token: String,
    key: PublicKeyInfo,
}

/// A producer that finished authentication and key acquisition and is ready to publish.
pub struct ConnectedProducer {
    config: ProducerConfig,
    http: reqwest::Client,
    session: Option<SecureSession>,
    attestation_ms: Option<f64>,
    values: ValueSeries,
}

impl ConnectedProducer {
    /// Issues a token, attests the vault and fetches the region's public key.
    /// Plain mode does nothing beyond validating the config.
    pub async fn connect(config: ProducerConfig, http: reqwest::Client) -> Result<Self, AgentError> {
        let values = config.generator.series(config.seed, &config.producer_id);
        let (session, attestation_ms) = match config.mode {
            Mode::Plain => (None, None),
            Mode::Secure => {
                let (endpoints, trust) = config
                    .secure
                    .as_ref()
                    .zip(config.trust.as_ref())
                    .ok_or(AgentError::MissingSecureConfig)?;
                let idm = IdmClient::new(http.clone(), endpoints.idm_url.clone());
                let token = issue(&idm, &endpoints.credentials).await?;
                let vault = VaultClient::new(http.clone(), endpoints.vault_url.clone());
                let (key, took) = vault
                    .fetch_public_key(&token, &config.region, &trust.avs_root_public, &trust.expected_measurement)
                    .await
                    .map_err(|e| match e {
                        VaultClientError::VaultNotTrusted(_) => AgentError::AttestationFailed(e.to_string()),
                        other => AgentError::Service(other.to_string()),
                    })?;
                tracing::info!(producer = %config.producer_id, key_id = %key.key_id, "vault attested, public key acquired");
                let session = SecureSession {
                    idm,
                    credentials: endpoints.credentials.clone(),
                    token,
                    key,
                };
                (Some(session), Some(took.as_secs_f64() * 1e3))
            }
        };
        Ok(Self {
            config,
            http,
            session,
            attestation_ms,
            values,
        })
    }

    /// Publishes `count` readings, one every `interval_ms`.
    pub async fn publish_all(mut self) -> ProducerSummary {
        let mut summary = ProducerSummary {
            producer_id: self.config.producer_id.clone(),
            region: self.config.region.clone(),
            cycles: Vec::with_capacity(self.config.count as usize),
            errors: 0,
            auth_retries: 0,
            attestation_ms: self.attestation_ms,
            key_id: self.session.as_ref().map(|s| s.key.key_id.clone()),
        };
        let entity = entity_id(&self.config.region, &self.config.producer_id);
        let interval = Duration::from_millis(self.config.interval_ms);
        for seq in 1..=self.config.count {
            if seq > 1 && !interval.is_zero() {
                tokio::time::sleep(interval).await;
            }
            let consumption_wh = self.values.next().expect("value series is infinite");
            let reading = Measurement {
                producer_id: self.config.producer_id.clone(),
                region: self.config.region.clone(),
                consumption_wh,
                seq,
                produced_at: now_ms(),
            };
            let accepted = self.publish(&entity, &reading, &mut summary).await;
            if !accepted {
                summary.errors += 1;
            }
            summary.cycles.push(PublishedCycle {
                seq,
                consumption_wh,
                produced_at: reading.produced_at,
                accepted,
            });
        }
        summary
    }

    async fn publish(&mut self, entity: &str, reading: &Measurement, summary: &mut ProducerSummary) -> bool {
        let value = match &self.session {
            None => serde_json::to_value(reading).expect("measurement serializes"),
            Some(s) => match envelope::encrypt(&s.key.key_id, &s.key.public_part, &reading.to_json()) {
                Ok(env) => serde_json::to_value(env).expect("envelope serializes"),
                Err(e) => {
                    tracing::warn!(error = %e, "encryption failed");
                    return false;
                }
            },
        };
        let body = serde_json::json!({
            "id": entity,
            "type": METER_TYPE,
            "attrs": BTreeMap::from([(READING_ATTR, value)]),
        });
        let url = format!("{}/v2/entities", self.config.broker_url.trim_end_matches('/'));
        for attempt in 0..2 {
            let mut req = self.http.post(&url).json(&body);
            if let Some(s) = &self.session {
                req = req.header(AUTH_HEADER, &s.token);
            }
            match req.send().await {
                Ok(r) if r.status().is_success() => return true,
                Ok(r) if matches!(r.status(), StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN) && attempt == 0 => {
                    summary.auth_retries += 1;
                    if let Some(s) = &mut self.session {
                        match issue(&s.idm, &s.credentials).await {
                            Ok(t) => s.token = t,
                            Err(_) => return false,
                        }
                    }
                }
                Ok(r) => {
                    tracing::warn!(producer = %reading.producer_id, seq = reading.seq, status = %r.status(), "upsert refused");
                    return false;
                }
                Err(e) => {
                    tracing::warn!(producer = %reading.producer_id, seq = reading.seq, error = %e, "broker unreachable");
                    return false;
                }
            }
        }
        false
    }
}

async fn issue(idm: &IdmClient, credentials: &super::Credentials) -> Result<String, AgentError> {
    match idm.issue_token(&credentials.username, &credentials.password).await {
        Ok(t) => Ok(t.access_token),
        Err(IdmError::AuthenticationFailed) => Err(AgentError::AuthenticationFailed),
        Err(e) => Err(AgentError::Service(e.to_string())),
    }
}

/// Connects and then publishes every reading.
pub async fn producer_run(config: ProducerConfig, http: reqwest::Client) -> Result<ProducerSummary, AgentError> {
    Ok(ConnectedProducer::connect(config, http).await?.publish_all().await)
}
