use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use vaultcast_core::attestation::{self, ChallengeMessage, EnclaveIdentity, HandshakeResult, ResponseMessage};
use vaultcast_core::envelope::{self, EncryptedEnvelope};
use vaultcast_core::measurement::{now_ms, AggregateReport, Aggregator, CycleTiming, Energy, Ingest, Measurement};
use zeroize::Zeroizing;

use super::{region_pattern, AgentError, Mode, SecureEndpoints, READING_ATTR};
use crate::broker::Notification;
use crate::http::{self, ApiError, ServiceHandle};
use crate::idm::{IdmClient, IdmError};
use crate::vault::{VaultClient, VaultClientError};
use crate::AUTH_HEADER;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerConfig {
    pub consumer_id: String,
    pub region: String,
    #[serde(default)]
    pub mode: Mode,
    pub broker_url: String,
    #[serde(default)]
    pub secure: Option<SecureEndpoints>,
    /// Address to serve `/attest` and `/notify` on.
    pub listen: String,
    /// Base URL others use to reach this consumer, if not the listen address.
    #[serde(default)]
    pub callback_base: Option<String>,
    #[serde(default = "default_window_ms")]
    pub window_ms: u64,
}

fn default_window_ms() -> u64 {
    60_000
}

#[derive(Debug, Error)]
#[error("poison message: {0}")]
pub struct PoisonMessage(pub String);

/// Decrypts an envelope and parses the measurement inside it.
pub fn decrypt_and_parse(private_part: &[u8], envelope_json: &[u8]) -> Result<Measurement, PoisonMessage> {
    let env: EncryptedEnvelope =
        serde_json::from_slice(envelope_json).map_err(|e| PoisonMessage(format!("envelope: {e}")))?;
    decrypt_envelope(private_part, &env)
}

fn decrypt_envelope(private_part: &[u8], env: &EncryptedEnvelope) -> Result<Measurement, PoisonMessage> {
    let plain = Zeroizing::new(envelope::decrypt(private_part, env).map_err(|e| PoisonMessage(e.to_string()))?);
    Measurement::from_json(&plain).map_err(|e| PoisonMessage(e.to_string()))
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerStats {
    pub notifications: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub poison: u64,
}

struct RegionKey {
    key_id: String,
    private_part: Zeroizing<Vec<u8>>,
}

/// Simulated enclave context of a consumer: its identity, handshake sessions,
/// the region private key and the aggregation state.
pub struct ConsumerState {
    mode: Mode,
    identity: Option<EnclaveIdentity>,
    sessions: Mutex<HashMap<String, HandshakeResult>>,
    key: Mutex<Option<RegionKey>>,
    aggregator: Mutex<Aggregator>,
    timings: Mutex<Vec<CycleTiming>>,
    notifications: AtomicU64,
    poison: AtomicU64,
}

impl fmt::Debug for ConsumerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConsumerState")
            .field("mode", &self.mode)
            .field("stats", &self.stats())
            .finish_non_exhaustive()
    }
}

impl ConsumerState {
    pub fn new(mode: Mode, identity: Option<EnclaveIdentity>, window_ms: u64) -> Self {
        Self {
            mode,
            identity,
            sessions: Mutex::new(HashMap::new()),
            key: Mutex::new(None),
            aggregator: Mutex::new(Aggregator::new(window_ms)),
            timings: Mutex::new(Vec::new()),
            notifications: AtomicU64::new(0),
            poison: AtomicU64::new(0),
        }
    }

    /// Installs a region key directly, bypassing the vault.
    pub fn install_key(&self, key_id: &str, private_part: &[u8]) {
        *self.key.lock().unwrap() = Some(RegionKey {
            key_id: key_id.to_owned(),
            private_part: Zeroizing::new(private_part.to_vec()),
        });
    }

    pub fn key_id(&self) -> Option<String> {
        self.key.lock().unwrap().as_ref().map(|k| k.key_id.clone())
    }

    fn respond(&self, session: &str, challenge: &ChallengeMessage) -> Result<ResponseMessage, ApiError> {
        let identity = self
            .identity
            .as_ref()
            .ok_or(ApiError::new(StatusCode::NOT_FOUND, "no-enclave"))?;
        let (response, result) =
            attestation::ra_respond(identity, challenge).map_err(|_| ApiError::bad_request("malformed-request"))?;
        self.sessions.lock().unwrap().insert(session.to_owned(), result);
        Ok(response)
    }

    fn accept_wrapped(&self, session: &str, key_id: &str, wrapped: &envelope::WrappedKey) -> Result<(), AgentError> {
        let result = self
            .sessions
            .lock()
            .unwrap()
            .remove(session)
            .ok_or_else(|| AgentError::AttestationFailed("vault never attested this session".into()))?;
        let private_part = envelope::unwrap_key(&*result.shared_key, wrapped)
            .map_err(|e| AgentError::AttestationFailed(format!("wrapped key: {e}")))?;
        *self.key.lock().unwrap() = Some(RegionKey {
            key_id: key_id.to_owned(),
            private_part,
        });
        Ok(())
    }

    fn decode(&self, value: &serde_json::Value) -> Result<Measurement, PoisonMessage> {
        match self.mode {
            Mode::Plain => Measurement::from_value(value).map_err(|e| PoisonMessage(e.to_string())),
            Mode::Secure => {
                let env: EncryptedEnvelope =
                    serde_json::from_value(value.clone()).map_err(|e| PoisonMessage(format!("envelope: {e}")))?;
                let key = self.key.lock().unwrap();
                let key = key.as_ref().ok_or_else(|| PoisonMessage("no region key yet".into()))?;
                decrypt_envelope(&key.private_part, &env)
            }
        }
    }

    /// Processes one broker notification.
    pub fn handle_notification(&self, n: &Notification) {
        self.notifications.fetch_add(1, Ordering::Relaxed);
        for entity in &n.data {
            let Some(attr) = entity.attrs.get(READING_ATTR) else {
                continue;
            };
            match self.decode(&attr.value) {
                Ok(m) => {
                    let consumed_at = now_ms();
                    if self.aggregator.lock().unwrap().ingest(&m) == Ingest::Accepted {
                        self.timings.lock().unwrap().push(CycleTiming::new(&m, consumed_at));
                    }
                }
                Err(e) => {
                    self.poison.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(entity = %entity.id, error = %e, "skipping notification");
                }
            }
        }
    }

    pub fn stats(&self) -> ConsumerStats {
        let agg = self.aggregator.lock().unwrap();
        ConsumerStats {
            notifications: self.notifications.load(Ordering::Relaxed),
            accepted: agg.accepted() as u64,
            duplicates: agg.duplicates(),
            poison: self.poison.load(Ordering::Relaxed),
        }
    }

    pub fn reports(&self) -> Vec<AggregateReport> {
        self.aggregator.lock().unwrap().reports()
    }

    pub fn totals_by_region(&self) -> BTreeMap<String, Energy> {
        self.aggregator.lock().unwrap().totals_by_region()
    }

    pub fn timings(&self) -> Vec<CycleTiming> {
        self.timings.lock().unwrap().clone()
    }
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    session: String,
}

async fn attest_route(
    State(state): State<Arc<ConsumerState>>,
    Query(q): Query<SessionQuery>,
    body: Bytes,
) -> Result<Json<ResponseMessage>, ApiError> {
    let challenge: ChallengeMessage =
        serde_json::from_slice(&body).map_err(|_| ApiError::bad_request("malformed-request"))?;
    state.respond(&q.session, &challenge).map(Json)
}

async fn notify_route(State(state): State<Arc<ConsumerState>>, body: Bytes) -> StatusCode {
    match serde_json::from_slice::<Notification>(&body) {
        Ok(n) => {
            state.handle_notification(&n);
            StatusCode::NO_CONTENT
        }
        Err(e) => {
            tracing::warn!(error = %e, "unparseable notification");
            StatusCode::BAD_REQUEST
        }
    }
}

pub fn router(state: Arc<ConsumerState>) -> Router {
    Router::new()
        .route("/attest", post(attest_route))
        .route("/notify", post(notify_route))
        .with_state(state)
}

/// A running consumer.
#[derive(Debug)]
pub struct ConsumerHandle {
    pub state: Arc<ConsumerState>,
    pub sub_id: String,
    /// Wall-clock time of the attested private-key exchange.
    pub attestation_ms: Option<f64>,
    service: ServiceHandle,
}

impl ConsumerHandle {
    pub fn url(&self) -> String {
        self.service.url()
    }

    pub async fn shutdown(self) -> Arc<ConsumerState> {
        self.service.shutdown().await;
        self.state
    }
}

/// Starts the consumer's endpoints, obtains the region key (secure mode) and
/// subscribes to the region's meters.
pub async fn consumer_run(
    config: ConsumerConfig,
    identity: Option<EnclaveIdentity>,
    http: reqwest::Client,
) -> Result<ConsumerHandle, AgentError> {
    let listener = TcpListener::bind(&config.listen).await?;
    consumer_run_on(config, identity, http, listener).await
}

/// Like [`consumer_run`] but serves on an already bound listener; `config.listen` is ignored.
pub async fn consumer_run_on(
    config: ConsumerConfig,
    identity: Option<EnclaveIdentity>,
    http: reqwest::Client,
    listener: TcpListener,
) -> Result<ConsumerHandle, AgentError> {
    let state = Arc::new(ConsumerState::new(config.mode, identity, config.window_ms));
    let service = http::serve(listener, router(state.clone()))?;
    match connect(&config, &state, &http, &service).await {
        Ok((sub_id, attestation_ms)) => Ok(ConsumerHandle {
            state,
            sub_id,
            attestation_ms,
            service,
        }),
        Err(e) => {
            service.shutdown().await;
            Err(e)
        }
    }
}

async fn connect(
    config: &ConsumerConfig,
    state: &ConsumerState,
    http: &reqwest::Client,
    service: &ServiceHandle,
) -> Result<(String, Option<f64>), AgentError> {
    let base = config.callback_base.clone().unwrap_or_else(|| service.url());
    let base = base.trim_end_matches('/');
    let mut token = None;
    let mut attestation_ms = None;
    if config.mode == Mode::Secure {
        let endpoints = config.secure.as_ref().ok_or(AgentError::MissingSecureConfig)?;
        let idm = IdmClient::new(http.clone(), endpoints.idm_url.clone());
        let t = match idm
            .issue_token(&endpoints.credentials.username, &endpoints.credentials.password)
            .await
        {
            Ok(t) => t.access_token,
            Err(IdmError::AuthenticationFailed) => return Err(AgentError::AuthenticationFailed),
            Err(e) => return Err(AgentError::Service(e.to_string())),
        };
        let session = uuid::Uuid::new_v4().simple().to_string();
        let started = std::time::Instant::now();
        let vault = VaultClient::new(http.clone(), endpoints.vault_url.clone());
        let resp = vault
            .request_private_key(&t, &config.region, &format!("{base}/attest?session={session}"))
            .await
            .map_err(|e| match e {
                VaultClientError::AttestationRejected => AgentError::AttestationFailed(e.to_string()),
                other => AgentError::Service(other.to_string()),
            })?;
        state.accept_wrapped(&session, &resp.key_id, &resp.wrapped_key)?;
        attestation_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        tracing::info!(consumer = %config.consumer_id, key_id = %resp.key_id, "attested by vault, region key installed");
        token = Some(t);
    }

    let mut req = http
        .post(format!("{}/v2/subscriptions", config.broker_url.trim_end_matches('/')))
        .json(&serde_json::json!({
            "pattern": region_pattern(&config.region),
            "attrs": [READING_ATTR],
            "callback": format!("{base}/notify"),
        }));
    if let Some(t) = &token {
        req = req.header(AUTH_HEADER, t);
    }
    let resp = req.send().await.map_err(|e| AgentError::Service(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(AgentError::Service(format!("subscription refused: {}", resp.status())));
    }
    #[derive(Deserialize)]
    struct Created {
        sub_id: String,
    }
    let created: Created = resp.json().await.map_err(|e| AgentError::Service(e.to_string()))?;
    Ok((created.sub_id, attestation_ms))
}
