//! Key vault running inside a simulated enclave.
//!
//! One X25519 key pair per scope (region). Private halves are sealed at rest
//! under a key derived from the vault's measurement and a deployment secret,
//! and only leave the vault wrapped under the shared key of a handshake in
//! which the requesting consumer was attested. Public keys are returned
//! encrypted under the shared key of a handshake in which the producer
//! attested the vault.
//!
//! Routes (normally reached through a PEP):
//! * `POST /v1/keys/{scope}/public`, body [`ChallengeMessage`] → [`PublicKeyResponse`]
//! * `POST /v1/keys/{scope}/private` `{"attestation_endpoint": url}` →
//!   [`PrivateKeyResponse`] | 403 `attestation-failed` | 404 `no-key`
//! * `GET /v1/audit` → [`VaultAudit`] (only when enabled)

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use vaultcast_core::attestation::{
    self, AttestationError, ChallengeMessage, EnclaveIdentity, Measurement, ResponseMessage,
};
use vaultcast_core::codec::b64;
use vaultcast_core::envelope::{self, EnvelopeError, PublicKeyInfo, WrappedKey};
use zeroize::Zeroizing;

use crate::http::ApiError;
use crate::{AUTH_HEADER, SUBJECT_HEADER};

/// Code identity the vault enclave is measured as.
pub const VAULT_CODE_IDENTITY: &str = "key-vault-v1";

const SEAL_INFO: &[u8] = b"vaultcast/seal/v1";
const SEAL_NONCE_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("scope must be non-empty")]
    EmptyScope,
    #[error("no key for scope {0:?}")]
    NoKey(String),
    #[error("attestation failed: {0}")]
    AttestationFailed(String),
    #[error("sealed data failed authentication")]
    Unseal,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Crypto(#[from] EnvelopeError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error("state file: {0}")]
    Persistence(#[from] std::io::Error),
}

/// Seals data to one enclave identity.
pub struct Sealer {
    key: Zeroizing<[u8; 32]>,
}

impl Sealer {
    pub fn new(measurement: &Measurement, deployment_secret: &[u8]) -> Self {
        let ikm = Zeroizing::new([measurement.as_bytes().as_slice(), deployment_secret].concat());
        let mut key = Zeroizing::new([0u8; 32]);
        Hkdf::<Sha256>::new(None, &ikm)
            .expand(SEAL_INFO, &mut key[..])
            .expect("valid HKDF length");
        Self { key }
    }

    /// `nonce || ciphertext || tag`
    pub fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; SEAL_NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let ct = ChaCha20Poly1305::new(Key::from_slice(&self.key[..]))
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: SEAL_INFO })
            .expect("sealing cannot fail for in-memory buffers");
        [nonce.as_slice(), &ct].concat()
    }

    pub fn unseal(&self, sealed: &[u8]) -> Result<Zeroizing<Vec<u8>>, VaultError> {
        if sealed.len() < SEAL_NONCE_LEN {
            return Err(VaultError::Unseal);
        }
        let (nonce, ct) = sealed.split_at(SEAL_NONCE_LEN);
        ChaCha20Poly1305::new(Key::from_slice(&self.key[..]))
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad: SEAL_INFO })
            .map(Zeroizing::new)
            .map_err(|_| VaultError::Unseal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub key_id: String,
    pub scope: String,
    #[serde(with = "b64")]
    pub public_part: Vec<u8>,
    #[serde(with = "b64")]
    pub sealed_private: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultAudit {
    pub counters: BTreeMap<String, u64>,
}

impl VaultAudit {
    pub fn get(&self, event: &str) -> u64 {
        self.counters.get(event).copied().unwrap_or(0)
    }
}

#[derive(Default)]
struct AuditCounters {
    public_key_served: AtomicU64,
    private_key_served: AtomicU64,
    attestation_failed: AtomicU64,
    auth_failed: AtomicU64,
    key_requests: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct VaultConfig {
    pub deployment_secret: Vec<u8>,
    pub avs_root_public: [u8; 32],
    pub expected_consumer_measurement: Measurement,
    /// JSON-lines file of sealed key records.
    pub state_path: Option<PathBuf>,
    pub audit_route: bool,
    /// Refuse key requests that did not pass through a PEP.
    pub require_forwarded_subject: bool,
    pub attestation_timeout: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublicKeyResponse {
    pub handshake: ResponseMessage,
    /// [`PublicKeyInfo`] JSON encrypted under the handshake key.
    pub key: WrappedKey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivateKeyRequest {
    pub attestation_endpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivateKeyResponse {
    pub key_id: String,
    pub wrapped_key: WrappedKey,
}

pub struct KeyVault {
    identity: EnclaveIdentity,
    sealer: Sealer,
    records: Mutex<HashMap<String, KeyRecord>>,
    state: Option<Mutex<File>>,
    config: VaultConfig,
    audit: AuditCounters,
    http: reqwest::Client,
}

impl KeyVault {
    /// Opens the vault, reloading and checking any sealed records in the state file.
    pub fn open(identity: EnclaveIdentity, config: VaultConfig) -> Result<Arc<Self>, VaultError> {
        let sealer = Sealer::new(&identity.measurement, &config.deployment_secret);
        let mut records = HashMap::new();
        let state = match &config.state_path {
            Some(path) => {
                if path.exists() {
                    for line in BufReader::new(File::open(path)?).lines() {
                        let line = line?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let record: KeyRecord = serde_json::from_str(&line)
                            .map_err(|e| VaultError::Malformed(e.to_string()))?;
                        sealer.unseal(&record.sealed_private)?;
                        records.insert(record.scope.clone(), record);
                    }
                }
                Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?))
            }
            None => None,
        };
        let http = reqwest::Client::builder()
            .tcp_nodelay(true)
            .timeout(config.attestation_timeout)
            .build()
            .expect("http client builds");
        Ok(Arc::new(Self {
            identity,
            sealer,
            records: Mutex::new(records),
            state,
            config,
            audit: AuditCounters::default(),
            http,
        }))
    }

    pub fn measurement(&self) -> Measurement {
        self.identity.measurement
    }

    pub fn seal(&self, private_part: &[u8]) -> Vec<u8> {
        self.sealer.seal(private_part)
    }

    pub fn unseal(&self, sealed: &[u8]) -> Result<Zeroizing<Vec<u8>>, VaultError> {
        self.sealer.unseal(sealed)
    }

    /// The active public key for `scope`, generating the pair on first use.
    pub fn public_key(&self, scope: &str) -> Result<PublicKeyInfo, VaultError> {
        if scope.is_empty() {
            return Err(VaultError::EmptyScope);
        }
        let mut records = self.records.lock().unwrap();
        if let Some(r) = records.get(scope) {
            return Ok(PublicKeyInfo {
                key_id: r.key_id.clone(),
                public_part: r.public_part.clone(),
            });
        }
        let pair = envelope::generate_keypair(scope)?;
        let record = KeyRecord {
            key_id: pair.key_id.clone(),
            scope: scope.to_owned(),
            public_part: pair.public_part.clone(),
            sealed_private: self.sealer.seal(&pair.private_part),
        };
        if let Some(file) = &self.state {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            let mut f = file.lock().unwrap();
            f.write_all(&line)?;
            f.flush()?;
        }
        tracing::info!(scope, key_id = %record.key_id, "key pair created");
        records.insert(scope.to_owned(), record);
        Ok(pair.public_info())
    }

    /// Answers a producer's attestation challenge and returns the scope's
    /// public key encrypted under the resulting shared key.
    pub fn serve_public_key(&self, scope: &str, challenge: &ChallengeMessage) -> Result<PublicKeyResponse, VaultError> {
        let info = self.public_key(scope)?;
        let (handshake, session) = attestation::ra_respond(&self.identity, challenge)?;
        let payload = serde_json::to_vec(&info).expect("key info serializes");
        let key = envelope::wrap_key(&*session.shared_key, &payload)?;
        self.audit.public_key_served.fetch_add(1, Ordering::Relaxed);
        Ok(PublicKeyResponse { handshake, key })
    }

    /// Attests the consumer behind `attestation_endpoint` and, only if that
    /// succeeds, returns the scope's private key wrapped under the session key.
    pub async fn serve_private_key(
        &self,
        scope: &str,
        attestation_endpoint: &str,
    ) -> Result<PrivateKeyResponse, VaultError> {
        let record = self
            .records
            .lock()
            .unwrap()
            .get(scope)
            .cloned()
            .ok_or_else(|| VaultError::NoKey(scope.to_owned()))?;

        let session = match self.attest_consumer(attestation_endpoint).await {
            Ok(s) => s,
            Err(e) => {
                self.audit.attestation_failed.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(scope, endpoint = attestation_endpoint, error = %e, "consumer attestation failed");
                return Err(VaultError::AttestationFailed(e.to_string()));
            }
        };
        let private_part = self.sealer.unseal(&record.sealed_private)?;
        let wrapped_key = envelope::wrap_key(&*session.shared_key, &private_part)?;
        self.audit.private_key_served.fetch_add(1, Ordering::Relaxed);
        tracing::info!(scope, key_id = %record.key_id, "private key released to attested consumer");
        Ok(PrivateKeyResponse {
            key_id: record.key_id,
            wrapped_key,
        })
    }

    async fn attest_consumer(&self, endpoint: &str) -> Result<attestation::HandshakeResult, VaultError> {
        let url = url::Url::parse(endpoint).map_err(|e| VaultError::Malformed(e.to_string()))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(VaultError::Malformed(format!("unsupported endpoint {endpoint:?}")));
        }
        let (state, challenge) = attestation::begin_challenge();
        let resp = self
            .http
            .post(url)
            .json(&challenge)
            .send()
            .await
            .map_err(|e| VaultError::AttestationFailed(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(VaultError::AttestationFailed(format!("endpoint answered {}", resp.status())));
        }
        let response: ResponseMessage = resp
            .json()
            .await
            .map_err(|e| VaultError::AttestationFailed(e.to_string()))?;
        Ok(attestation::ra_verify(
            &self.config.avs_root_public,
            &self.config.expected_consumer_measurement,
            state,
            &response,
        )?)
    }

    pub fn audit(&self) -> VaultAudit {
        let c = &self.audit;
        let counters = [
            ("public_key_served", &c.public_key_served),
            ("private_key_served", &c.private_key_served),
            ("attestation_failed", &c.attestation_failed),
            ("auth_failed", &c.auth_failed),
            ("key_requests", &c.key_requests),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.load(Ordering::Relaxed)))
        .collect();
        VaultAudit { counters }
    }

    fn admit(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        self.audit.key_requests.fetch_add(1, Ordering::Relaxed);
        if self.config.require_forwarded_subject && !headers.contains_key(SUBJECT_HEADER) {
            self.audit.auth_failed.fetch_add(1, Ordering::Relaxed);
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, "invalid-token"));
        }
        Ok(())
    }
}

impl IntoResponse for VaultError {
    fn into_response(self) -> Response {
        let err = match &self {
            VaultError::EmptyScope | VaultError::Malformed(_) | VaultError::Attestation(_) => {
                ApiError::bad_request("malformed-request")
            }
            VaultError::NoKey(_) => ApiError::new(StatusCode::NOT_FOUND, "no-key"),
            VaultError::AttestationFailed(_) => ApiError::new(StatusCode::FORBIDDEN, "attestation-failed"),
            VaultError::Unseal | VaultError::Crypto(_) | VaultError::Persistence(_) => {
                tracing::error!(error = %self, "vault internal error");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        err.into_response()
    }
}

pub fn router(vault: Arc<KeyVault>) -> Router {
    let mut r = Router::new()
        .route("/v1/keys/:scope/public", post(public_route))
        .route("/v1/keys/:scope/private", post(private_route))
        .route("/health", get(|| async { "ok" }));
    if vault.config.audit_route {
        r = r.route("/v1/audit", get(audit_route));
    }
    r.with_state(vault)
}

async fn public_route(
    State(vault): State<Arc<KeyVault>>,
    Path(scope): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<PublicKeyResponse>, Response> {
    vault.admit(&headers).map_err(IntoResponse::into_response)?;
    let challenge: ChallengeMessage = serde_json::from_slice(&body)
        .map_err(|e| VaultError::Malformed(e.to_string()).into_response())?;
    vault
        .serve_public_key(&scope, &challenge)
        .map(Json)
        .map_err(IntoResponse::into_response)
}

async fn private_route(
    State(vault): State<Arc<KeyVault>>,
    Path(scope): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<PrivateKeyResponse>, Response> {
    vault.admit(&headers).map_err(IntoResponse::into_response)?;
    let req: PrivateKeyRequest = serde_json::from_slice(&body)
        .map_err(|e| VaultError::Malformed(e.to_string()).into_response())?;
    vault
        .serve_private_key(&scope, &req.attestation_endpoint)
        .await
        .map(Json)
        .map_err(IntoResponse::into_response)
}

async fn audit_route(State(vault): State<Arc<KeyVault>>) -> Json<VaultAudit> {
    Json(vault.audit())
}

#[derive(Debug, Error)]
pub enum VaultClientError {
    #[error("vault request failed: {0}")]
    Transport(String),
    #[error("request refused by policy enforcement ({0})")]
    Refused(StatusCode),
    #[error("vault refused to attest this consumer")]
    AttestationRejected,
    #[error("no key exists for the scope")]
    NoKey,
    #[error("vault is not trusted: {0}")]
    VaultNotTrusted(AttestationError),
    #[error("unexpected vault response: {0}")]
    Malformed(String),
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

/// Client side of the vault protocol.
#[derive(Debug, Clone)]
pub struct VaultClient {
    http: reqwest::Client,
    base: String,
}

impl VaultClient {
    pub fn new(http: reqwest::Client, base: impl Into<String>) -> Self {
        Self {
            http,
            base: base.into().trim_end_matches('/').to_owned(),
        }
    }

    /// Attests the vault, then returns the scope's public key plus the time
    /// the attested exchange took.
    pub async fn fetch_public_key(
        &self,
        token: &str,
        scope: &str,
        avs_root_public: &[u8; 32],
        expected_vault: &Measurement,
    ) -> Result<(PublicKeyInfo, Duration), VaultClientError> {
        let started = Instant::now();
        let (state, challenge) = attestation::begin_challenge();
        let resp = self
            .http
            .post(format!("{}/v1/keys/{scope}/public", self.base))
            .header(AUTH_HEADER, token)
            .json(&challenge)
            .send()
            .await
            .map_err(|e| VaultClientError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(status_error(resp).await);
        }
        let body: PublicKeyResponse = resp
            .json()
            .await
            .map_err(|e| VaultClientError::Malformed(e.to_string()))?;
        let session = attestation::ra_verify(avs_root_public, expected_vault, state, &body.handshake)
            .map_err(VaultClientError::VaultNotTrusted)?;
        let payload = envelope::unwrap_key(&*session.shared_key, &body.key)
            .map_err(|e| VaultClientError::Malformed(e.to_string()))?;
        let info: PublicKeyInfo =
            serde_json::from_slice(&payload).map_err(|e| VaultClientError::Malformed(e.to_string()))?;
        Ok((info, started.elapsed()))
    }

    pub async fn request_private_key(
        &self,
        token: &str,
        scope: &str,
        attestation_endpoint: &str,
    ) -> Result<PrivateKeyResponse, VaultClientError> {
        let resp = self
            .http
            .post(format!("{}/v1/keys/{scope}/private", self.base))
            .header(AUTH_HEADER, token)
            .json(&PrivateKeyRequest {
                attestation_endpoint: attestation_endpoint.to_owned(),
            })
            .send()
            .await
            .map_err(|e| VaultClientError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(status_error(resp).await);
        }
        resp.json()
            .await
            .map_err(|e| VaultClientError::Malformed(e.to_string()))
    }

    pub async fn audit(&self) -> Result<VaultAudit, VaultClientError> {
        let resp = self
            .http
            .get(format!("{}/v1/audit", self.base))
            .send()
            .await
            .map_err(|e| VaultClientError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(status_error(resp).await);
        }
        resp.json()
            .await
            .map_err(|e| VaultClientError::Malformed(e.to_string()))
    }
}

async fn status_error(resp: reqwest::Response) -> VaultClientError {
    let status = resp.status();
    let code = resp.json::<ErrorBody>().await.map(|b| b.error).unwrap_or_default();
    match (status, code.as_str()) {
        (StatusCode::FORBIDDEN, "attestation-failed") => VaultClientError::AttestationRejected,
        (StatusCode::NOT_FOUND, _) => VaultClientError::NoKey,
        (StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN, _) => VaultClientError::Refused(status),
        _ => VaultClientError::Transport(format!("vault answered {status} {code}")),
    }
}
