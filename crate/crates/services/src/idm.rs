//! Identity manager: password credentials, opaque bearer tokens and a
//! validation endpoint.
//!
//! Routes:
//! * `POST /v1/tokens` `{"username","password"}` → 201 `{"access_token","expires_in","roles"}`
//! * `GET /v1/tokens/validate?token=...` → 200 `{"subject","roles"}` | 401

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::http::ApiError;

pub const DEFAULT_TOKEN_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Producer,
    Consumer,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Producer => "producer",
            Role::Consumer => "consumer",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdmError {
    #[error("authentication-failed")]
    AuthenticationFailed,
    #[error("invalid-token")]
    InvalidToken,
    #[error("user {0:?} already registered")]
    DuplicateUser(String),
    #[error("bootstrap file: {0}")]
    Bootstrap(String),
    #[error("identity manager unreachable: {0}")]
    Unavailable(String),
}

/// One entry of the credential bootstrap file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialSpec {
    pub username: String,
    pub password: String,
    pub roles: BTreeSet<Role>,
}

struct Credential {
    salt: [u8; 16],
    password_digest: [u8; 32],
    roles: BTreeSet<Role>,
}

fn digest(salt: &[u8; 16], password: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    h.finalize().into()
}

/// Bearer token with its binding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token: String,
    pub subject: String,
    pub roles: BTreeSet<Role>,
    /// Expiry, milliseconds since the Unix epoch.
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub subject: String,
    pub roles: BTreeSet<Role>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct IdentityStore {
    credentials: RwLock<HashMap<String, Credential>>,
    tokens: RwLock<HashMap<String, AccessToken>>,
    ttl: Duration,
    // Spent on unknown usernames so both failure paths hash once.
    decoy_salt: [u8; 16],
}

impl IdentityStore {
    pub fn new(ttl: Duration) -> Self {
        let mut decoy_salt = [0u8; 16];
        OsRng.fill_bytes(&mut decoy_salt);
        Self {
            credentials: RwLock::new(HashMap::new()),
            tokens: RwLock::new(HashMap::new()),
            ttl,
            decoy_salt,
        }
    }

    pub fn register(&self, spec: &CredentialSpec) -> Result<(), IdmError> {
        let mut salt = [0u8; 16];
        OsRng.fill_bytes(&mut salt);
        let cred = Credential {
            salt,
            password_digest: digest(&salt, &spec.password),
            roles: spec.roles.clone(),
        };
        let mut creds = self.credentials.write().unwrap();
        if creds.contains_key(&spec.username) {
            return Err(IdmError::DuplicateUser(spec.username.clone()));
        }
        creds.insert(spec.username.clone(), cred);
        Ok(())
    }

    /// Loads a JSON array of `{"username","password","roles"}`.
    pub fn load_bootstrap(&self, path: &Path) -> Result<usize, IdmError> {
        let text = std::fs::read_to_string(path).map_err(|e| IdmError::Bootstrap(e.to_string()))?;
        let specs: Vec<CredentialSpec> =
            serde_json::from_str(&text).map_err(|e| IdmError::Bootstrap(e.to_string()))?;
        for spec in &specs {
            self.register(spec)?;
        }
        Ok(specs.len())
    }

    pub fn issue_token(&self, username: &str, password: &str) -> Result<AccessToken, IdmError> {
        let roles = {
            let creds = self.credentials.read().unwrap();
            match creds.get(username) {
                Some(c) => {
                    let ok: bool = digest(&c.salt, password).ct_eq(&c.password_digest).into();
                    ok.then(|| c.roles.clone())
                }
                None => {
                    let _ = digest(&self.decoy_salt, password);
                    None
                }
            }
        }
        .ok_or(IdmError::AuthenticationFailed)?;

        let mut raw = [0u8; 32];
        OsRng.fill_bytes(&mut raw);
        let token = AccessToken {
            token: URL_SAFE_NO_PAD.encode(raw),
            subject: username.to_owned(),
            roles,
            expires_at: now_ms() + self.ttl.as_millis() as u64,
        };
        self.tokens
            .write()
            .unwrap()
            .insert(token.token.clone(), token.clone());
        Ok(token)
    }

    pub fn validate_token(&self, token: &str) -> Result<Principal, IdmError> {
        let now = now_ms();
        {
            let tokens = self.tokens.read().unwrap();
            match tokens.get(token) {
                Some(t) if now < t.expires_at => {
                    return Ok(Principal {
                        subject: t.subject.clone(),
                        roles: t.roles.clone(),
                    })
                }
                None => return Err(IdmError::InvalidToken),
                Some(_) => {}
            }
        }
        self.tokens.write().unwrap().remove(token);
        Err(IdmError::InvalidToken)
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }
}

#[derive(Debug, Deserialize)]
struct TokenRequest {
    username: String,
    password: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TokenResponse {
    pub access_token: String,
    pub expires_in: u64,
    pub roles: BTreeSet<Role>,
}

#[derive(Debug, Deserialize)]
struct ValidateQuery {
    token: String,
}

pub fn router(store: Arc<IdentityStore>) -> Router {
    Router::new()
        .route("/v1/tokens", post(issue))
        .route("/v1/tokens/validate", get(validate))
        .route("/health", get(|| async { "ok" }))
        .with_state(store)
}

async fn issue(
    State(store): State<Arc<IdentityStore>>,
    body: axum::body::Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: TokenRequest =
        serde_json::from_slice(&body).map_err(|_| ApiError::bad_request("malformed-request"))?;
    let token = store.issue_token(&req.username, &req.password).map_err(|_| {
        tracing::info!(username = %req.username, "token request refused");
        ApiError::new(StatusCode::UNAUTHORIZED, "authentication-failed")
    })?;
    Ok((
        StatusCode::CREATED,
        Json(TokenResponse {
            access_token: token.token,
            expires_in: store.ttl().as_secs(),
            roles: token.roles,
        }),
    ))
}

async fn validate(
    State(store): State<Arc<IdentityStore>>,
    Query(q): Query<ValidateQuery>,
) -> Result<Json<Principal>, ApiError> {
    store
        .validate_token(&q.token)
        .map(Json)
        .map_err(|_| ApiError::new(StatusCode::UNAUTHORIZED, "invalid-token"))
}

/// Client for the IdM HTTP API.
#[derive(Debug, Clone)]
pub struct IdmClient {
    http: reqwest::Client,
    base: String,
}

impl IdmClient {
    pub fn new(http: reqwest::Client, base: impl Into<String>) -> Self {
        Self {
            http,
            base: base.into().trim_end_matches('/').to_owned(),
        }
    }

    pub async fn issue_token(&self, username: &str, password: &str) -> Result<TokenResponse, IdmError> {
        let resp = self
            .http
            .post(format!("{}/v1/tokens", self.base))
            .json(&serde_json::json!({ "username": username, "password": password }))
            .send()
            .await
            .map_err(|e| IdmError::Unavailable(e.to_string()))?;
        match resp.status() {
            StatusCode::CREATED => resp
                .json()
                .await
                .map_err(|e| IdmError::Unavailable(e.to_string())),
            StatusCode::UNAUTHORIZED => Err(IdmError::AuthenticationFailed),
            other => Err(IdmError::Unavailable(format!("unexpected status {other}"))),
        }
    }

    pub async fn validate(&self, token: &str) -> Result<Principal, IdmError> {
        let resp = self
            .http
            .get(format!("{}/v1/tokens/validate", self.base))
            .query(&[("token", token)])
            .send()
            .await
            .map_err(|e| IdmError::Unavailable(e.to_string()))?;
        match resp.status() {
            StatusCode::OK => resp
                .json()
                .await
                .map_err(|e| IdmError::Unavailable(e.to_string())),
            StatusCode::UNAUTHORIZED => Err(IdmError::InvalidToken),
            other => Err(IdmError::Unavailable(format!("unexpected status {other}"))),
        }
    }
}
