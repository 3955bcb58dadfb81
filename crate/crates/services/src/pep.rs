//! Policy-enforcement point: a reverse proxy that admits a request only if its
//! `X-Auth-Token` validates at the IdM and carries the required role.
//!
//! Each proxy fronts one upstream. The role needed for a request comes from
//! the first matching entry in `routes` (method + path glob), falling back to
//! `required_role`. Rejected requests never reach the upstream.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde::{Deserialize, Serialize};

use crate::http::ApiError;
use crate::idm::{IdmClient, IdmError, Principal, Role};
use crate::{AUTH_HEADER, SUBJECT_HEADER};

const MAX_BODY: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRule {
    /// HTTP method, any if absent.
    #[serde(default)]
    pub method: Option<String>,
    /// Path glob, e.g. `/v1/keys/*/public`.
    pub path: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PepConfig {
    pub upstream_url: String,
    pub idm_url: String,
    /// Role needed when no route rule matches; any valid token if absent.
    #[serde(default)]
    pub required_role: Option<Role>,
    #[serde(default)]
    pub routes: Vec<RouteRule>,
    /// Cache successful validations for this long. Off by default.
    #[serde(default)]
    pub validation_cache_ms: Option<u64>,
}

impl PepConfig {
    pub fn new(upstream_url: impl Into<String>, idm_url: impl Into<String>, required_role: Option<Role>) -> Self {
        Self {
            upstream_url: upstream_url.into(),
            idm_url: idm_url.into(),
            required_role,
            routes: Vec::new(),
            validation_cache_ms: None,
        }
    }

    pub fn with_route(mut self, method: Option<&str>, path: &str, role: Role) -> Self {
        self.routes.push(RouteRule {
            method: method.map(str::to_owned),
            path: path.to_owned(),
            role,
        });
        self
    }

    fn role_for(&self, method: &str, path: &str) -> Option<Role> {
        self.routes
            .iter()
            .find(|r| {
                r.method.as_deref().map_or(true, |m| m.eq_ignore_ascii_case(method))
                    && vaultcast_core::glob::matches(&r.path, path)
            })
            .map(|r| r.role)
            .or(self.required_role)
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PepStats {
    pub forwarded: u64,
    pub unauthorized: u64,
    pub forbidden: u64,
    pub upstream_errors: u64,
}

#[derive(Default)]
struct Counters {
    forwarded: AtomicU64,
    unauthorized: AtomicU64,
    forbidden: AtomicU64,
    upstream_errors: AtomicU64,
}

pub struct Pep {
    config: PepConfig,
    idm: IdmClient,
    http: reqwest::Client,
    cache: Mutex<HashMap<String, (Instant, Principal)>>,
    counters: Counters,
}

impl Pep {
    pub fn new(config: PepConfig) -> Arc<Self> {
        let http = crate::http::client();
        Arc::new(Self {
            idm: IdmClient::new(http.clone(), config.idm_url.clone()),
            config,
            http,
            cache: Mutex::new(HashMap::new()),
            counters: Counters::default(),
        })
    }

    pub fn stats(&self) -> PepStats {
        PepStats {
            forwarded: self.counters.forwarded.load(Ordering::Relaxed),
            unauthorized: self.counters.unauthorized.load(Ordering::Relaxed),
            forbidden: self.counters.forbidden.load(Ordering::Relaxed),
            upstream_errors: self.counters.upstream_errors.load(Ordering::Relaxed),
        }
    }

    async fn principal(&self, token: &str) -> Result<Principal, IdmError> {
        let ttl = self.config.validation_cache_ms.map(Duration::from_millis);
        if let Some(ttl) = ttl {
            if let Some((at, p)) = self.cache.lock().unwrap().get(token) {
                if at.elapsed() < ttl {
                    return Ok(p.clone());
                }
            }
        }
        let principal = self.idm.validate(token).await?;
        if ttl.is_some() {
            self.cache
                .lock()
                .unwrap()
                .insert(token.to_owned(), (Instant::now(), principal.clone()));
        }
        Ok(principal)
    }

    async fn authorize(&self, headers: &HeaderMap, method: &str, path: &str) -> Result<Principal, ApiError> {
        let unauthorized = || {
            self.counters.unauthorized.fetch_add(1, Ordering::Relaxed);
            ApiError::new(StatusCode::UNAUTHORIZED, "invalid-token")
        };
        let token = headers
            .get(AUTH_HEADER)
            .and_then(|v| v.to_str().ok())
            .filter(|t| !t.is_empty())
            .ok_or_else(unauthorized)?;
        let principal = match self.principal(token).await {
            Ok(p) => p,
            Err(IdmError::Unavailable(e)) => {
                tracing::warn!(error = %e, "token validation unavailable");
                return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "idm-unavailable"));
            }
            Err(_) => return Err(unauthorized()),
        };
        if let Some(role) = self.config.role_for(method, path) {
            if !principal.roles.contains(&role) {
                self.counters.forbidden.fetch_add(1, Ordering::Relaxed);
                return Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden"));
            }
        }
        Ok(principal)
    }
}

fn is_hop_by_hop(name: &HeaderName) -> bool {
    matches!(
        name.as_str(),
        "host" | "connection" | "keep-alive" | "transfer-encoding" | "content-length" | "upgrade"
            | "proxy-connection" | "te" | "trailer"
    )
}

pub fn router(pep: Arc<Pep>) -> Router {
    Router::new().fallback(enforce).with_state(pep)
}

async fn enforce(State(pep): State<Arc<Pep>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let path = parts.uri.path().to_owned();
    let principal = match pep.authorize(&parts.headers, parts.method.as_str(), &path).await {
        Ok(p) => p,
        Err(e) => {
            tracing::debug!(method = %parts.method, %path, code = e.code, "request rejected");
            return e.into_response();
        }
    };

    let body = match to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(_) => return ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "body-too-large").into_response(),
    };
    let target = format!(
        "{}{}",
        pep.config.upstream_url.trim_end_matches('/'),
        parts.uri.path_and_query().map_or("/", |pq| pq.as_str())
    );
    let mut headers = HeaderMap::new();
    for (name, value) in &parts.headers {
        if !is_hop_by_hop(name) {
            headers.append(name.clone(), value.clone());
        }
    }
    match HeaderValue::from_str(&principal.subject) {
        Ok(v) => {
            headers.insert(SUBJECT_HEADER, v);
        }
        Err(_) => return ApiError::bad_request("invalid-subject").into_response(),
    }

    let upstream = pep
        .http
        .request(parts.method.clone(), &target)
        .headers(headers)
        .body(body)
        .send()
        .await;
    let upstream = match upstream {
        Ok(r) => r,
        Err(e) => {
            pep.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(%target, error = %e, "upstream unreachable");
            return ApiError::new(StatusCode::BAD_GATEWAY, "upstream-unavailable").into_response();
        }
    };
    pep.counters.forwarded.fetch_add(1, Ordering::Relaxed);
    tracing::debug!(method = %parts.method, %path, subject = %principal.subject, status = %upstream.status(), "forwarded");

    let status = upstream.status();
    let mut response_headers = HeaderMap::new();
    for (name, value) in upstream.headers() {
        if !is_hop_by_hop(name) {
            response_headers.append(name.clone(), value.clone());
        }
    }
    let bytes = match upstream.bytes().await {
        Ok(b) => b,
        Err(_) => {
            pep.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
            return ApiError::new(StatusCode::BAD_GATEWAY, "upstream-unavailable").into_response();
        }
    };
    let mut response = Response::new(Body::from(bytes));
    *response.status_mut() = status;
    *response.headers_mut() = response_headers;
    response
}
