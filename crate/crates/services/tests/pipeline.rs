//! End-to-end flows across IdM, PEPs, vault, broker and agents over loopback HTTP.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use vaultcast_core::attestation::{compute_measurement, AttestationService, Measurement};
use vaultcast_core::measurement::{Energy, ValueGenerator};
use vaultcast_services::agents::{
    consumer_run, entity_id, producer_run, AgentError, ConsumerConfig, Credentials, Mode, ProducerConfig,
    SecureEndpoints, TrustAnchors, READING_ATTR,
};
use vaultcast_services::broker::{self, BrokerConfig, ContextBroker};
use vaultcast_services::http::{client, spawn, ServiceHandle};
use vaultcast_services::idm::{self, CredentialSpec, IdentityStore, Role};
use vaultcast_services::pep::{self, Pep, PepConfig};
use vaultcast_services::vault::{self, KeyVault, VaultConfig, VAULT_CODE_IDENTITY};
use vaultcast_services::AUTH_HEADER;

const CONSUMER_CODE: &str = "consumer-aggregator-v1";

struct Stack {
    avs: AttestationService,
    vault: Arc<KeyVault>,
    broker: Arc<ContextBroker>,
    broker_pep: Arc<Pep>,
    idm_url: String,
    vault_pep_url: String,
    broker_pep_url: String,
    handles: Vec<ServiceHandle>,
}

impl Stack {
    async fn start() -> Self {
        let avs = AttestationService::generate();
        let store = Arc::new(IdentityStore::new(idm::DEFAULT_TOKEN_TTL));
        for (user, role) in [("meter", Role::Producer), ("aggregator", Role::Consumer)] {
            store
                .register(&CredentialSpec {
                    username: user.into(),
                    password: format!("{user}-pw"),
                    roles: BTreeSet::from([role]),
                })
                .unwrap();
        }
        let idm_h = spawn("127.0.0.1:0", idm::router(store)).await.unwrap();

        let vault = KeyVault::open(
            avs.provision(VAULT_CODE_IDENTITY).unwrap(),
            VaultConfig {
                deployment_secret: b"test deployment".to_vec(),
                avs_root_public: avs.root_public(),
                expected_consumer_measurement: compute_measurement(CONSUMER_CODE).unwrap(),
                state_path: None,
                audit_route: true,
                require_forwarded_subject: true,
                attestation_timeout: Duration::from_secs(5),
            },
        )
        .unwrap();
        let vault_h = spawn("127.0.0.1:0", vault::router(vault.clone())).await.unwrap();
        let vault_pep = Pep::new(
            PepConfig::new(vault_h.url(), idm_h.url(), None)
                .with_route(Some("POST"), "/v1/keys/*/public", Role::Producer)
                .with_route(Some("POST"), "/v1/keys/*/private", Role::Consumer),
        );
        let vault_pep_h = spawn("127.0.0.1:0", pep::router(vault_pep)).await.unwrap();

        let broker = ContextBroker::new(BrokerConfig::default());
        let broker_h = spawn("127.0.0.1:0", broker::router(broker.clone())).await.unwrap();
        let broker_pep = Pep::new(
            PepConfig::new(broker_h.url(), idm_h.url(), None)
                .with_route(Some("POST"), "/v2/entities", Role::Producer)
                .with_route(Some("POST"), "/v2/subscriptions", Role::Consumer),
        );
        let broker_pep_h = spawn("127.0.0.1:0", pep::router(broker_pep.clone())).await.unwrap();

        Self {
            vault,
            broker,
            broker_pep,
            idm_url: idm_h.url(),
            vault_pep_url: vault_pep_h.url(),
            broker_pep_url: broker_pep_h.url(),
            handles: vec![idm_h, vault_h, vault_pep_h, broker_h, broker_pep_h],
            avs,
        }
    }

    fn producer(&self, id: &str, count: u64, vault_measurement: Measurement, password: &str) -> ProducerConfig {
        ProducerConfig {
            producer_id: id.into(),
            region: "region-A".into(),
            mode: Mode::Secure,
            broker_url: self.broker_pep_url.clone(),
            secure: Some(SecureEndpoints {
                idm_url: self.idm_url.clone(),
                vault_url: self.vault_pep_url.clone(),
                credentials: Credentials {
                    username: "meter".into(),
                    password: password.into(),
                },
            }),
            trust: Some(TrustAnchors {
                avs_root_public: self.avs.root_public(),
                expected_measurement: vault_measurement,
            }),
            count,
            interval_ms: 0,
            seed: 7,
            generator: ValueGenerator::Constant {
                wh: Energy::from_milli_wh(100_000),
            },
        }
    }

    fn consumer(&self) -> ConsumerConfig {
        ConsumerConfig {
            consumer_id: "agg-A".into(),
            region: "region-A".into(),
            mode: Mode::Secure,
            broker_url: self.broker_pep_url.clone(),
            secure: Some(SecureEndpoints {
                idm_url: self.idm_url.clone(),
                vault_url: self.vault_pep_url.clone(),
                credentials: Credentials {
                    username: "aggregator".into(),
                    password: "aggregator-pw".into(),
                },
            }),
            listen: "127.0.0.1:0".into(),
            callback_base: None,
            window_ms: 60_000,
        }
    }

    async fn stop(self) {
        for h in self.handles {
            h.shutdown().await;
        }
    }
}

fn vault_measurement() -> Measurement {
    compute_measurement(VAULT_CODE_IDENTITY).unwrap()
}

#[tokio::test]
async fn secure_flow_delivers_and_aggregates() {
    let stack = Stack::start().await;
    let http = client();
    let p1 = producer_run(stack.producer("p1", 1, vault_measurement(), "meter-pw"), http.clone())
        .await
        .unwrap();
    assert_eq!(p1.errors, 0);

    let consumer = consumer_run(stack.consumer(), Some(stack.avs.provision(CONSUMER_CODE).unwrap()), http.clone())
        .await
        .unwrap();
    assert!(consumer.attestation_ms.is_some());

    let mut summaries = Vec::new();
    for id in ["p2", "p3"] {
        summaries.push(
            producer_run(stack.producer(id, 10, vault_measurement(), "meter-pw"), http.clone())
                .await
                .unwrap(),
        );
    }
    assert!(stack.broker.wait_idle(Duration::from_secs(10)).await);

    let stored = stack.broker.query_entity(&entity_id("region-A", "p3")).unwrap();
    let value = &stored.attrs[READING_ATTR].value;
    assert!(value.get("ciphertext").is_some(), "broker holds an envelope, got {value}");

    let audit = stack.vault.audit();
    assert_eq!(audit.get("public_key_served"), 3);
    assert_eq!(audit.get("private_key_served"), 1);
    assert_eq!(audit.get("key_requests"), 4);

    let expected: u64 = summaries
        .iter()
        .flat_map(|s| &s.cycles)
        .map(|c| c.consumption_wh.milli_wh())
        .sum();
    let state = consumer.shutdown().await;
    assert_eq!(state.totals_by_region()["region-A"], Energy::from_milli_wh(expected));
    assert_eq!(state.stats().poison, 0);
    assert_eq!(state.timings().len(), 20);
    stack.stop().await;
}

#[tokio::test]
async fn bad_password_never_reaches_broker() {
    let stack = Stack::start().await;
    let err = producer_run(stack.producer("p1", 5, vault_measurement(), "wrong"), client())
        .await
        .unwrap_err();
    assert!(matches!(err, AgentError::AuthenticationFailed));
    let stats = stack.broker_pep.stats();
    assert_eq!((stats.forwarded, stats.unauthorized, stats.forbidden), (0, 0, 0));
    assert_eq!(stack.broker.stats().enqueued, 0);
    stack.stop().await;
}

#[tokio::test]
async fn producer_aborts_on_unexpected_vault_measurement() {
    let stack = Stack::start().await;
    let wrong = compute_measurement("key-vault-v0").unwrap();
    let err = producer_run(stack.producer("p1", 5, wrong, "meter-pw"), client())
        .await
        .unwrap_err();
    assert!(matches!(err, AgentError::AttestationFailed(_)));
    assert!(stack.broker.query_entity(&entity_id("region-A", "p1")).is_err());
    assert_eq!(stack.broker_pep.stats().forwarded, 0);
    stack.stop().await;
}

#[tokio::test]
async fn consumer_with_wrong_code_gets_no_key() {
    let stack = Stack::start().await;
    let http = client();
    producer_run(stack.producer("p1", 1, vault_measurement(), "meter-pw"), http.clone())
        .await
        .unwrap();
    let impostor = stack.avs.provision("consumer-aggregator-patched").unwrap();
    let err = consumer_run(stack.consumer(), Some(impostor), http).await.unwrap_err();
    assert!(matches!(err, AgentError::AttestationFailed(_)), "{err:?}");
    let audit = stack.vault.audit();
    assert_eq!(audit.get("attestation_failed"), 1);
    assert_eq!(audit.get("private_key_served"), 0);
    stack.stop().await;
}

#[tokio::test]
async fn consumer_before_any_key_gets_not_found() {
    let stack = Stack::start().await;
    let err = consumer_run(stack.consumer(), Some(stack.avs.provision(CONSUMER_CODE).unwrap()), client())
        .await
        .unwrap_err();
    assert!(err.to_string().contains("no key"), "{err}");
    stack.stop().await;
}

#[tokio::test]
async fn vault_refuses_requests_that_bypass_the_pep() {
    let stack = Stack::start().await;
    let direct = stack.handles[1].url();
    let resp = client()
        .post(format!("{direct}/v1/keys/region-A/private"))
        .json(&serde_json::json!({"attestation_endpoint": "http://127.0.0.1:9/attest"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 401);
    assert_eq!(stack.vault.audit().get("auth_failed"), 1);
    stack.stop().await;
}

async fn counting_upstream() -> (Arc<AtomicU64>, ServiceHandle) {
    let hits = Arc::new(AtomicU64::new(0));
    let h = hits.clone();
    let app = Router::new().fallback(move || {
        let h = h.clone();
        async move {
            h.fetch_add(1, Ordering::SeqCst);
            "upstream"
        }
    });
    (hits, spawn("127.0.0.1:0", app).await.unwrap())
}

#[tokio::test]
async fn rejected_pep_requests_never_reach_upstream() {
    let stack = Stack::start().await;
    let (hits, upstream) = counting_upstream().await;
    let guard = Pep::new(PepConfig::new(upstream.url(), stack.idm_url.clone(), Some(Role::Consumer)));
    let guard_h = spawn("127.0.0.1:0", pep::router(guard.clone())).await.unwrap();
    let http = client();
    let idm = idm::IdmClient::new(http.clone(), stack.idm_url.clone());
    let producer_token = idm.issue_token("meter", "meter-pw").await.unwrap().access_token;
    let consumer_token = idm.issue_token("aggregator", "aggregator-pw").await.unwrap().access_token;

    let url = format!("{}/v2/anything?x=1", guard_h.url());
    let cases: [(Option<&str>, u16); 4] = [
        (None, 401),
        (Some(""), 401),
        (Some("forged-token"), 401),
        (Some(&producer_token), 403),
    ];
    for (token, status) in cases {
        let mut req = http.post(&url).body("payload");
        if let Some(t) = token {
            req = req.header(AUTH_HEADER, t);
        }
        assert_eq!(req.send().await.unwrap().status(), status);
    }
    assert_eq!(hits.load(Ordering::SeqCst), 0);

    let ok = http.post(&url).header(AUTH_HEADER, &consumer_token).send().await.unwrap();
    assert_eq!(ok.status(), 200);
    assert_eq!(ok.text().await.unwrap(), "upstream");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    let stats = guard.stats();
    assert_eq!((stats.unauthorized, stats.forbidden, stats.forwarded), (3, 1, 1));

    guard_h.shutdown().await;
    upstream.shutdown().await;
    stack.stop().await;
}
