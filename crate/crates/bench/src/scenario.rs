//! Launches the topology for one scenario, runs the agents and assembles the report.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::distributions::Alphanumeric;
use rand::rngs::OsRng;
use rand::{Rng, RngCore};
use tokio::net::TcpListener;
use tokio::task::JoinSet;
use vaultcast_core::attestation::{compute_measurement, AttestationService};
use vaultcast_core::measurement::{CycleTiming, Energy};
use vaultcast_services::agents::{
    consumer_run_on, ConnectedProducer, ConsumerConfig, ConsumerHandle, ConsumerState, Credentials, Mode,
    ProducerConfig, ProducerSummary, SecureEndpoints, TrustAnchors,
};
use vaultcast_services::broker::{self, BrokerConfig, ContextBroker};
use vaultcast_services::http::{self, ServiceHandle};
use vaultcast_services::idm::{self, CredentialSpec, IdentityStore, Role};
use vaultcast_services::pep::{self, Pep, PepConfig};
use vaultcast_services::vault::{self, KeyVault, VaultConfig, VAULT_CODE_IDENTITY};

use crate::config::ScenarioConfig;
use crate::report::{write_artifacts, AttestationTiming, Party, PepSnapshot, RunReport};
use crate::wiretap::{ConnectionCapture, WireTap};
use crate::BenchError;

/// Code identity consumers are provisioned and expected as.
pub const CONSUMER_CODE_IDENTITY: &str = "consumer-aggregator-v1";

const HEALTH_DEADLINE: Duration = Duration::from_secs(10);
const BROKER_STATE_FILE: &str = "broker-state.jsonl";
const VAULT_STATE_FILE: &str = "vault-keys.jsonl";

/// Everything a finished run produced.
pub struct ScenarioRun {
    pub report: RunReport,
    pub timings: Vec<CycleTiming>,
    pub producers: Vec<ProducerSummary>,
    /// Captures keyed by link name, when wire capture was on.
    pub wire: BTreeMap<String, Vec<ConnectionCapture>>,
    /// Broker persisted state as it was at shutdown.
    pub broker_state: Vec<u8>,
    pub artifacts: Vec<PathBuf>,
    pub out_dir: PathBuf,
    _temp: Option<tempfile::TempDir>,
}

struct SecureServices {
    avs: AttestationService,
    idm_url: String,
    vault: Arc<KeyVault>,
    vault_pep: Arc<Pep>,
    vault_pep_url: String,
    broker_pep: Arc<Pep>,
    passwords: BTreeMap<String, String>,
}

struct Topology {
    secure: Option<SecureServices>,
    broker: Arc<ContextBroker>,
    /// Where producers and consumers send broker requests.
    broker_entry: String,
    handles: Vec<ServiceHandle>,
    taps: Vec<WireTap>,
}

fn addr(cfg: &ScenarioConfig, port: u16) -> String {
    format!("{}:{port}", cfg.host)
}

fn password() -> String {
    OsRng.sample_iter(&Alphanumeric).take(24).map(char::from).collect()
}

fn producer_user(id: &str) -> String {
    format!("meter-{id}")
}

fn consumer_user(region: &str) -> String {
    format!("aggregator-{region}")
}

fn setup(what: &str, e: impl std::fmt::Display) -> BenchError {
    BenchError::SetupFailed(format!("{what}: {e}"))
}

impl Topology {
    async fn launch(cfg: &ScenarioConfig, dir: &Path, handles: &mut Vec<ServiceHandle>) -> Result<Self, BenchError> {
        let broker = ContextBroker::open(BrokerConfig::default(), &dir.join(BROKER_STATE_FILE))
            .map_err(|e| setup("broker", e))?;
        let broker_h = http::spawn(&addr(cfg, cfg.ports.broker), broker::router(broker.clone()))
            .await
            .map_err(|e| setup("broker", e))?;
        let broker_url = broker_h.url();
        let broker_addr = broker_h.addr;
        handles.push(broker_h);

        let (secure, entry_addr) = match cfg.mode {
            Mode::Plain => (None, broker_addr),
            Mode::Secure => {
                let s = Self::launch_secure(cfg, dir, &broker_url, handles).await?;
                let entry = handles.last().expect("broker PEP handle").addr;
                (Some(s), entry)
            }
        };
        health_check(handles).await?;

        let mut taps = Vec::new();
        let broker_entry = if cfg.wire_capture {
            let tap = WireTap::start("producer-broker", &addr(cfg, 0), entry_addr)
                .await
                .map_err(|e| setup("wire tap", e))?;
            let url = tap.url();
            taps.push(tap);
            url
        } else {
            format!("http://{entry_addr}")
        };
        Ok(Self {
            secure,
            broker,
            broker_entry,
            handles: Vec::new(),
            taps,
        })
    }

    async fn launch_secure(
        cfg: &ScenarioConfig,
        dir: &Path,
        broker_url: &str,
        handles: &mut Vec<ServiceHandle>,
    ) -> Result<SecureServices, BenchError> {
        let avs = AttestationService::generate();
        let store = Arc::new(IdentityStore::new(idm::DEFAULT_TOKEN_TTL));
        let mut passwords = BTreeMap::new();
        let users = cfg
            .producer_roster()
            .into_iter()
            .map(|(id, _)| (producer_user(&id), Role::Producer))
            .chain(cfg.region_names().into_iter().map(|r| (consumer_user(&r), Role::Consumer)));
        for (username, role) in users {
            let pw = password();
            store
                .register(&CredentialSpec {
                    username: username.clone(),
                    password: pw.clone(),
                    roles: BTreeSet::from([role]),
                })
                .map_err(|e| setup("idm", e))?;
            passwords.insert(username, pw);
        }
        let idm_h = http::spawn(&addr(cfg, cfg.ports.idm), idm::router(store))
            .await
            .map_err(|e| setup("idm", e))?;
        let idm_url = idm_h.url();
        handles.push(idm_h);

        let mut secret = vec![0u8; 32];
        OsRng.fill_bytes(&mut secret);
        let vault = KeyVault::open(
            avs.provision(VAULT_CODE_IDENTITY).map_err(|e| setup("vault", e))?,
            VaultConfig {
                deployment_secret: secret,
                avs_root_public: avs.root_public(),
                expected_consumer_measurement: compute_measurement(CONSUMER_CODE_IDENTITY)
                    .map_err(|e| setup("vault", e))?,
                state_path: Some(dir.join(VAULT_STATE_FILE)),
                audit_route: cfg.audit_route,
                require_forwarded_subject: true,
                attestation_timeout: Duration::from_secs(10),
            },
        )
        .map_err(|e| setup("vault", e))?;
        let vault_h = http::spawn(&addr(cfg, cfg.ports.vault), vault::router(vault.clone()))
            .await
            .map_err(|e| setup("vault", e))?;

        let mut vault_pep_cfg = PepConfig::new(vault_h.url(), idm_url.clone(), None)
            .with_route(Some("POST"), "/v1/keys/*/public", Role::Producer)
            .with_route(Some("POST"), "/v1/keys/*/private", Role::Consumer);
        vault_pep_cfg.validation_cache_ms = cfg.validation_cache_ms;
        handles.push(vault_h);
        let vault_pep = Pep::new(vault_pep_cfg);
        let vault_pep_h = http::spawn(&addr(cfg, cfg.ports.vault_pep), pep::router(vault_pep.clone()))
            .await
            .map_err(|e| setup("vault PEP", e))?;
        let vault_pep_url = vault_pep_h.url();
        handles.push(vault_pep_h);

        let mut broker_pep_cfg = PepConfig::new(broker_url, idm_url.clone(), None)
            .with_route(Some("POST"), "/v2/entities", Role::Producer)
            .with_route(Some("POST"), "/v2/subscriptions", Role::Consumer);
        broker_pep_cfg.validation_cache_ms = cfg.validation_cache_ms;
        let broker_pep = Pep::new(broker_pep_cfg);
        let broker_pep_h = http::spawn(&addr(cfg, cfg.ports.broker_pep), pep::router(broker_pep.clone()))
            .await
            .map_err(|e| setup("broker PEP", e))?;
        // Must stay last: `launch` reads the broker entry point from it.
        handles.push(broker_pep_h);

        Ok(SecureServices {
            avs,
            idm_url,
            vault,
            vault_pep,
            vault_pep_url,
            broker_pep,
            passwords,
        })
    }

    fn endpoints(&self, username: &str) -> Option<SecureEndpoints> {
        self.secure.as_ref().map(|s| SecureEndpoints {
            idm_url: s.idm_url.clone(),
            vault_url: s.vault_pep_url.clone(),
            credentials: Credentials {
                username: username.to_owned(),
                password: s.passwords[username].clone(),
            },
        })
    }
}

/// Any HTTP answer from `/health` within the deadline counts as up; PEPs
/// answer 401 without a token, which proves they are serving.
async fn health_check(handles: &[ServiceHandle]) -> Result<(), BenchError> {
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(1))
        .build()
        .expect("http client builds");
    let deadline = Instant::now() + HEALTH_DEADLINE;
    for h in handles {
        loop {
            match client.get(format!("{}/health", h.url())).send().await {
                Ok(_) => break,
                Err(e) if Instant::now() >= deadline => {
                    return Err(setup(&format!("health check of {}", h.addr), e));
                }
                Err(_) => tokio::time::sleep(Duration::from_millis(50)).await,
            }
        }
    }
    Ok(())
}

fn remove_state(dir: &Path) {
    for f in [BROKER_STATE_FILE, VAULT_STATE_FILE] {
        let _ = std::fs::remove_file(dir.join(f));
    }
}

/// Runs one scenario end to end.
pub async fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, BenchError> {
    cfg.validate()?;
    let (out_dir, temp) = match &cfg.out_dir {
        Some(d) => (d.clone(), None),
        None => {
            let t = tempfile::tempdir()?;
            (t.path().to_owned(), Some(t))
        }
    };
    let created_dir = !out_dir.exists();
    std::fs::create_dir_all(&out_dir)?;
    // Stale state from an earlier run would replay old subscriptions and keys.
    remove_state(&out_dir);

    let started = Instant::now();
    let mut handles = Vec::new();
    let mut topo = match Topology::launch(cfg, &out_dir, &mut handles).await {
        Ok(t) => t,
        Err(e) => {
            for h in handles {
                h.shutdown().await;
            }
            remove_state(&out_dir);
            if created_dir {
                let _ = std::fs::remove_dir_all(&out_dir);
            }
            return Err(e);
        }
    };
    topo.handles = handles;

    let outcome = drive(cfg, &mut topo).await;
    for h in topo.handles.drain(..) {
        h.shutdown().await;
    }
    let mut wire = BTreeMap::new();
    for tap in topo.taps.drain(..) {
        let name = tap.name.clone();
        wire.entry(name).or_insert_with(Vec::new).extend(tap.stop());
    }
    let (mut report, timings, producers) = match outcome {
        Ok(v) => v,
        Err(e) => {
            remove_state(&out_dir);
            if created_dir {
                let _ = std::fs::remove_dir_all(&out_dir);
            }
            return Err(e);
        }
    };
    report.wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    let broker_state = std::fs::read(out_dir.join(BROKER_STATE_FILE)).unwrap_or_default();
    let artifacts = write_artifacts(&out_dir, &report, &timings, &producers)?;
    tracing::info!(
        mode = %report.mode,
        producers = report.producers,
        median_ms = report.latency.median,
        delivered = report.delivery.delivered,
        "scenario finished"
    );
    Ok(ScenarioRun {
        report,
        timings,
        producers,
        wire,
        broker_state,
        artifacts,
        out_dir,
        _temp: temp,
    })
}

async fn start_consumer(
    cfg: &ScenarioConfig,
    topo: &mut Topology,
    index: usize,
    region: &str,
    http: &reqwest::Client,
) -> Result<ConsumerHandle, BenchError> {
    let port = if cfg.ports.consumer_base == 0 {
        0
    } else {
        cfg.ports.consumer_base + index as u16
    };
    let listen = addr(cfg, port);
    let listener = TcpListener::bind(&listen).await.map_err(|e| setup("consumer", e))?;
    let local: SocketAddr = listener.local_addr()?;
    let callback_base = if cfg.wire_capture {
        let tap = WireTap::start("broker-consumer", &addr(cfg, 0), local)
            .await
            .map_err(|e| setup("wire tap", e))?;
        let url = tap.url();
        topo.taps.push(tap);
        Some(url)
    } else {
        None
    };
    let config = ConsumerConfig {
        consumer_id: format!("aggregator-{region}"),
        region: region.to_owned(),
        mode: cfg.mode,
        broker_url: topo.broker_entry.clone(),
        secure: topo.endpoints(&consumer_user(region)),
        listen,
        callback_base,
        window_ms: vaultcast_core::measurement::DEFAULT_WINDOW_MS,
    };
    let identity = match &topo.secure {
        Some(s) => Some(s.avs.provision(CONSUMER_CODE_IDENTITY).map_err(|e| setup("consumer", e))?),
        None => None,
    };
    consumer_run_on(config, identity, http.clone(), listener)
        .await
        .map_err(|e| BenchError::Agent(format!("consumer for {region}: {e}")))
}

type Outcome = (RunReport, Vec<CycleTiming>, Vec<ProducerSummary>);

async fn drive(cfg: &ScenarioConfig, topo: &mut Topology) -> Result<Outcome, BenchError> {
    let mut report = RunReport::from_config(cfg);
    let producer_http = http::client();
    let consumer_http = http::client();

    // Steps 1-3: every producer authenticates and acquires its region key.
    let mut connecting = JoinSet::new();
    for (id, region) in cfg.producer_roster() {
        let pc = ProducerConfig {
            producer_id: id.clone(),
            region,
            mode: cfg.mode,
            broker_url: topo.broker_entry.clone(),
            secure: topo.endpoints(&producer_user(&id)),
            trust: topo.secure.as_ref().map(|s| TrustAnchors {
                avs_root_public: s.avs.root_public(),
                expected_measurement: s.vault.measurement(),
            }),
            count: cfg.cycles_per_producer,
            interval_ms: cfg.interval_ms,
            seed: cfg.seed,
            generator: cfg.generator.clone(),
        };
        let http = producer_http.clone();
        connecting.spawn(async move { (id, ConnectedProducer::connect(pc, http).await) });
    }
    let mut connected = Vec::new();
    while let Some(joined) = connecting.join_next().await {
        let (id, result) = joined.map_err(|e| BenchError::Agent(e.to_string()))?;
        match result {
            Ok(p) => connected.push(p),
            Err(e) => {
                tracing::error!(producer = %id, error = %e, "producer failed to start");
                report.producer_failures.push(format!("{id}: {e}"));
            }
        }
    }
    report.producer_failures.sort();

    // Steps 6-9: one consumer per region gets the private key and subscribes.
    let mut consumers = Vec::new();
    for (i, region) in cfg.region_names().iter().enumerate() {
        match start_consumer(cfg, topo, i, region, &consumer_http).await {
            Ok(c) => consumers.push(c),
            Err(e) => {
                for c in consumers {
                    c.shutdown().await;
                }
                return Err(e);
            }
        }
    }
    report.vault_audit_before_publish = topo.secure.as_ref().map(|s| s.vault.audit());

    // Steps 4-5 and 10-13: publication and delivery.
    let mut publishing = JoinSet::new();
    for p in connected {
        publishing.spawn(p.publish_all());
    }
    let mut producers = Vec::new();
    while let Some(joined) = publishing.join_next().await {
        producers.push(joined.map_err(|e| BenchError::Agent(e.to_string()))?);
    }
    producers.sort_by(|a, b| a.producer_id.cmp(&b.producer_id));
    report.settled = topo
        .broker
        .wait_idle(Duration::from_millis(cfg.settle_timeout_ms))
        .await;
    if !report.settled {
        tracing::warn!("notifications still pending after the settle timeout");
    }

    report.delivery = topo.broker.stats();
    if let Some(s) = &topo.secure {
        report.vault_audit = Some(s.vault.audit());
        report.pep = Some(PepSnapshot {
            vault: s.vault_pep.stats(),
            broker: s.broker_pep.stats(),
        });
    }

    let mut states: Vec<(Arc<ConsumerState>, Option<f64>)> = Vec::new();
    for c in consumers {
        let ms = c.attestation_ms;
        states.push((c.shutdown().await, ms));
    }

    let mut timings = Vec::new();
    for (state, _) in &states {
        let stats = state.stats();
        report.consumers.notifications += stats.notifications;
        report.consumers.accepted += stats.accepted;
        report.consumers.duplicates += stats.duplicates;
        report.consumers.poison += stats.poison;
        for (region, total) in state.totals_by_region() {
            let slot = report.region_totals.entry(region).or_insert(Energy::ZERO);
            *slot = *slot + total;
        }
        timings.extend(state.timings());
    }
    timings.sort_by(|a, b| a.consumed_at.total_cmp(&b.consumed_at));
    for t in &timings {
        *report.delivered_per_producer.entry(t.producer_id.clone()).or_default() += 1;
    }
    report.latencies_ms = timings.iter().map(|t| t.latency_ms).collect();

    for p in &producers {
        report.publish_errors += p.errors;
        for c in p.cycles.iter().filter(|c| c.accepted) {
            report.published += 1;
            let slot = report.expected_totals.entry(p.region.clone()).or_insert(Energy::ZERO);
            *slot = *slot + c.consumption_wh;
        }
        if let Some(ms) = p.attestation_ms {
            report.attestations.push(AttestationTiming {
                party: Party::Producer,
                agent_id: p.producer_id.clone(),
                duration_ms: ms,
            });
        }
    }
    for (i, (_, ms)) in states.iter().enumerate() {
        if let Some(ms) = ms {
            report.attestations.push(AttestationTiming {
                party: Party::Consumer,
                agent_id: consumer_user(&cfg.region_names()[i]),
                duration_ms: *ms,
            });
        }
    }
    report.finish_stats();
    Ok((report, timings, producers))
}
