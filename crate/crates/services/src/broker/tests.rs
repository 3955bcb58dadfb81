use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::json;

use super::*;
use crate::http::{spawn, ServiceHandle};

#[derive(Default)]
struct Recorder {
    fail_first: AtomicU32,
    received: Mutex<Vec<Notification>>,
}

async fn record(State(r): State<Arc<Recorder>>, Json(n): Json<Notification>) -> axum::http::StatusCode {
    if r
        .fail_first
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
        .is_ok()
    {
        return axum::http::StatusCode::INTERNAL_SERVER_ERROR;
    }
    r.received.lock().unwrap().push(n);
    axum::http::StatusCode::NO_CONTENT
}

async fn recorder(fail_first: u32) -> (Arc<Recorder>, ServiceHandle) {
    let r = Arc::new(Recorder {
        fail_first: AtomicU32::new(fail_first),
        ..Default::default()
    });
    let app = Router::new().route("/notify", post(record)).with_state(r.clone());
    let handle = spawn("127.0.0.1:0", app).await.unwrap();
    (r, handle)
}

fn attrs(v: serde_json::Value) -> BTreeMap<String, serde_json::Value> {
    serde_json::from_value(v).unwrap()
}

fn fast() -> BrokerConfig {
    BrokerConfig {
        retry: RetryPolicy {
            retries: 3,
            backoff: Duration::from_millis(20),
        },
        request_timeout: Duration::from_secs(2),
    }
}

#[tokio::test]
async fn store_round_trip_and_last_writer_wins() {
    let broker = ContextBroker::new(fast());
    let env = json!({"key_id": "k", "ciphertext": "AAAA"});
    let ack = broker
        .upsert_entity("meter-001", "SmartMeter", attrs(json!({"consumption": env.clone()})))
        .unwrap();
    assert!(ack.created);
    assert_eq!(ack.notifications, 0);
    assert_eq!(broker.query_entity("meter-001").unwrap().attrs["consumption"].value, env);

    let ack = broker
        .upsert_entity("meter-001", "SmartMeter", attrs(json!({"consumption": 2})))
        .unwrap();
    assert!(!ack.created);
    assert_eq!(broker.query_entity("meter-001").unwrap().attrs["consumption"].value, json!(2));

    assert!(matches!(broker.query_entity("nope"), Err(BrokerError::NotFound(_))));
    assert!(matches!(
        broker.upsert_entity("meter-001", "Other", attrs(json!({"x": 1}))),
        Err(BrokerError::TypeMismatch { .. })
    ));
}

#[tokio::test]
async fn matching_and_filters() {
    let (rec, handle) = recorder(0).await;
    let broker = ContextBroker::new(fast());
    let cb = format!("{}/notify", handle.url());
    broker.create_subscription("meter-1??", None, &cb).unwrap();
    broker
        .create_subscription("meter-*", Some(["consumption".to_string()].into()), &cb)
        .unwrap();

    let ack = broker.upsert_entity("meter-2", "SmartMeter", attrs(json!({"consumption": 1}))).unwrap();
    assert_eq!(ack.notifications, 1);
    let ack = broker.upsert_entity("meter-100", "SmartMeter", attrs(json!({"consumption": 1}))).unwrap();
    assert_eq!(ack.notifications, 2);
    let ack = broker.upsert_entity("meter-100", "SmartMeter", attrs(json!({"voltage": 230}))).unwrap();
    assert_eq!(ack.notifications, 1, "filtered subscription ignores other attributes");
    let ack = broker.upsert_entity("gauge-1", "SmartMeter", attrs(json!({"consumption": 1}))).unwrap();
    assert_eq!(ack.notifications, 0);

    assert!(broker.wait_idle(Duration::from_secs(5)).await);
    let got = rec.received.lock().unwrap().clone();
    assert_eq!(got.len(), 4);
    // Snapshots carry only the changed attributes.
    let voltage = got.iter().find(|n| n.data[0].attrs.contains_key("voltage")).unwrap();
    assert_eq!(voltage.data[0].attrs.len(), 1);
    handle.shutdown().await;
}

#[tokio::test]
async fn duplicate_subscriptions_each_notify() {
    let (rec, handle) = recorder(0).await;
    let broker = ContextBroker::new(fast());
    let cb = format!("{}/notify", handle.url());
    let a = broker.create_subscription("meter-*", None, &cb).unwrap();
    let b = broker.create_subscription("meter-*", None, &cb).unwrap();
    assert_ne!(a, b);
    broker.upsert_entity("meter-007", "SmartMeter", attrs(json!({"c": 1}))).unwrap();
    assert!(broker.wait_idle(Duration::from_secs(5)).await);
    assert_eq!(rec.received.lock().unwrap().len(), 2);
    handle.shutdown().await;
}

#[tokio::test]
async fn hundred_upserts_arrive_in_order() {
    let (rec, handle) = recorder(0).await;
    let broker = ContextBroker::new(fast());
    let sub = broker
        .create_subscription("meter-*", None, &format!("{}/notify", handle.url()))
        .unwrap();
    for i in 0..100 {
        broker.upsert_entity("meter-001", "SmartMeter", attrs(json!({"c": i}))).unwrap();
    }
    assert!(broker.wait_idle(Duration::from_secs(10)).await);
    let got = rec.received.lock().unwrap().clone();
    let seqs: Vec<u64> = got.iter().map(|n| n.seq).collect();
    assert_eq!(seqs, (1..=100).collect::<Vec<_>>());
    assert!(got.iter().all(|n| n.sub_id == sub));
    let stats = broker.stats();
    assert_eq!((stats.enqueued, stats.delivered, stats.dropped), (100, 100, 0));
    handle.shutdown().await;
}

#[tokio::test]
async fn transient_failures_are_retried() {
    let (rec, handle) = recorder(2).await;
    let broker = ContextBroker::new(fast());
    broker
        .create_subscription("meter-*", None, &format!("{}/notify", handle.url()))
        .unwrap();
    broker.upsert_entity("meter-1", "SmartMeter", attrs(json!({"c": 1}))).unwrap();
    assert!(broker.wait_idle(Duration::from_secs(5)).await);
    assert_eq!(rec.received.lock().unwrap().len(), 1);
    let stats = broker.stats();
    assert_eq!((stats.delivered, stats.retried, stats.dropped), (1, 2, 0));
    handle.shutdown().await;
}

#[tokio::test]
async fn dead_subscriber_is_dropped_without_stalling_others() {
    let (rec, handle) = recorder(0).await;
    // Bound then released: nothing listens there.
    let dead = {
        let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        l.local_addr().unwrap()
    };
    let broker = ContextBroker::new(fast());
    let dead_sub = broker
        .create_subscription("meter-*", None, &format!("http://{dead}/notify"))
        .unwrap();
    let live_sub = broker
        .create_subscription("meter-*", None, &format!("{}/notify", handle.url()))
        .unwrap();
    for i in 0..5 {
        broker.upsert_entity("meter-1", "SmartMeter", attrs(json!({"c": i}))).unwrap();
    }
    // The dead queue needs 5 × 3 × 20 ms of backoff; the live one must finish long before.
    let started = std::time::Instant::now();
    while broker.subscription_stats()[&live_sub].delivered < 5 {
        assert!(started.elapsed() < Duration::from_millis(250), "live subscriber starved");
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    assert_eq!(rec.received.lock().unwrap().len(), 5);

    assert!(broker.wait_idle(Duration::from_secs(10)).await);
    let dead_stats = broker.subscription_stats()[&dead_sub];
    assert_eq!(dead_stats.dropped, dead_stats.enqueued);
    assert_eq!(dead_stats.dropped, 5);
    handle.shutdown().await;
}

#[tokio::test]
async fn invalid_callbacks_rejected() {
    let broker = ContextBroker::new(fast());
    for cb in ["not a url", "ftp://host/x", "http://"] {
        assert!(matches!(
            broker.create_subscription("meter-*", None, cb),
            Err(BrokerError::InvalidCallback(_))
        ));
    }
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broker.jsonl");
    {
        let broker = ContextBroker::open(fast(), &path).unwrap();
        broker.create_subscription("meter-*", None, "http://127.0.0.1:9/notify").unwrap();
        broker.upsert_entity("meter-1", "SmartMeter", attrs(json!({"a": 1, "b": 2}))).unwrap();
        broker.upsert_entity("meter-1", "SmartMeter", attrs(json!({"a": 3}))).unwrap();
    }
    // Simulate an interrupted final write.
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"op\":\"ups"))
        .unwrap();
    let broker = ContextBroker::open(fast(), &path).unwrap();
    let e = broker.query_entity("meter-1").unwrap();
    assert_eq!(e.attrs["a"].value, json!(3));
    assert_eq!(e.attrs["b"].value, json!(2));
    assert_eq!(broker.subscriptions().len(), 1);
}

#[tokio::test]
async fn broker_state_holds_only_ciphertext() {
    use vaultcast_core::envelope::{encrypt, generate_keypair};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broker.jsonl");
    let broker = ContextBroker::open(fast(), &path).unwrap();
    let kp = generate_keypair("region-A").unwrap();
    let sentinel = "31337.125";
    for _ in 0..20 {
        let env = encrypt(&kp.key_id, &kp.public_part, format!("{{\"c\":{sentinel}}}").as_bytes()).unwrap();
        broker
            .upsert_entity("meter-1", "SmartMeter", attrs(json!({"consumption": env})))
            .unwrap();
    }
    let dump = broker.dump_state().to_string();
    let log = std::fs::read_to_string(&path).unwrap();
    assert!(!dump.contains(sentinel));
    assert!(!log.contains(sentinel));
    assert!(dump.contains(&kp.key_id));
}
