use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::json;
use vaultcast_core::envelope::{encrypt, generate_keypair, KeyPair};
use vaultcast_core::measurement::{Energy, Measurement};

use super::*;
use crate::broker::{AttributeValue, Entity, Notification};

fn reading(p: &str, seq: u64, milli_wh: u64) -> Measurement {
    Measurement {
        producer_id: p.into(),
        region: "region-A".into(),
        consumption_wh: Energy::from_milli_wh(milli_wh),
        seq,
        produced_at: 1_000.0 + seq as f64,
    }
}

fn notification(value: serde_json::Value) -> Notification {
    Notification {
        sub_id: "s".into(),
        seq: 1,
        data: vec![Entity {
            id: "meter-region-A-p".into(),
            entity_type: METER_TYPE.into(),
            attrs: BTreeMap::from([(READING_ATTR.to_owned(), AttributeValue { value, timestamp: 0 })]),
        }],
    }
}

fn sealed(kp: &KeyPair, m: &Measurement) -> serde_json::Value {
    serde_json::to_value(encrypt(&kp.key_id, &kp.public_part, &m.to_json()).unwrap()).unwrap()
}

fn secure_state(kp: &KeyPair) -> ConsumerState {
    let s = ConsumerState::new(Mode::Secure, None, 60_000);
    s.install_key(&kp.key_id, &kp.private_part);
    s
}

#[test]
fn decrypt_and_parse_round_trip() {
    let kp = generate_keypair("region-A").unwrap();
    let m = reading("p1", 3, 12_500);
    let env = encrypt(&kp.key_id, &kp.public_part, &m.to_json()).unwrap();
    let got = decrypt_and_parse(&kp.private_part, &serde_json::to_vec(&env).unwrap()).unwrap();
    assert_eq!(got, m);
}

#[test]
fn decrypt_and_parse_rejects_bad_payloads() {
    let kp = generate_keypair("region-A").unwrap();
    let env = |bytes: &[u8]| serde_json::to_vec(&encrypt(&kp.key_id, &kp.public_part, bytes).unwrap()).unwrap();
    assert!(decrypt_and_parse(&kp.private_part, &env(b"not json")).is_err());
    let negative = br#"{"p":"p1","r":"region-A","c":-1.5,"s":1,"t":1.0}"#;
    assert!(decrypt_and_parse(&kp.private_part, &env(negative)).is_err());
    assert!(decrypt_and_parse(&kp.private_part, b"{}").is_err());
    let other = generate_keypair("region-A").unwrap();
    assert!(decrypt_and_parse(&other.private_part, &env(&reading("p", 1, 1).to_json())).is_err());
}

#[test]
fn three_producers_five_readings_sum_to_brute_force() {
    let kp = generate_keypair("region-A").unwrap();
    let state = secure_state(&kp);
    let mut inputs = Vec::new();
    for p in ["p1", "p2", "p3"] {
        for seq in 1..=5 {
            inputs.push(reading(p, seq, 100_000));
        }
    }
    for m in &inputs {
        state.handle_notification(&notification(sealed(&kp, m)));
    }
    let expected: u64 = inputs.iter().map(|m| m.consumption_wh.milli_wh()).sum();
    assert_eq!(expected, 1_500_000);
    assert_eq!(state.totals_by_region()["region-A"], Energy::from_milli_wh(expected));
    let report = &state.reports()[0];
    assert_eq!(report.contributing.values().sum::<u64>(), 15);
    assert_eq!(state.timings().len(), 15);
}

#[test]
fn wrong_key_is_poison_and_leaves_total() {
    let kp = generate_keypair("region-A").unwrap();
    let other = generate_keypair("region-B").unwrap();
    let state = secure_state(&kp);
    state.handle_notification(&notification(sealed(&kp, &reading("p1", 1, 7_000))));
    state.handle_notification(&notification(sealed(&other, &reading("p1", 2, 9_000))));
    state.handle_notification(&notification(json!("garbage")));
    assert_eq!(state.stats().poison, 2);
    assert_eq!(state.totals_by_region()["region-A"], Energy::from_milli_wh(7_000));
}

#[test]
fn duplicate_notification_discarded() {
    let kp = generate_keypair("region-A").unwrap();
    let state = secure_state(&kp);
    let n = notification(sealed(&kp, &reading("p1", 1, 5_000)));
    state.handle_notification(&n);
    state.handle_notification(&n);
    assert_eq!(state.stats().duplicates, 1);
    assert_eq!(state.reports()[0].duplicates_discarded, 1);
    assert_eq!(state.totals_by_region()["region-A"], Energy::from_milli_wh(5_000));
}

#[test]
fn plain_and_secure_totals_agree() {
    let kp = generate_keypair("region-A").unwrap();
    let secure = secure_state(&kp);
    let plain = ConsumerState::new(Mode::Plain, None, 60_000);
    for seq in 1..=20 {
        let m = reading("p1", seq, seq * 1_337);
        secure.handle_notification(&notification(sealed(&kp, &m)));
        plain.handle_notification(&notification(serde_json::to_value(&m).unwrap()));
    }
    assert_eq!(secure.totals_by_region(), plain.totals_by_region());
}

#[test]
fn state_debug_hides_key() {
    let kp = generate_keypair("region-A").unwrap();
    let state = secure_state(&kp);
    let shown = format!("{state:?}");
    assert!(!shown.contains(&vaultcast_core::codec::encode(&kp.private_part)));
}

#[test]
fn config_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("p.toml");
    std::fs::write(
        &toml_path,
        r#"
producer_id = "p0001"
region = "region-A"
mode = "plain"
broker_url = "http://127.0.0.1:1026"
count = 10
interval_ms = 5
"#,
    )
    .unwrap();
    let cfg: ProducerConfig = load_config(&toml_path).unwrap();
    assert_eq!(cfg.mode, Mode::Plain);
    assert_eq!(cfg.count, 10);

    let json_path = dir.path().join("c.json");
    std::fs::write(
        &json_path,
        r#"{"consumer_id":"c","region":"region-A","broker_url":"http://x","listen":"127.0.0.1:0"}"#,
    )
    .unwrap();
    let cfg: ConsumerConfig = load_config(&json_path).unwrap();
    assert_eq!(cfg.mode, Mode::Secure);
    assert_eq!(cfg.window_ms, 60_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_independent_of_duplicate_deliveries(
        values in proptest::collection::vec(0u64..1_000_000, 1..30),
        copies in proptest::collection::vec(0usize..=3, 30),
    ) {
        let plain = ConsumerState::new(Mode::Plain, None, 60_000);
        let mut expected = 0u64;
        let mut dupes = 0u64;
        for (i, v) in values.iter().enumerate() {
            let m = reading("p1", i as u64 + 1, *v);
            expected += v;
            let n = notification(serde_json::to_value(&m).unwrap());
            for _ in 0..=copies[i] {
                plain.handle_notification(&n);
            }
            dupes += copies[i] as u64;
        }
        prop_assert_eq!(plain.totals_by_region()["region-A"], Energy::from_milli_wh(expected));
        prop_assert_eq!(plain.stats().duplicates, dupes);
    }
}
