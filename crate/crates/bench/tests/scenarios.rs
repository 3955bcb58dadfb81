//! Scenario runs through the public harness API.

use std::sync::Mutex;

use vaultcast_bench::report::Party;
use vaultcast_bench::{compare_modes, run_scenario, stress_sweep, BenchError, ScenarioConfig};
use vaultcast_core::measurement::{Energy, ValueGenerator};
use vaultcast_services::agents::Mode;

// Scenarios share one CPU; running them one at a time keeps timing sane.
static SERIAL: Mutex<()> = Mutex::new(());

fn config(mode: Mode, producers: usize, cycles: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(mode, producers, cycles);
    cfg.seed = 11;
    cfg
}

#[tokio::test(flavor = "multi_thread")]
async fn plain_single_producer_delivers_every_cycle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let run = run_scenario(&config(Mode::Plain, 1, 50)).await.unwrap();
    let r = &run.report;
    assert_eq!(run.timings.len(), 50);
    assert_eq!(r.latencies_ms.len(), 50);
    assert_eq!(r.delivery.dropped, 0);
    assert_eq!(r.delivery.delivered + r.delivery.dropped, r.delivery.enqueued);
    assert!(r.attestations.is_empty());
    assert!(r.vault_audit.is_none());
    assert!(r.totals_match());
    assert!(r.gate_failures().is_empty(), "{:?}", r.gate_failures());
    assert!(r.latencies_ms.iter().all(|l| *l >= 0.0));
    for name in ["cycles.csv", "published.csv", "attestation.csv", "report.json", "latency.svg"] {
        assert!(run.out_dir.join(name).exists(), "{name} missing");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn secure_single_producer_attests_twice() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let run = run_scenario(&config(Mode::Secure, 1, 50)).await.unwrap();
    let r = &run.report;
    assert_eq!(run.timings.len(), 50);
    assert_eq!(r.attestations.len(), 2);
    let parties: Vec<Party> = r.attestations.iter().map(|a| a.party).collect();
    assert!(parties.contains(&Party::Producer) && parties.contains(&Party::Consumer));
    let audit = r.vault_audit.as_ref().unwrap();
    assert_eq!(audit.get("public_key_served"), 1);
    assert_eq!(audit.get("private_key_served"), 1);
    assert!(r.gate_failures().is_empty(), "{:?}", r.gate_failures());
    let pep = r.pep.unwrap();
    assert_eq!(pep.broker.forwarded, 51, "50 upserts and one subscription");
    // The harness health probe carries no token.
    assert_eq!((pep.broker.unauthorized, pep.broker.forbidden), (1, 0));
}

#[tokio::test(flavor = "multi_thread")]
async fn same_seed_same_data() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = config(Mode::Plain, 4, 10);
    cfg.regions = 2;
    let a = run_scenario(&cfg).await.unwrap();
    let b = run_scenario(&cfg).await.unwrap();
    let values = |run: &vaultcast_bench::ScenarioRun| -> Vec<Vec<Energy>> {
        run.producers
            .iter()
            .map(|p| p.cycles.iter().map(|c| c.consumption_wh).collect())
            .collect()
    };
    assert_eq!(values(&a), values(&b));
    assert_eq!(a.report.region_totals, b.report.region_totals);
    cfg.seed += 1;
    let c = run_scenario(&cfg).await.unwrap();
    assert_ne!(values(&a), values(&c));
}

#[tokio::test(flavor = "multi_thread")]
async fn occupied_port_fails_setup_and_cleans_up() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let blocker = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = config(Mode::Secure, 1, 1);
    cfg.ports.vault = blocker.local_addr().unwrap().port();
    cfg.out_dir = Some(out.clone());
    let err = run_scenario(&cfg).await.err().expect("setup must fail");
    assert!(matches!(err, BenchError::SetupFailed(_)), "{err}");
    assert!(!out.exists(), "partial output left behind");
}

#[tokio::test(flavor = "multi_thread")]
async fn reports_from_different_scenarios_do_not_compare() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let a = run_scenario(&config(Mode::Plain, 1, 5)).await.unwrap();
    let b = run_scenario(&config(Mode::Plain, 1, 6)).await.unwrap();
    assert!(matches!(
        compare_modes(&a.report, &b.report),
        Err(BenchError::ComparisonInvalid(_))
    ));
    let same = compare_modes(&a.report, &a.report).unwrap();
    assert_eq!(same.ratio, 1.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn sweep_of_one_level_and_bad_order() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(Mode::Plain, 1, 3);
    cfg.out_dir = Some(dir.path().to_owned());
    cfg.generator = ValueGenerator::Constant {
        wh: Energy::from_milli_wh(1_000),
    };
    let sweep = stress_sweep(&cfg, &[1]).await.unwrap();
    assert_eq!(sweep.levels.len(), 1);
    assert!(sweep.monotone_median);
    assert!(sweep.passed());
    assert!(dir.path().join("latency-vs-producers.svg").exists());
    assert!(dir.path().join("sweep-table.txt").exists());
    assert!(stress_sweep(&cfg, &[2, 1]).await.is_err());
}
