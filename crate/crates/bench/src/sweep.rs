use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::report::RunReport;
use crate::scenario::run_scenario;
use crate::BenchError;

/// Minimum share of published updates that must be delivered at each level.
pub const MIN_DELIVERED_RATIO: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LevelStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub producers: usize,
    pub status: LevelStatus,
    pub report: Option<RunReport>,
}

impl SweepLevel {
    pub fn passed(&self) -> bool {
        match (&self.status, &self.report) {
            (LevelStatus::Completed, Some(r)) => r.delivered_ratio() >= MIN_DELIVERED_RATIO && r.settled,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub levels: Vec<SweepLevel>,
    /// Median latency never decreased as producers were added.
    pub monotone_median: bool,
    pub plot: Option<PathBuf>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.levels.iter().all(SweepLevel::passed)
    }

    /// Plain-text table of latency and processed requests per level.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>9} | {:>10} | {:>10} | {:>10} | {:>9} | {:>9} | {:>8} | {}",
            "producers", "median ms", "mean ms", "p95 ms", "published", "delivered", "ratio", "status"
        );
        let _ = writeln!(out, "{}", "-".repeat(96));
        for level in &self.levels {
            match &level.report {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "{:>9} | {:>10.3} | {:>10.3} | {:>10.3} | {:>9} | {:>9} | {:>8.4} | {}",
                        level.producers,
                        r.latency.median,
                        r.latency.mean,
                        r.latency.p95,
                        r.published,
                        r.delivery.delivered,
                        r.delivered_ratio(),
                        if level.passed() { "ok" } else { "below target" }
                    );
                }
                None => {
                    let reason = match &level.status {
                        LevelStatus::Failed { reason } => reason.as_str(),
                        LevelStatus::Completed => "",
                    };
                    let _ = writeln!(out, "{:>9} | failed: {reason}", level.producers);
                }
            }
        }
        out
    }
}

/// Checks that `counts` is non-empty and strictly ascending.
pub fn check_counts(counts: &[usize]) -> Result<(), BenchError> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(BenchError::Config("sweep needs at least one positive producer count".into()));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::Config(format!(
            "producer counts must be strictly ascending, got {counts:?}"
        )));
    }
    Ok(())
}

/// Runs `base` once per producer count with the same seed. A failing level is
/// recorded and the sweep moves on.
pub async fn stress_sweep(base: &ScenarioConfig, counts: &[usize]) -> Result<SweepReport, BenchError> {
    check_counts(counts)?;
    let mut levels = Vec::with_capacity(counts.len());
    for &producers in counts {
        let mut cfg = base.clone();
        cfg.producers = producers;
        cfg.regions = base.regions.min(producers);
        cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("producers-{producers}")));
        tracing::info!(producers, "sweep level starting");
        let level = match run_scenario(&cfg).await {
            Ok(run) => SweepLevel {
                producers,
                status: LevelStatus::Completed,
                report: Some(run.report),
            },
            Err(e) => {
                tracing::error!(producers, error = %e, "sweep level failed");
                SweepLevel {
                    producers,
                    status: LevelStatus::Failed { reason: e.to_string() },
                    report: None,
                }
            }
        };
        levels.push(level);
    }
    let medians: Vec<f64> = levels
        .iter()
        .filter_map(|l| l.report.as_ref().map(|r| r.latency.median))
        .collect();
    let monotone_median = medians.windows(2).all(|w| w[0] <= w[1]);

    let mut plot = None;
    if let Some(dir) = &base.out_dir {
        std::fs::create_dir_all(dir)?;
        let points: Vec<(usize, f64, f64)> = levels
            .iter()
            .filter_map(|l| l.report.as_ref().map(|r| (l.producers, r.latency.median, r.latency.p95)))
            .collect();
        let path = dir.join("latency-vs-producers.svg");
        crate::plot::latency_vs_producers(&path, &points)?;
        plot = Some(path);
    }
    let report = SweepReport {
        levels,
        monotone_median,
        plot,
    };
    if let Some(dir) = &base.out_dir {
        std::fs::write(dir.join("sweep.json"), serde_json::to_vec_pretty(&report).expect("serializes"))?;
        std::fs::write(dir.join("sweep-table.txt"), report.table())?;
    }
    Ok(report)
}
