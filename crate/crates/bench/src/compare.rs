use serde::{Deserialize, Serialize};

use crate::report::RunReport;
use crate::stats::{mean, median_sorted};
use crate::BenchError;

/// Secure median may be at most this many times the plain median.
pub const MAX_MEDIAN_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadSummary {
    pub plain_median_ms: f64,
    pub secure_median_ms: f64,
    pub plain_mean_ms: f64,
    pub secure_mean_ms: f64,
    /// Secure median minus plain median.
    pub absolute_ms: f64,
    /// Relative median overhead in percent.
    pub relative_pct: f64,
    pub ratio: f64,
    pub pass: bool,
}

fn median_of(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    median_sorted(&sorted)
}

/// Median latency overhead of `secure` over `plain`, recomputed from raw samples.
pub fn compare_modes(plain: &RunReport, secure: &RunReport) -> Result<OverheadSummary, BenchError> {
    let mismatch = |what: &str, a: &dyn std::fmt::Debug, b: &dyn std::fmt::Debug| {
        Err(BenchError::ComparisonInvalid(format!("{what} differs: {a:?} vs {b:?}")))
    };
    if plain.seed != secure.seed {
        return mismatch("seed", &plain.seed, &secure.seed);
    }
    if plain.producers != secure.producers {
        return mismatch("producer count", &plain.producers, &secure.producers);
    }
    if plain.cycles_per_producer != secure.cycles_per_producer {
        return mismatch("cycle count", &plain.cycles_per_producer, &secure.cycles_per_producer);
    }
    if plain.regions != secure.regions {
        return mismatch("region count", &plain.regions, &secure.regions);
    }
    if plain.latencies_ms.is_empty() || secure.latencies_ms.is_empty() {
        return Err(BenchError::ComparisonInvalid("a report has no latency samples".into()));
    }
    let plain_median_ms = median_of(&plain.latencies_ms);
    let secure_median_ms = median_of(&secure.latencies_ms);
    let ratio = secure_median_ms / plain_median_ms;
    Ok(OverheadSummary {
        plain_median_ms,
        secure_median_ms,
        plain_mean_ms: mean(&plain.latencies_ms),
        secure_mean_ms: mean(&secure.latencies_ms),
        absolute_ms: secure_median_ms - plain_median_ms,
        relative_pct: (ratio - 1.0) * 100.0,
        ratio,
        pass: ratio <= MAX_MEDIAN_RATIO,
    })
}

impl std::fmt::Display for OverheadSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "plain median {:.3} ms, secure median {:.3} ms, overhead {:+.3} ms ({:+.1}%), ratio {:.3} (limit {MAX_MEDIAN_RATIO}): {}",
            self.plain_median_ms,
            self.secure_median_ms,
            self.absolute_ms,
            self.relative_pct,
            self.ratio,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vaultcast_services::agents::Mode;

    fn report(mode: Mode, latencies: Vec<f64>) -> RunReport {
        let mut r = RunReport {
            mode,
            producers: 1,
            cycles_per_producer: latencies.len() as u64,
            regions: 1,
            latencies_ms: latencies,
            ..Default::default()
        };
        r.finish_stats();
        r
    }

    #[test]
    fn identical_reports_have_no_overhead() {
        let r = report(Mode::Plain, vec![1.0, 2.0, 3.0]);
        let s = compare_modes(&r, &r).unwrap();
        assert_eq!((s.absolute_ms, s.relative_pct, s.ratio), (0.0, 0.0, 1.0));
        assert!(s.pass);
    }

    #[test]
    fn known_means_fixture() {
        let plain = report(Mode::Plain, vec![7.0, 7.5, 8.0]);
        let secure = report(Mode::Secure, vec![10.0, 10.5, 11.0]);
        let s = compare_modes(&plain, &secure).unwrap();
        assert!((s.absolute_ms - 3.0).abs() < 1e-12);
        assert!((s.ratio - 1.4).abs() < 1e-12);
        assert!((s.relative_pct - 40.0).abs() < 1e-9);
        assert!(s.pass);
    }

    #[test]
    fn ratio_above_limit_fails() {
        let s = compare_modes(&report(Mode::Plain, vec![1.0]), &report(Mode::Secure, vec![2.5])).unwrap();
        assert!(!s.pass);
        assert!(s.to_string().ends_with("FAIL"));
    }

    #[test]
    fn mismatched_runs_are_invalid() {
        let a = report(Mode::Plain, vec![1.0, 2.0]);
        let b = report(Mode::Secure, vec![1.0, 2.0, 3.0]);
        assert!(matches!(compare_modes(&a, &b), Err(BenchError::ComparisonInvalid(_))));
        let mut c = a.clone();
        c.seed = 9;
        assert!(matches!(compare_modes(&a, &c), Err(BenchError::ComparisonInvalid(_))));
        let empty = report(Mode::Secure, vec![]);
        let mut a0 = a.clone();
        a0.cycles_per_producer = 0;
        assert!(compare_modes(&a0, &empty).is_err());
    }
}
