use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing::level_filters::LevelFilter;
use vaultcast_bench::{compare_modes, run_scenario, stress_sweep, RunReport, ScenarioConfig};
use vaultcast_services::agents::Mode;

/// Runs the telemetry pipeline benchmarks. Exits 0 when every acceptance gate passes.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write CSV, JSON and SVG output.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the mode from the config file.
        #[arg(long)]
        mode: Option<Mode>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a plain and a secure report.json.
    Compare { plain: PathBuf, secure: PathBuf },
    /// Run the scenario at increasing producer counts.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging(dir: Option<&Path>) -> anyhow::Result<()> {
    match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::File::create(dir.join("bench.log"))?;
            tracing_subscriber::fmt()
                .with_writer(std::sync::Mutex::new(file))
                .with_ansi(false)
                .with_max_level(LevelFilter::INFO)
                .init();
        }
        None => tracing_subscriber::fmt()
            .with_writer(std::io::stderr)
            .with_max_level(LevelFilter::WARN)
            .init(),
    }
    Ok(())
}

fn load(config: &Path, out: Option<PathBuf>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(config)?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

async fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, mode, out } => {
            let mut cfg = load(&config, out)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            init_logging(cfg.out_dir.as_deref())?;
            let run = run_scenario(&cfg).await?;
            let r = &run.report;
            println!(
                "{} mode: {} producers x {} cycles, median {:.3} ms, mean {:.3} ms, p95 {:.3} ms, p99 {:.3} ms",
                r.mode, r.producers, r.cycles_per_producer, r.latency.median, r.latency.mean, r.latency.p95, r.latency.p99
            );
            println!(
                "published {}, delivered {}, dropped {}, duplicates {}",
                r.published, r.delivery.delivered, r.delivery.dropped, r.consumers.duplicates
            );
            if let Some(mean) = r.attestation_mean_ms {
                println!("attestation: {} handshakes, mean {mean:.3} ms", r.attestations.len());
            }
            println!("output in {}", run.out_dir.display());
            let failures = r.gate_failures();
            for f in &failures {
                println!("FAIL: {f}");
            }
            Ok(failures.is_empty())
        }
        Command::Compare { plain, secure } => {
            init_logging(None)?;
            let plain = RunReport::load(&plain)?;
            let secure = RunReport::load(&secure)?;
            let summary = compare_modes(&plain, &secure)?;
            println!("{summary}");
            Ok(summary.pass)
        }
        Command::Sweep { counts, config, out } => {
            let cfg = load(&config, out)?;
            init_logging(cfg.out_dir.as_deref())?;
            let sweep = stress_sweep(&cfg, &counts).await?;
            print!("{}", sweep.table());
            println!(
                "median latency {} with producer count",
                if sweep.monotone_median { "non-decreasing" } else { "not monotone" }
            );
            if let Some(p) = &sweep.plot {
                println!("plot: {}", p.display());
            }
            Ok(sweep.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime starts");
    match runtime.block_on(run(cli)).context("bench") {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
