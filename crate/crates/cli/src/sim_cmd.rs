use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use en_sim::{check_alt2_equivalence, estimate_bandwidth, run_scenario, Scenario};

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Simulate a scenario and judge every notification.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the text report here and the JSON summary next to it.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare roaming-feed and home-feed-only listening in one cluster.
    CheckAlt2 { scenario: PathBuf },
    /// Daily download volume if every device fetched every key.
    EstimateBandwidth {
        /// Keys per positive upload.
        #[arg(long, default_value_t = 14)]
        keys: u64,
        /// Bytes per key on the wire.
        #[arg(long, default_value_t = 16)]
        key_bytes: u64,
        /// Positive uploads per day.
        #[arg(long)]
        infections: u64,
        /// Devices downloading.
        #[arg(long)]
        population: u64,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

/// `report.txt` gets `report.json`; a path already ending in `.json` gets
/// `.summary.json` so the two never collide.
fn summary_path(report: &Path) -> PathBuf {
    if report.extension().is_some_and(|e| e == "json") {
        report.with_extension("summary.json")
    } else {
        report.with_extension("json")
    }
}

pub fn run(cmd: SimCommand) -> Result<bool> {
    match cmd {
        SimCommand::Run { scenario, seed, report } => {
            let mut parsed = load(&scenario)?;
            if let Some(seed) = seed {
                parsed.seed = seed;
            }
            let result = run_scenario(&parsed)?;
            let text = result.to_text();
            match report {
                Some(path) => {
                    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
                    let json = summary_path(&path);
                    fs::write(&json, result.to_json()).with_context(|| format!("writing {}", json.display()))?;
                    println!(
                        "{}: {} (report {}, summary {})",
                        result.scenario,
                        if result.passed { "PASS" } else { "FAIL" },
                        path.display(),
                        json.display()
                    );
                }
                None => print!("{text}"),
            }
            Ok(result.passed)
        }
        SimCommand::CheckAlt2 { scenario } => {
            let verdict = check_alt2_equivalence(&load(&scenario)?)?;
            println!("{verdict}");
            Ok(verdict.is_equivalent())
        }
        SimCommand::EstimateBandwidth {
            keys,
            key_bytes,
            infections,
            population,
        } => {
            println!("{}", estimate_bandwidth(keys, key_bytes, infections, population)?);
            Ok(true)
        }
    }
}
