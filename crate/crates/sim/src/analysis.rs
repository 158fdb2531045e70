//! Cross-run checks: home-feed-only listening, bandwidth arithmetic and
//! replication traffic under the two replication modes.

use std::collections::BTreeSet;
use std::fmt;

use en_core::domain::{ReplicationType, Timestamp, SECS_PER_DAY};
use serde::Serialize;

use crate::engine::simulate;
use crate::report::{LinkEntry, SimulationReport};
use crate::scenario::{ClusterSpec, Listening, Scenario, SimError};

pub type MatchSet = BTreeSet<(String, String, Timestamp)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Alt2Verdict {
    /// Both listening strategies produce these matches.
    Equivalent { matches: MatchSet },
    Different { only_roaming: MatchSet, only_home: MatchSet },
    /// The scenario is not a single all-to-all cluster.
    Inapplicable(String),
}

impl Alt2Verdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, Alt2Verdict::Equivalent { .. })
    }
}

impl fmt::Display for Alt2Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alt2Verdict::Equivalent { matches } => {
                write!(f, "equivalent: {} identical exposure matches", matches.len())
            }
            Alt2Verdict::Different { only_roaming, only_home } => {
                writeln!(f, "different match sets")?;
                for (who, infected, at) in only_roaming {
                    writeln!(f, "  only with roaming feeds: {who} <- {infected} at {at}")?;
                }
                for (who, infected, at) in only_home {
                    writeln!(f, "  only with home feeds: {who} <- {infected} at {at}")?;
                }
                Ok(())
            }
            Alt2Verdict::Inapplicable(reason) => write!(f, "inapplicable: {reason}"),
        }
    }
}

/// Runs the scenario with roaming-feed listening and with home-feed-only
/// listening and compares the exposure matches.
pub fn check_alt2_equivalence(scenario: &Scenario) -> Result<Alt2Verdict, SimError> {
    scenario.validate()?;
    let regions = scenario.region_ids();
    let one_cluster = scenario.clusters.len() == 1 && regions.iter().all(|r| scenario.clusters[0].members.contains(r));
    if !one_cluster {
        return Ok(Alt2Verdict::Inapplicable(
            "all regions must form a single cluster".into(),
        ));
    }
    for consumer in &regions {
        for producer in &regions {
            if let Some(ReplicationType::Partial) = scenario.link_mode(*consumer, *producer) {
                return Ok(Alt2Verdict::Inapplicable(format!(
                    "link {consumer} <- {producer} uses partial replication"
                )));
            }
        }
    }
    let run = |listening| {
        let mut variant = scenario.clone();
        variant.listening = listening;
        simulate(&variant).map(|r| r.matches)
    };
    let roaming = run(Listening::Roaming)?;
    let home = run(Listening::Home)?;
    if roaming == home {
        Ok(Alt2Verdict::Equivalent { matches: roaming })
    } else {
        Ok(Alt2Verdict::Different {
            only_roaming: roaming.difference(&home).cloned().collect(),
            only_home: home.difference(&roaming).cloned().collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthEstimate {
    pub per_user_bytes_per_day: u64,
    pub aggregate_bytes_per_day: u128,
    pub sustained_bits_per_sec: f64,
}

/// Two significant digits with an SI prefix, e.g. `45 MB`.
pub fn si_round(value: f64, unit: &str) -> String {
    const PREFIXES: [&str; 7] = ["", "k", "M", "G", "T", "P", "E"];
    let mut v = value;
    let mut i = 0;
    while v >= 1000.0 && i + 1 < PREFIXES.len() {
        v /= 1000.0;
        i += 1;
    }
    let rounded = if v >= 10.0 { format!("{:.0}", v) } else { format!("{:.1}", v) };
    format!("{rounded} {}{unit}", PREFIXES[i])
}

impl fmt::Display for BandwidthEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "per user:  {} bytes/day (~{})",
            self.per_user_bytes_per_day,
            si_round(self.per_user_bytes_per_day as f64, "B")
        )?;
        writeln!(
            f,
            "aggregate: {} bytes/day (~{})",
            self.aggregate_bytes_per_day,
            si_round(self.aggregate_bytes_per_day as f64, "B")
        )?;
        write!(
            f,
            "sustained: {:.4e} bit/s (~{})",
            self.sustained_bits_per_sec,
            si_round(self.sustained_bits_per_sec, "bps")
        )
    }
}

/// Raw download volume if every device fetched every key every day.
pub fn estimate_bandwidth(
    keys_per_upload: u64,
    key_bytes: u64,
    daily_infections: u64,
    population: u64,
) -> Result<BandwidthEstimate, SimError> {
    if keys_per_upload == 0 || key_bytes == 0 || daily_infections == 0 || population == 0 {
        return Err(SimError::InvalidParameters("all parameters must be positive".into()));
    }
    let per_user = keys_per_upload
        .checked_mul(key_bytes)
        .and_then(|v| v.checked_mul(daily_infections))
        .ok_or_else(|| SimError::InvalidParameters("per-user volume overflows".into()))?;
    let aggregate = u128::from(per_user) * u128::from(population);
    Ok(BandwidthEstimate {
        per_user_bytes_per_day: per_user,
        aggregate_bytes_per_day: aggregate,
        sustained_bits_per_sec: aggregate as f64 * 8.0 / SECS_PER_DAY as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicationTraffic {
    pub links: Vec<LinkEntry>,
    pub bytes: u64,
    pub keys: u64,
    pub batches: u64,
}

/// Inter-backend feed traffic of a finished run.
pub fn measure_replication_traffic(report: &SimulationReport) -> ReplicationTraffic {
    let links: Vec<LinkEntry> = report.links.iter().filter(|l| l.requests > 0).cloned().collect();
    ReplicationTraffic {
        bytes: links.iter().map(|l| l.bytes).sum(),
        keys: links.iter().map(|l| l.keys).sum(),
        batches: links.iter().map(|l| l.batches).sum(),
        links,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrafficComparison {
    pub partial: ReplicationTraffic,
    pub all_to_all: ReplicationTraffic,
}

impl TrafficComparison {
    pub fn partial_within_all_to_all(&self) -> bool {
        self.partial.keys <= self.all_to_all.keys && self.partial.bytes <= self.all_to_all.bytes
    }
}

/// Runs `scenario` once with partial replication everywhere and once as a
/// single all-to-all cluster.
pub fn compare_replication_modes(scenario: &Scenario) -> Result<TrafficComparison, SimError> {
    let mut partial = scenario.clone();
    partial.replication = ReplicationType::Partial;
    partial.links.clear();
    let mut a2a = scenario.clone();
    a2a.replication = ReplicationType::AllToAll;
    a2a.links.clear();
    a2a.clusters = vec![ClusterSpec {
        name: "ALL".into(),
        members: scenario.region_ids(),
    }];
    Ok(TrafficComparison {
        partial: measure_replication_traffic(&simulate(&partial)?.report),
        all_to_all: measure_replication_traffic(&simulate(&a2a)?.report),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_arithmetic() {
        let one = estimate_bandwidth(14, 16, 200_000, 1).unwrap();
        assert_eq!(one.per_user_bytes_per_day, 44_800_000);
        let all = estimate_bandwidth(14, 16, 200_000, 330_000_000).unwrap();
        assert_eq!(all.aggregate_bytes_per_day, 14_784_000_000_000_000);
        assert!((all.sustained_bits_per_sec - 1.368_888_9e12).abs() < 1e6);
        assert!(estimate_bandwidth(0, 16, 200_000, 1).is_err());
        assert!(estimate_bandwidth(14, 16, 200_000, 0).is_err());
    }

    #[test]
    fn si_rounding() {
        assert_eq!(si_round(44_800_000.0, "B"), "45 MB");
        assert_eq!(si_round(1.4784e16, "B"), "15 PB");
        assert_eq!(si_round(1.3689e12, "bps"), "1.4 Tbps");
        assert_eq!(si_round(12.0, "B"), "12 B");
    }
}
