//! Simulation report: verdicts, traffic, key counts and replication timeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Which requirement a (notified, infected, contact region) triple exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Requirement {
    /// Local notified about an infected traveler.
    F1,
    /// Traveler notified about an infected local.
    F2,
    /// Two travelers.
    F3,
    /// Two locals; no federation involved.
    Local,
}

impl Requirement {
    pub fn label(self) -> &'static str {
        match self {
            Requirement::F1 => "F1",
            Requirement::F2 => "F2",
            Requirement::F3 => "F3",
            Requirement::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "reason")]
pub enum Outcome {
    /// Expected and observed.
    Matched,
    /// Expected with certainty but never observed.
    Missed,
    /// Observed although the keys could not legitimately have reached the user.
    Unexpected,
    /// A known gap of the architecture (e.g. roaming uploads).
    ExpectedMiss(String),
    /// Correctly not observed.
    Absent(String),
}

impl Outcome {
    pub fn is_violation(&self) -> bool {
        matches!(self, Outcome::Missed | Outcome::Unexpected)
    }

    fn label(&self) -> String {
        match self {
            Outcome::Matched => "matched".into(),
            Outcome::Missed => "MISSED".into(),
            Outcome::Unexpected => "UNEXPECTED".into(),
            Outcome::ExpectedMiss(reason) => format!("expected-miss ({reason})"),
            Outcome::Absent(reason) => format!("absent ({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationEntry {
    pub requirement: Requirement,
    pub notified: String,
    pub infected: String,
    pub region: String,
    pub contact_at: String,
    pub upload_at: String,
    pub outcome: Outcome,
    /// Events explaining a violation; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementVerdict {
    pub matched: usize,
    pub missed: usize,
    pub unexpected: usize,
    pub expected_miss: usize,
    pub absent: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadEntry {
    pub user: String,
    pub backend: String,
    pub at: String,
    pub declared: Vec<String>,
    pub keys: usize,
    pub stored: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSummary {
    pub local_keys: usize,
    pub remote_keys: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEntry {
    pub consumer: String,
    pub producer: String,
    pub mode: String,
    pub requests: u64,
    pub bytes: u64,
    pub batches: u64,
    pub keys: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEntry {
    pub user: String,
    pub bytes: u64,
    pub keys: usize,
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationEvent {
    pub at: String,
    pub consumer: String,
    pub producer: String,
    pub batch_id: u64,
    pub keys: usize,
    pub new_keys: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyScan {
    pub responses: usize,
    pub bytes: u64,
    pub leaks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub seed: u64,
    pub horizon_days: u32,
    pub replication: String,
    pub listening: String,
    pub passed: bool,
    pub verdicts: BTreeMap<Requirement, RequirementVerdict>,
    pub notifications: Vec<NotificationEntry>,
    pub uploads: Vec<UploadEntry>,
    pub backends: BTreeMap<String, BackendSummary>,
    pub links: Vec<LinkEntry>,
    pub users: Vec<UserEntry>,
    pub timeline: Vec<ReplicationEvent>,
    pub isolation_violations: Vec<String>,
    pub privacy: PrivacyScan,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn violations(&self) -> impl Iterator<Item = &NotificationEntry> {
        self.notifications.iter().filter(|n| n.outcome.is_violation())
    }

    /// Human-readable rendering. Per-user lines are summarized above 50 users.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {} (seed {})", self.scenario, self.seed);
        let _ = writeln!(
            out,
            "horizon {} days, replication {}, listening {}",
            self.horizon_days, self.replication, self.listening
        );
        let _ = writeln!(out, "result: {}", if self.passed { "PASS" } else { "FAIL" });

        out.push_str("\nverdicts\n");
        for (req, v) in &self.verdicts {
            let _ = writeln!(
                out,
                "  {:<6} {}  matched={} missed={} unexpected={} expected-miss={} absent={}",
                req.label(),
                if v.pass { "pass" } else { "FAIL" },
                v.matched,
                v.missed,
                v.unexpected,
                v.expected_miss,
                v.absent
            );
        }

        out.push_str("\nnotifications\n");
        for n in &self.notifications {
            let _ = writeln!(
                out,
                "  [{}] {} <- {} met in {} at {}, upload {}: {}",
                n.requirement.label(),
                n.notified,
                n.infected,
                n.region,
                n.contact_at,
                n.upload_at,
                n.outcome.label()
            );
            for line in &n.trace {
                let _ = writeln!(out, "      {line}");
            }
        }

        out.push_str("\nuploads\n");
        for u in &self.uploads {
            let _ = writeln!(
                out,
                "  {} at {} to {} declaring [{}]: {} keys, {} stored",
                u.user,
                u.at,
                u.backend,
                u.declared.join(" "),
                u.keys,
                u.stored
            );
        }

        out.push_str("\nbackends\n");
        for (region, b) in &self.backends {
            let _ = writeln!(out, "  {region}: local={} remote={}", b.local_keys, b.remote_keys);
        }

        out.push_str("\nlinks\n");
        for l in &self.links {
            let _ = writeln!(
                out,
                "  {} <- {} ({}): {} requests, {} bytes, {} batches, {} keys",
                l.consumer, l.producer, l.mode, l.requests, l.bytes, l.batches, l.keys
            );
        }

        out.push_str("\nusers\n");
        if self.users.len() > 50 {
            let bytes: u64 = self.users.iter().map(|u| u.bytes).sum();
            let keys: usize = self.users.iter().map(|u| u.keys).sum();
            let _ = writeln!(
                out,
                "  {} users, {bytes} bytes downloaded, {keys} keys downloaded",
                self.users.len()
            );
        } else {
            for u in &self.users {
                let _ = writeln!(
                    out,
                    "  {}: {} bytes, {} keys, {} matches",
                    u.user, u.bytes, u.keys, u.matches
                );
            }
        }

        out.push_str("\nreplication timeline\n");
        for e in &self.timeline {
            let _ = writeln!(
                out,
                "  {} {} <- {} batch {}: {} keys ({} new), {} bytes",
                e.at, e.consumer, e.producer, e.batch_id, e.keys, e.new_keys, e.bytes
            );
        }

        out.push_str("\nisolation\n");
        if self.isolation_violations.is_empty() {
            out.push_str("  ok\n");
        }
        for v in &self.isolation_violations {
            let _ = writeln!(out, "  VIOLATION {v}");
        }

        let _ = writeln!(
            out,
            "\nwire scan: {} responses, {} bytes, {} leaks",
            self.privacy.responses,
            self.privacy.bytes,
            self.privacy.leaks.len()
        );
        for leak in &self.privacy.leaks {
            let _ = writeln!(out, "  LEAK {leak}");
        }
        out
    }
}
