//! Scenario files: topology, users with itineraries, contacts and infections.
//!
//! Scenarios are TOML. Times are written `D+HH:MM` (or `D+HH:MM:SS`, or a bare
//! day number) relative to the start of the simulation.
//!
//! ```toml
//! name = "example"
//! horizon_days = 21
//! replication = "partial"        # or "all-to-all"; default for every link
//!
//! [[region]]
//! id = "AA"
//!
//! [[user]]
//! id = "bob"
//! base = ["BB"]
//! trip = [{ region = "AA", enter = "2+08:00", exit = "5+18:00" }]
//!
//! [[contact]]
//! a = "alice"
//! b = "bob"
//! at = "3+10:00"
//!
//! [[infection]]
//! user = "bob"
//! at = "6+09:00"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use en_core::domain::{
    validate_clusters, ClusterId, RegionId, ReplicationType, Timestamp, ROAMING_WINDOW_DAYS, SECS_PER_DAY,
    SECS_PER_INTERVAL,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("backend setup failed: {0}")]
    Backend(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidScenario(msg.into())
}

/// A point in simulated time, written `D+HH:MM[:SS]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "TimeRepr", into = "String")]
pub struct SimTime(pub Timestamp);

#[derive(Deserialize)]
#[serde(untagged)]
enum TimeRepr {
    Days(u64),
    Text(String),
}

impl TryFrom<TimeRepr> for SimTime {
    type Error = String;

    fn try_from(value: TimeRepr) -> Result<Self, Self::Error> {
        match value {
            TimeRepr::Days(days) => Ok(SimTime(Timestamp::from_days(days))),
            TimeRepr::Text(text) => text.parse(),
        }
    }
}

impl FromStr for SimTime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad time {s:?}, expected D+HH:MM[:SS]");
        let (day, clock) = match s.split_once('+') {
            Some((day, clock)) => (day, Some(clock)),
            None => (s, None),
        };
        let day: u64 = day.trim().parse().map_err(|_| bad())?;
        let mut secs = day * SECS_PER_DAY;
        if let Some(clock) = clock {
            let parts: Vec<u64> = clock
                .split(':')
                .map(|p| p.trim().parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
            let (h, m, sec) = match parts.as_slice() {
                [h, m] => (*h, *m, 0),
                [h, m, sec] => (*h, *m, *sec),
                _ => return Err(bad()),
            };
            if h >= 24 || m >= 60 || sec >= 60 {
                return Err(bad());
            }
            secs += h * 3600 + m * 60 + sec;
        }
        Ok(SimTime(Timestamp(secs)))
    }
}

impl From<SimTime> for String {
    fn from(value: SimTime) -> Self {
        value.to_string()
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let secs = self.0.secs();
        let rem = secs % SECS_PER_DAY;
        write!(f, "{}+{:02}:{:02}", secs / SECS_PER_DAY, rem / 3600, rem % 3600 / 60)?;
        if rem % 60 != 0 {
            write!(f, ":{:02}", rem % 60)?;
        }
        Ok(())
    }
}

/// Which public feeds user agents listen to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Listening {
    /// Base regions plus every roaming region until 14 days after leaving it.
    #[default]
    Roaming,
    /// Base regions only.
    Home,
}

impl fmt::Display for Listening {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Listening::Roaming => "roaming",
            Listening::Home => "home",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cadence {
    #[serde(default = "default_interval")]
    pub build_interval_secs: u64,
    #[serde(default = "default_interval")]
    pub poll_interval_secs: u64,
    #[serde(default = "default_interval")]
    pub download_interval_secs: u64,
    #[serde(default = "default_retention")]
    pub retention_days: u32,
    #[serde(default = "default_chunk")]
    pub max_chunk_size: usize,
}

fn default_interval() -> u64 {
    SECS_PER_INTERVAL
}

fn default_retention() -> u32 {
    30
}

fn default_chunk() -> usize {
    en_core::producer::DEFAULT_MAX_CHUNK_SIZE
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence {
            build_interval_secs: default_interval(),
            poll_interval_secs: default_interval(),
            download_interval_secs: default_interval(),
            retention_days: default_retention(),
            max_chunk_size: default_chunk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub id: RegionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vendor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub name: String,
    pub members: Vec<RegionId>,
}

/// `consumer` pulls from `producer` in the given mode, overriding the default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub consumer: RegionId,
    pub producer: RegionId,
    pub mode: ReplicationType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripSpec {
    pub region: RegionId,
    pub enter: SimTime,
    pub exit: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub id: String,
    /// Base regions; the first one is where the user uploads.
    pub base: Vec<RegionId>,
    #[serde(default, rename = "trip", skip_serializing_if = "Vec::is_empty")]
    pub trips: Vec<TripSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSpec {
    pub a: String,
    pub b: String,
    pub at: SimTime,
    /// Where the contact happens; must match both users' location if given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfectionSpec {
    pub user: String,
    pub at: SimTime,
    /// Region of the positive test; anything but the first base region is a
    /// roaming upload, which the federation does not support.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon_days: u32,
    #[serde(default = "default_replication")]
    pub replication: ReplicationType,
    #[serde(default)]
    pub listening: Listening,
    #[serde(default = "default_max_base")]
    pub max_base_regions: usize,
    #[serde(default)]
    pub cadence: Cadence,
    #[serde(rename = "region")]
    pub regions: Vec<RegionSpec>,
    #[serde(default, rename = "cluster", skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default, rename = "link", skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkSpec>,
    #[serde(default, rename = "user")]
    pub users: Vec<UserSpec>,
    #[serde(default, rename = "contact")]
    pub contacts: Vec<ContactSpec>,
    #[serde(default, rename = "infection")]
    pub infections: Vec<InfectionSpec>,
}

fn default_replication() -> ReplicationType {
    ReplicationType::Partial
}

fn default_max_base() -> usize {
    3
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn to_toml(&self) -> Result<String, SimError> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn horizon(&self) -> Timestamp {
        Timestamp::from_days(u64::from(self.horizon_days))
    }

    pub fn region_ids(&self) -> Vec<RegionId> {
        self.regions.iter().map(|r| r.id).collect()
    }

    pub fn user(&self, id: &str) -> Option<&UserSpec> {
        self.users.iter().find(|u| u.id == id)
    }

    pub fn cluster_of(&self, region: RegionId) -> Option<&ClusterSpec> {
        self.clusters.iter().find(|c| c.members.contains(&region))
    }

    /// Replication mode of the link `consumer <- producer`, if there is one.
    ///
    /// Without an explicit link, all-to-all applies between members of the
    /// same cluster and partial replication everywhere else.
    pub fn link_mode(&self, consumer: RegionId, producer: RegionId) -> Option<ReplicationType> {
        if consumer == producer {
            return None;
        }
        if let Some(link) = self
            .links
            .iter()
            .find(|l| l.consumer == consumer && l.producer == producer)
        {
            return Some(link.mode);
        }
        match self.replication {
            ReplicationType::Partial => Some(ReplicationType::Partial),
            ReplicationType::AllToAll => {
                let same_cluster = self
                    .cluster_of(consumer)
                    .is_some_and(|c| c.members.contains(&producer));
                Some(if same_cluster {
                    ReplicationType::AllToAll
                } else {
                    ReplicationType::Partial
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon_days == 0 {
            return Err(invalid("horizon_days must be positive"));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(invalid(format!("seed {} does not fit in a signed 64-bit integer", self.seed)));
        }
        let c = &self.cadence;
        if c.build_interval_secs == 0 || c.poll_interval_secs == 0 || c.download_interval_secs == 0 {
            return Err(invalid("cadence intervals must be positive"));
        }
        if c.retention_days == 0 || c.max_chunk_size == 0 {
            return Err(invalid("retention_days and max_chunk_size must be positive"));
        }
        let mut regions = BTreeSet::new();
        for region in &self.regions {
            if !regions.insert(region.id) {
                return Err(invalid(format!("region {} listed twice", region.id)));
            }
        }
        if regions.is_empty() {
            return Err(invalid("no regions"));
        }
        let known = |r: &RegionId, what: &str| {
            if regions.contains(r) {
                Ok(())
            } else {
                Err(invalid(format!("{what} references unknown region {r}")))
            }
        };
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                for m in &c.members {
                    known(m, &format!("cluster {}", c.name))?;
                }
                ClusterId::new(c.name.clone(), c.members.iter().copied())
                    .map_err(|e| invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        validate_clusters(&clusters).map_err(|e| invalid(e.to_string()))?;
        for link in &self.links {
            known(&link.consumer, "link")?;
            known(&link.producer, "link")?;
            if link.consumer == link.producer {
                return Err(invalid(format!("link from {} to itself", link.consumer)));
            }
        }

        let horizon = self.horizon();
        let mut users = BTreeSet::new();
        for user in &self.users {
            if !users.insert(user.id.as_str()) {
                return Err(invalid(format!("user {} listed twice", user.id)));
            }
            if user.base.is_empty() || user.base.len() > self.max_base_regions {
                return Err(invalid(format!(
                    "user {} must have 1..={} base regions",
                    user.id, self.max_base_regions
                )));
            }
            for base in &user.base {
                known(base, &format!("user {}", user.id))?;
            }
            let mut trips: Vec<&TripSpec> = user.trips.iter().collect();
            trips.sort_by_key(|t| t.enter);
            for trip in &trips {
                known(&trip.region, &format!("user {}", user.id))?;
                if trip.exit <= trip.enter {
                    return Err(invalid(format!("user {} has a trip ending before it starts", user.id)));
                }
                if trip.exit.0 > horizon {
                    return Err(invalid(format!("user {} travels past the horizon", user.id)));
                }
            }
            if trips.windows(2).any(|w| w[0].exit > w[1].enter) {
                return Err(invalid(format!("user {} is in two places at once", user.id)));
            }
        }
        for contact in &self.contacts {
            let (a, b) = match (self.user(&contact.a), self.user(&contact.b)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(invalid(format!("contact {}-{} names an unknown user", contact.a, contact.b))),
            };
            if a.id == b.id {
                return Err(invalid(format!("user {} meets themselves", a.id)));
            }
            if contact.at.0 >= horizon {
                return Err(invalid(format!("contact {}-{} after the horizon", a.id, b.id)));
            }
            let (la, lb) = (location_at(a, contact.at.0), location_at(b, contact.at.0));
            if la != lb {
                return Err(invalid(format!(
                    "{} is in {la} and {} is in {lb} at {}",
                    a.id, b.id, contact.at
                )));
            }
            if let Some(region) = contact.region {
                if region != la {
                    return Err(invalid(format!(
                        "contact {}-{} at {} is in {la}, not {region}",
                        a.id, b.id, contact.at
                    )));
                }
            }
        }
        let mut infected = BTreeSet::new();
        for infection in &self.infections {
            if self.user(&infection.user).is_none() {
                return Err(invalid(format!("infection of unknown user {}", infection.user)));
            }
            if !infected.insert(infection.user.as_str()) {
                return Err(invalid(format!("user {} tests positive twice", infection.user)));
            }
            if infection.at.0 >= horizon {
                return Err(invalid(format!("infection of {} after the horizon", infection.user)));
            }
            if let Some(region) = infection.region {
                known(&region, &format!("infection of {}", infection.user))?;
            }
        }
        Ok(())
    }
}

/// Where `user` is at `t`: on a trip, or else in their first base region.
pub fn location_at(user: &UserSpec, t: Timestamp) -> RegionId {
    user.trips
        .iter()
        .find(|trip| trip.enter.0 <= t && t < trip.exit.0)
        .map_or(user.base[0], |trip| trip.region)
}

/// Half-open windows during which a roaming region stays associated with the
/// user: from entering until 14 days after leaving.
pub fn roaming_windows(user: &UserSpec) -> BTreeMap<RegionId, Vec<(Timestamp, Timestamp)>> {
    let mut windows: BTreeMap<RegionId, Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
    for trip in &user.trips {
        if user.base.contains(&trip.region) {
            continue;
        }
        windows
            .entry(trip.region)
            .or_default()
            .push((trip.enter.0, trip.exit.0.plus_days(ROAMING_WINDOW_DAYS)));
    }
    windows
}

/// Base regions plus roaming regions whose association has not expired at `t`.
pub fn associated_regions(user: &UserSpec, t: Timestamp) -> BTreeSet<RegionId> {
    let mut regions: BTreeSet<RegionId> = user.base.iter().copied().collect();
    for (region, windows) in roaming_windows(user) {
        if windows.iter().any(|(from, to)| *from <= t && t < *to) {
            regions.insert(region);
        }
    }
    regions
}

/// Public feeds the user's device listens to at `t`.
pub fn subscriptions_at(user: &UserSpec, t: Timestamp, listening: Listening) -> BTreeSet<RegionId> {
    match listening {
        Listening::Roaming => associated_regions(user, t),
        Listening::Home => user.base.iter().copied().collect(),
    }
}

/// Listening windows per region, `None` as the end meaning "until the horizon".
pub fn subscription_windows(
    user: &UserSpec,
    listening: Listening,
) -> BTreeMap<RegionId, Vec<(Timestamp, Option<Timestamp>)>> {
    let mut windows: BTreeMap<RegionId, Vec<(Timestamp, Option<Timestamp>)>> = user
        .base
        .iter()
        .map(|r| (*r, vec![(Timestamp(0), None)]))
        .collect();
    if listening == Listening::Roaming {
        for (region, list) in roaming_windows(user) {
            windows
                .entry(region)
                .or_default()
                .extend(list.into_iter().map(|(a, b)| (a, Some(b))));
        }
    }
    windows
}

#[cfg(test)]
mod tests {
    use super::*;

    const STORY: &str = r#"
name = "story"
horizon_days = 21

[[region]]
id = "AA"
[[region]]
id = "BB"

[[user]]
id = "alice"
base = ["AA"]

[[user]]
id = "bob"
base = ["BB"]
trip = [{ region = "AA", enter = "2+08:00", exit = "5+18:00" }]

[[contact]]
a = "alice"
b = "bob"
at = "3+10:00"

[[infection]]
user = "bob"
at = "6+09:00"
"#;

    fn r(s: &str) -> RegionId {
        s.parse().unwrap()
    }

    #[test]
    fn parses_times() {
        assert_eq!("3+10:00".parse::<SimTime>().unwrap().0, Timestamp(3 * 86400 + 36000));
        assert_eq!("2".parse::<SimTime>().unwrap().0, Timestamp::from_days(2));
        assert_eq!("0+00:00:30".parse::<SimTime>().unwrap().0, Timestamp(30));
        assert!("1+24:00".parse::<SimTime>().is_err());
        assert!("x".parse::<SimTime>().is_err());
        assert_eq!(SimTime(Timestamp(3 * 86400 + 36000)).to_string(), "3+10:00");
    }

    #[test]
    fn parses_story_and_round_trips() {
        let scenario: Scenario = STORY.parse().unwrap();
        assert_eq!(scenario.users.len(), 2);
        assert_eq!(scenario.replication, ReplicationType::Partial);
        let again: Scenario = scenario.to_toml().unwrap().parse().unwrap();
        assert_eq!(again, scenario);
    }

    #[test]
    fn itinerary_queries() {
        let scenario: Scenario = STORY.parse().unwrap();
        let bob = scenario.user("bob").unwrap();
        assert_eq!(location_at(bob, Timestamp::from_days(1)), r("BB"));
        assert_eq!(location_at(bob, Timestamp::from_days(3)), r("AA"));
        assert_eq!(location_at(bob, Timestamp::from_days(6)), r("BB"));
        // Exit at 5+18:00, association lasts 14 days more.
        let exit = "5+18:00".parse::<SimTime>().unwrap().0;
        assert!(associated_regions(bob, exit.plus_days(14).minus_secs(1)).contains(&r("AA")));
        assert!(!associated_regions(bob, exit.plus_days(14)).contains(&r("AA")));
        assert!(!associated_regions(bob, Timestamp::from_days(1)).contains(&r("AA")));
        assert_eq!(
            subscriptions_at(bob, Timestamp::from_days(3), Listening::Home),
            [r("BB")].into()
        );
    }

    #[test]
    fn rejects_inconsistent_scenarios() {
        let broken = [
            STORY.replace("at = \"3+10:00\"", "at = \"1+10:00\""),
            STORY.replace("base = [\"AA\"]", "base = [\"ZZ\"]"),
            STORY.replace("exit = \"5+18:00\"", "exit = \"1+18:00\""),
            STORY.replace("user = \"bob\"", "user = \"carol\""),
            STORY.replace("horizon_days = 21", "horizon_days = 4"),
            STORY.replace("b = \"bob\"", "b = \"alice\""),
            STORY.replace("name = \"story\"", "name = \"story\"\nunknown = 1"),
            STORY.replace(
                "trip = [",
                "trip = [{ region = \"AA\", enter = \"3+00:00\", exit = \"4+00:00\" }, ",
            ),
        ];
        for text in broken {
            assert!(text.parse::<Scenario>().is_err(), "{text}");
        }
    }

    #[test]
    fn link_modes() {
        let mut scenario: Scenario = STORY.parse().unwrap();
        assert_eq!(scenario.link_mode(r("AA"), r("BB")), Some(ReplicationType::Partial));
        assert_eq!(scenario.link_mode(r("AA"), r("AA")), None);
        scenario.replication = ReplicationType::AllToAll;
        // Not in a common cluster: falls back to partial.
        assert_eq!(scenario.link_mode(r("AA"), r("BB")), Some(ReplicationType::Partial));
        scenario.clusters.push(ClusterSpec {
            name: "EU".into(),
            members: vec![r("AA"), r("BB")],
        });
        assert_eq!(scenario.link_mode(r("AA"), r("BB")), Some(ReplicationType::AllToAll));
        scenario.links.push(LinkSpec {
            consumer: r("AA"),
            producer: r("BB"),
            mode: ReplicationType::Partial,
        });
        assert_eq!(scenario.link_mode(r("AA"), r("BB")), Some(ReplicationType::Partial));
        assert_eq!(scenario.link_mode(r("BB"), r("AA")), Some(ReplicationType::AllToAll));
    }
}
