//! Identifiers, GAEN-style key material and region classification.
//!
//! Rolling proximity identifiers are derived with a documented keyed hash rather
//! than the AES-based construction used by real devices:
//!
//! ```text
//! rpi(tek, interval) = HMAC-SHA256(key = tek.bytes, msg = "EN-RPI-v1" || be32(interval))[..16]
//! ```
//!
//! Intervals are absolute 15-minute slots since the epoch, so day `k` owns the
//! intervals `96k ..= 96k + 95`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const SECS_PER_INTERVAL: u64 = 15 * 60;
pub const INTERVALS_PER_DAY: u32 = 96;
pub const SECS_PER_DAY: u64 = 86_400;
/// Upper bound on keys in a single diagnosis upload.
pub const MAX_UPLOAD_KEYS: usize = 14;
/// Trailing window for the base-region criterion and the roaming expiry.
pub const ROAMING_WINDOW_DAYS: u64 = 14;

const RPI_LABEL: &[u8] = b"EN-RPI-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("malformed region id {0:?}: expected two uppercase letters A-Z")]
    MalformedRegionId(String),
    #[error("invalid identifier: {0}")]
    InvalidIdentifier(String),
    #[error("invalid visit history: {0}")]
    InvalidHistory(String),
    #[error("region {region} appears in clusters {first} and {second}")]
    RegionInMultipleClusters {
        region: RegionId,
        first: String,
        second: String,
    },
}

/// Seconds since the (simulation or unix) epoch.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs)
    }

    pub const fn from_days(days: u64) -> Self {
        Timestamp(days * SECS_PER_DAY)
    }

    pub const fn secs(self) -> u64 {
        self.0
    }

    pub const fn day(self) -> u32 {
        (self.0 / SECS_PER_DAY) as u32
    }

    pub const fn interval(self) -> u32 {
        (self.0 / SECS_PER_INTERVAL) as u32
    }

    pub const fn plus_secs(self, secs: u64) -> Self {
        Timestamp(self.0.saturating_add(secs))
    }

    pub const fn plus_days(self, days: u64) -> Self {
        self.plus_secs(days * SECS_PER_DAY)
    }

    pub const fn minus_secs(self, secs: u64) -> Self {
        Timestamp(self.0.saturating_sub(secs))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        write!(
            f,
            "{}+{:02}:{:02}:{:02}",
            s / SECS_PER_DAY,
            (s % SECS_PER_DAY) / 3600,
            (s % 3600) / 60,
            s % 60
        )
    }
}

/// Two-letter uppercase region code, e.g. `CH`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RegionId([u8; 2]);

impl RegionId {
    pub fn as_bytes(&self) -> [u8; 2] {
        self.0
    }

    pub fn as_str(&self) -> &str {
        // Always two ASCII uppercase letters.
        std::str::from_utf8(&self.0).expect("region id is ascii")
    }

    pub fn from_bytes(bytes: [u8; 2]) -> Result<Self, DomainError> {
        if bytes.iter().all(u8::is_ascii_uppercase) {
            Ok(RegionId(bytes))
        } else {
            Err(DomainError::MalformedRegionId(
                String::from_utf8_lossy(&bytes).into_owned(),
            ))
        }
    }
}

pub fn validate_region_id(raw: &str) -> Result<RegionId, DomainError> {
    match raw.as_bytes() {
        [a, b] => RegionId::from_bytes([*a, *b])
            .map_err(|_| DomainError::MalformedRegionId(raw.to_owned())),
        _ => Err(DomainError::MalformedRegionId(raw.to_owned())),
    }
}

impl FromStr for RegionId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_region_id(s)
    }
}

impl TryFrom<String> for RegionId {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        validate_region_id(&value)
    }
}

impl From<RegionId> for String {
    fn from(value: RegionId) -> Self {
        value.as_str().to_owned()
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RegionId({})", self.as_str())
    }
}

fn validate_name(kind: &str, name: &str) -> Result<(), DomainError> {
    if name.is_empty() || !name.is_ascii() {
        return Err(DomainError::InvalidIdentifier(format!(
            "{kind} name must be non-empty ASCII, got {name:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VendorId(String);

impl VendorId {
    pub fn new(name: impl Into<String>) -> Result<Self, DomainError> {
        let name = name.into();
        validate_name("vendor", &name)?;
        Ok(VendorId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for VendorId {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        VendorId::new(value)
    }
}

impl From<VendorId> for String {
    fn from(value: VendorId) -> Self {
        value.0
    }
}

impl fmt::Display for VendorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A named group of regions (e.g. `EU`, or every site of one enterprise).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterId {
    name: String,
    members: BTreeSet<RegionId>,
}

impl ClusterId {
    pub fn new(
        name: impl Into<String>,
        members: impl IntoIterator<Item = RegionId>,
    ) -> Result<Self, DomainError> {
        let name = name.into();
        validate_name("cluster", &name)?;
        Ok(ClusterId {
            name,
            members: members.into_iter().collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn members(&self) -> &BTreeSet<RegionId> {
        &self.members
    }

    pub fn contains(&self, region: RegionId) -> bool {
        self.members.contains(&region)
    }
}

/// Checks that no region belongs to more than one cluster.
pub fn validate_clusters(clusters: &[ClusterId]) -> Result<(), DomainError> {
    let mut owner: BTreeMap<RegionId, &str> = BTreeMap::new();
    for cluster in clusters {
        for region in &cluster.members {
            if let Some(first) = owner.insert(*region, &cluster.name) {
                return Err(DomainError::RegionInMultipleClusters {
                    region: *region,
                    first: first.to_owned(),
                    second: cluster.name.clone(),
                });
            }
        }
    }
    Ok(())
}

/// How a consumer replicates from a producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicationType {
    /// Every local key of the producer (cluster-internal).
    AllToAll,
    /// Only keys whose uploader declared the consumer's region.
    Partial,
}

impl fmt::Display for ReplicationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplicationType::AllToAll => "all-to-all",
            ReplicationType::Partial => "partial",
        })
    }
}

impl FromStr for ReplicationType {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-to-all" | "a2a" => Ok(ReplicationType::AllToAll),
            "partial" => Ok(ReplicationType::Partial),
            other => Err(DomainError::InvalidIdentifier(format!(
                "unknown replication type {other:?}"
            ))),
        }
    }
}

/// A device's key for one day.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemporaryExposureKey {
    pub bytes: [u8; 16],
    pub valid_day: u32,
}

impl TemporaryExposureKey {
    pub fn new(bytes: [u8; 16], valid_day: u32) -> Self {
        TemporaryExposureKey { bytes, valid_day }
    }

    pub fn first_interval(&self) -> u32 {
        self.valid_day * INTERVALS_PER_DAY
    }

    pub fn covers_interval(&self, interval: u32) -> bool {
        interval / INTERVALS_PER_DAY == self.valid_day
    }

    pub fn rolling_id_at(&self, interval: u32) -> RollingProximityId {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.bytes)
            .expect("hmac accepts any key length");
        mac.update(RPI_LABEL);
        mac.update(&interval.to_be_bytes());
        let digest = mac.finalize().into_bytes();
        let mut bytes = [0u8; 16];
        bytes.copy_from_slice(&digest[..16]);
        RollingProximityId { bytes, interval }
    }
}

impl fmt::Debug for TemporaryExposureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tek({}@{})", hex::encode(self.bytes), self.valid_day)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RollingProximityId {
    pub bytes: [u8; 16],
    pub interval: u32,
}

impl fmt::Debug for RollingProximityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rpi({}@{})", hex::encode(self.bytes), self.interval)
    }
}

/// An observed broadcast. The first metadata byte carries the transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContactEvent {
    pub observed_id: RollingProximityId,
    pub metadata: [u8; 4],
    pub observed_at: Timestamp,
}

impl ContactEvent {
    pub fn transmit_power(&self) -> i8 {
        self.metadata[0] as i8
    }
}

/// A TEK uploaded by a user who tested positive.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiagnosisKey(pub TemporaryExposureKey);

impl DiagnosisKey {
    pub fn new(bytes: [u8; 16], valid_day: u32) -> Self {
        DiagnosisKey(TemporaryExposureKey::new(bytes, valid_day))
    }

    pub fn tek(&self) -> &TemporaryExposureKey {
        &self.0
    }

    pub fn bytes(&self) -> &[u8; 16] {
        &self.0.bytes
    }

    pub fn valid_day(&self) -> u32 {
        self.0.valid_day
    }
}

impl fmt::Debug for DiagnosisKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dk({}@{})", hex::encode(self.0.bytes), self.0.valid_day)
    }
}

/// All 96 rolling IDs broadcast under `tek` during its valid day.
pub fn derive_rolling_ids(tek: &TemporaryExposureKey) -> Vec<RollingProximityId> {
    let first = tek.first_interval();
    (first..first + INTERVALS_PER_DAY)
        .map(|interval| tek.rolling_id_at(interval))
        .collect()
}

/// Reverse index from rolling ID bytes to the key that produced them.
#[derive(Debug, Default, Clone)]
pub struct RollingIdIndex {
    by_id: HashMap<[u8; 16], (u32, usize)>,
    keys: Vec<DiagnosisKey>,
}

impl RollingIdIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a DiagnosisKey>) -> Self {
        let mut index = Self::new();
        for key in keys {
            index.insert(*key);
        }
        index
    }

    pub fn insert(&mut self, key: DiagnosisKey) {
        let slot = self.keys.len();
        self.keys.push(key);
        for rpi in derive_rolling_ids(key.tek()) {
            self.by_id.entry(rpi.bytes).or_insert((rpi.interval, slot));
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// The key whose rolling ID at the contact's interval equals the observed ID.
    pub fn lookup(&self, contact: &ContactEvent) -> Option<&DiagnosisKey> {
        let (interval, slot) = self.by_id.get(&contact.observed_id.bytes)?;
        (*interval == contact.observed_id.interval).then(|| &self.keys[*slot])
    }
}

/// Pairs every contact with each diagnosis key that produced its observed ID.
pub fn match_exposures(
    contacts: &[ContactEvent],
    keys: &[DiagnosisKey],
) -> Vec<(ContactEvent, DiagnosisKey)> {
    if contacts.is_empty() || keys.is_empty() {
        return Vec::new();
    }
    let mut by_id: HashMap<([u8; 16], u32), Vec<usize>> = HashMap::new();
    for (slot, key) in keys.iter().enumerate() {
        for rpi in derive_rolling_ids(key.tek()) {
            by_id.entry((rpi.bytes, rpi.interval)).or_default().push(slot);
        }
    }
    let mut matches = Vec::new();
    for contact in contacts {
        let id = &contact.observed_id;
        if let Some(slots) = by_id.get(&(id.bytes, id.interval)) {
            for slot in slots {
                matches.push((*contact, keys[*slot]));
            }
        }
    }
    matches
}

/// A stay in one region; `exit` is `None` while the visit is ongoing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub region: RegionId,
    pub enter: Timestamp,
    pub exit: Option<Timestamp>,
}

impl Visit {
    pub fn new(region: RegionId, enter: Timestamp, exit: Timestamp) -> Self {
        Visit {
            region,
            enter,
            exit: Some(exit),
        }
    }

    pub fn ongoing(region: RegionId, enter: Timestamp) -> Self {
        Visit {
            region,
            enter,
            exit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionClassification {
    Base,
    Roaming { expires_at: Timestamp },
    None,
}

/// Classifies `region` for a user with the given visit history as of `now`.
///
/// A region is a base region when every trailing 14-day window between the
/// first recorded visit (to any region) and `now` contains a visit to it. A
/// history spanning less than 14 days makes any visited region a base region.
/// Otherwise a region visited within the last 14 days is a roaming region that
/// expires 14 days after the last exit. Visits starting after `now` are ignored
/// and ongoing visits are treated as lasting until `now`.
pub fn classify_region(
    visit_history: &[Visit],
    region: RegionId,
    now: Timestamp,
) -> Result<RegionClassification, DomainError> {
    for visit in visit_history {
        if let Some(exit) = visit.exit {
            if exit < visit.enter {
                return Err(DomainError::InvalidHistory(format!(
                    "visit to {} exits at {} before entering at {}",
                    visit.region, exit, visit.enter
                )));
            }
        }
    }
    let mut per_region: BTreeMap<RegionId, Vec<(Timestamp, Option<Timestamp>)>> = BTreeMap::new();
    for visit in visit_history {
        per_region
            .entry(visit.region)
            .or_default()
            .push((visit.enter, visit.exit));
    }
    for (r, visits) in per_region.iter_mut() {
        visits.sort();
        for pair in visits.windows(2) {
            let (_, prev_exit) = pair[0];
            let (next_enter, _) = pair[1];
            match prev_exit {
                None => {
                    return Err(DomainError::InvalidHistory(format!(
                        "ongoing visit to {r} is followed by another visit"
                    )))
                }
                Some(exit) if exit > next_enter => {
                    return Err(DomainError::InvalidHistory(format!(
                        "overlapping visits to {r} at {next_enter}"
                    )))
                }
                _ => {}
            }
        }
    }

    let Some(horizon_start) = visit_history
        .iter()
        .map(|v| v.enter)
        .filter(|enter| *enter <= now)
        .min()
    else {
        return Ok(RegionClassification::None);
    };

    let visits: Vec<(Timestamp, Timestamp)> = per_region
        .get(&region)
        .map(|visits| {
            visits
                .iter()
                .filter(|(enter, _)| *enter <= now)
                .map(|(enter, exit)| (*enter, exit.map_or(now, |e| e.min(now))))
                .collect()
        })
        .unwrap_or_default();
    let Some(&(_, last_exit)) = visits.last() else {
        return Ok(RegionClassification::None);
    };

    let window = ROAMING_WINDOW_DAYS * SECS_PER_DAY;
    let short_history = now.secs() - horizon_start.secs() < window;
    // Base fails iff some gap without a visit (bounded by the horizon) exceeds the window.
    let mut cursor = horizon_start;
    let mut has_long_gap = false;
    for (enter, exit) in &visits {
        if enter.secs() - cursor.secs().min(enter.secs()) > window {
            has_long_gap = true;
        }
        cursor = cursor.max(*exit);
    }
    if now.secs() - cursor.secs() > window {
        has_long_gap = true;
    }
    if short_history || !has_long_gap {
        return Ok(RegionClassification::Base);
    }

    let expires_at = last_exit.plus_secs(window);
    if now < expires_at {
        Ok(RegionClassification::Roaming { expires_at })
    } else {
        Ok(RegionClassification::None)
    }
}
