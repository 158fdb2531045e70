//! The diagnosis key datastore.
//!
//! Keys are split into a `local` partition (uploaded by infected users of this
//! backend, carrying the regions they declared) and a `remote` partition
//! (pulled from peer backends, carrying only the source region). Every stored
//! key gets a sequence number; cursors are the last sequence number consumed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::RwLock;

use thiserror::Error;

use crate::domain::{DiagnosisKey, RegionId, Timestamp, MAX_UPLOAD_KEYS, SECS_PER_DAY};
use crate::journal::{Journal, JournalError, JournalRecord};

#[derive(Debug, Error)]
pub enum KeystoreError {
    #[error("upload authorization code rejected")]
    UnauthorizedUpload,
    #[error("malformed upload: {0}")]
    MalformedUpload(String),
    #[error("cursor {cursor} is beyond the end of the store ({end})")]
    InvalidCursor { cursor: u64, end: u64 },
    #[error("invalid retention policy: {0}")]
    InvalidRetention(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// An infected user's keys plus the regions they declared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosisKeyUpload {
    pub keys: Vec<DiagnosisKey>,
    /// Base and roaming regions declared by the user; always contains `testing_region`.
    pub declared_regions: BTreeSet<RegionId>,
    pub testing_region: RegionId,
    pub upload_time: Timestamp,
    pub authorization_code: String,
}

impl DiagnosisKeyUpload {
    pub fn validate(&self) -> Result<(), KeystoreError> {
        if self.keys.is_empty() || self.keys.len() > MAX_UPLOAD_KEYS {
            return Err(KeystoreError::MalformedUpload(format!(
                "upload must carry 1..={MAX_UPLOAD_KEYS} keys, got {}",
                self.keys.len()
            )));
        }
        if !self.declared_regions.contains(&self.testing_region) {
            return Err(KeystoreError::MalformedUpload(format!(
                "testing region {} missing from declared regions",
                self.testing_region
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyOrigin {
    Local {
        declared_regions: BTreeSet<RegionId>,
        testing_region: RegionId,
    },
    Remote {
        source: RegionId,
    },
}

impl KeyOrigin {
    pub fn is_local(&self) -> bool {
        matches!(self, KeyOrigin::Local { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredKey {
    pub seq: u64,
    pub key: DiagnosisKey,
    pub origin: KeyOrigin,
    pub stored_at: Timestamp,
}

impl StoredKey {
    fn journal_record(&self) -> JournalRecord {
        match &self.origin {
            KeyOrigin::Local {
                declared_regions,
                testing_region,
            } => JournalRecord::Local {
                key: self.key,
                declared_regions: declared_regions.clone(),
                testing_region: *testing_region,
                stored_at: self.stored_at,
            },
            KeyOrigin::Remote { source } => JournalRecord::Remote {
                key: self.key,
                source: *source,
                stored_at: self.stored_at,
            },
        }
    }
}

/// Position in the store: the sequence number of the last key consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cursor(pub u64);

impl Cursor {
    pub const START: Cursor = Cursor(0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetentionPolicy {
    t_days: u32,
}

impl RetentionPolicy {
    pub fn new(t_days: u32) -> Result<Self, KeystoreError> {
        if t_days == 0 {
            return Err(KeystoreError::InvalidRetention(
                "retention must be at least one day".into(),
            ));
        }
        Ok(RetentionPolicy { t_days })
    }

    pub fn t_days(&self) -> u32 {
        self.t_days
    }

    /// Keys stored at or before this instant are expired.
    pub fn cutoff(&self, now: Timestamp) -> Option<Timestamp> {
        now.secs()
            .checked_sub(u64::from(self.t_days) * SECS_PER_DAY)
            .map(Timestamp)
    }

    pub fn is_expired(&self, stored_at: Timestamp, now: Timestamp) -> bool {
        self.cutoff(now).is_some_and(|cutoff| stored_at <= cutoff)
    }
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy { t_days: 30 }
    }
}

pub trait AuthorizationVerifier: Send + Sync {
    fn verify(&self, code: &str) -> bool;
}

/// Accepts codes from a fixed list, for testing and simulation.
#[derive(Debug, Clone, Default)]
pub struct StaticCodeVerifier {
    codes: HashSet<String>,
}

impl StaticCodeVerifier {
    pub fn new<I, S>(codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        StaticCodeVerifier {
            codes: codes.into_iter().map(Into::into).collect(),
        }
    }
}

impl AuthorizationVerifier for StaticCodeVerifier {
    fn verify(&self, code: &str) -> bool {
        self.codes.contains(code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PartitionCounts {
    pub local: usize,
    pub remote: usize,
}

#[derive(Debug, Default)]
struct Inner {
    records: BTreeMap<u64, StoredKey>,
    by_bytes: HashMap<[u8; 16], u64>,
    last_seq: u64,
    journal: Option<Journal>,
}

impl Inner {
    fn insert(&mut self, key: DiagnosisKey, origin: KeyOrigin, stored_at: Timestamp) -> Option<StoredKey> {
        if self.by_bytes.contains_key(key.bytes()) {
            return None;
        }
        self.last_seq += 1;
        let stored = StoredKey {
            seq: self.last_seq,
            key,
            origin,
            stored_at,
        };
        self.by_bytes.insert(*key.bytes(), stored.seq);
        self.records.insert(stored.seq, stored.clone());
        Some(stored)
    }

    fn check_cursor(&self, cursor: Cursor) -> Result<(), KeystoreError> {
        if cursor.0 > self.last_seq {
            return Err(KeystoreError::InvalidCursor {
                cursor: cursor.0,
                end: self.last_seq,
            });
        }
        Ok(())
    }

    fn persist(&mut self, stored: &[StoredKey]) -> Result<(), KeystoreError> {
        if let Some(journal) = self.journal.as_mut() {
            let records: Vec<_> = stored.iter().map(StoredKey::journal_record).collect();
            journal.append(&records)?;
        }
        Ok(())
    }
}

pub struct KeyStore {
    inner: RwLock<Inner>,
    verifier: Box<dyn AuthorizationVerifier>,
}

impl std::fmt::Debug for KeyStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyStore")
            .field("counts", &self.counts())
            .finish_non_exhaustive()
    }
}

impl KeyStore {
    /// An in-memory store.
    pub fn new(verifier: impl AuthorizationVerifier + 'static) -> Self {
        KeyStore {
            inner: RwLock::new(Inner::default()),
            verifier: Box::new(verifier),
        }
    }

    /// A store backed by a journal file, replaying any records already in it.
    pub fn open(
        path: impl AsRef<Path>,
        verifier: impl AuthorizationVerifier + 'static,
    ) -> Result<Self, KeystoreError> {
        let (journal, records) = Journal::open(path)?;
        let mut inner = Inner::default();
        for record in records {
            match record {
                JournalRecord::Local {
                    key,
                    declared_regions,
                    testing_region,
                    stored_at,
                } => {
                    inner.insert(
                        key,
                        KeyOrigin::Local {
                            declared_regions,
                            testing_region,
                        },
                        stored_at,
                    );
                }
                JournalRecord::Remote {
                    key,
                    source,
                    stored_at,
                } => {
                    inner.insert(key, KeyOrigin::Remote { source }, stored_at);
                }
                JournalRecord::Peer { .. } => {}
            }
        }
        inner.journal = Some(journal);
        Ok(KeyStore {
            inner: RwLock::new(inner),
            verifier: Box::new(verifier),
        })
    }

    /// Stores an upload's keys in the local partition; returns how many were new.
    pub fn ingest_local(
        &self,
        upload: &DiagnosisKeyUpload,
        now: Timestamp,
    ) -> Result<usize, KeystoreError> {
        if !self.verifier.verify(&upload.authorization_code) {
            return Err(KeystoreError::UnauthorizedUpload);
        }
        upload.validate()?;
        let origin = KeyOrigin::Local {
            declared_regions: upload.declared_regions.clone(),
            testing_region: upload.testing_region,
        };
        let mut inner = self.inner.write().expect("keystore lock poisoned");
        let stored: Vec<StoredKey> = upload
            .keys
            .iter()
            .filter_map(|key| inner.insert(*key, origin.clone(), now))
            .collect();
        inner.persist(&stored)?;
        Ok(stored.len())
    }

    /// Stores keys pulled from `source` in the remote partition; returns how many were new.
    pub fn ingest_remote(
        &self,
        keys: &[DiagnosisKey],
        source: RegionId,
        now: Timestamp,
    ) -> Result<usize, KeystoreError> {
        let mut inner = self.inner.write().expect("keystore lock poisoned");
        let stored: Vec<StoredKey> = keys
            .iter()
            .filter_map(|key| inner.insert(*key, KeyOrigin::Remote { source }, now))
            .collect();
        inner.persist(&stored)?;
        Ok(stored.len())
    }

    /// Every key (both partitions) stored after `cursor`, in storage order.
    pub fn read_since(&self, cursor: Cursor) -> Result<Vec<StoredKey>, KeystoreError> {
        self.read_filtered(cursor, |_| true)
    }

    pub fn read_local_since(&self, cursor: Cursor) -> Result<Vec<StoredKey>, KeystoreError> {
        self.read_filtered(cursor, |stored| stored.origin.is_local())
    }

    /// Local keys after `cursor` whose uploader declared `region`.
    pub fn read_local_for_region(
        &self,
        region: RegionId,
        cursor: Cursor,
    ) -> Result<Vec<StoredKey>, KeystoreError> {
        self.read_filtered(cursor, |stored| match &stored.origin {
            KeyOrigin::Local {
                declared_regions, ..
            } => declared_regions.contains(&region),
            KeyOrigin::Remote { .. } => false,
        })
    }

    fn read_filtered(
        &self,
        cursor: Cursor,
        keep: impl Fn(&StoredKey) -> bool,
    ) -> Result<Vec<StoredKey>, KeystoreError> {
        let inner = self.inner.read().expect("keystore lock poisoned");
        inner.check_cursor(cursor)?;
        Ok(inner
            .records
            .range(cursor.0 + 1..)
            .map(|(_, stored)| stored)
            .filter(|stored| keep(stored))
            .cloned()
            .collect())
    }

    /// The cursor positioned after the newest stored key.
    pub fn end_cursor(&self) -> Cursor {
        Cursor(self.inner.read().expect("keystore lock poisoned").last_seq)
    }

    /// Removes every key stored at or before `now - T`; returns how many were removed.
    pub fn purge_expired(
        &self,
        policy: RetentionPolicy,
        now: Timestamp,
    ) -> Result<usize, KeystoreError> {
        let mut inner = self.inner.write().expect("keystore lock poisoned");
        let expired: Vec<u64> = inner
            .records
            .values()
            .filter(|stored| policy.is_expired(stored.stored_at, now))
            .map(|stored| stored.seq)
            .collect();
        if expired.is_empty() {
            return Ok(0);
        }
        for seq in &expired {
            if let Some(stored) = inner.records.remove(seq) {
                inner.by_bytes.remove(stored.key.bytes());
            }
        }
        let survivors: Vec<JournalRecord> = inner
            .records
            .values()
            .map(StoredKey::journal_record)
            .collect();
        if let Some(journal) = inner.journal.as_mut() {
            journal.rewrite(&survivors)?;
        }
        Ok(expired.len())
    }

    pub fn origin_of(&self, key_bytes: &[u8; 16]) -> Option<KeyOrigin> {
        let inner = self.inner.read().expect("keystore lock poisoned");
        let seq = inner.by_bytes.get(key_bytes)?;
        inner.records.get(seq).map(|stored| stored.origin.clone())
    }

    pub fn stored_at(&self, key_bytes: &[u8; 16]) -> Option<Timestamp> {
        let inner = self.inner.read().expect("keystore lock poisoned");
        let seq = inner.by_bytes.get(key_bytes)?;
        inner.records.get(seq).map(|stored| stored.stored_at)
    }

    pub fn contains(&self, key_bytes: &[u8; 16]) -> bool {
        self.inner
            .read()
            .expect("keystore lock poisoned")
            .by_bytes
            .contains_key(key_bytes)
    }

    pub fn counts(&self) -> PartitionCounts {
        let inner = self.inner.read().expect("keystore lock poisoned");
        let local = inner
            .records
            .values()
            .filter(|stored| stored.origin.is_local())
            .count();
        PartitionCounts {
            local,
            remote: inner.records.len() - local,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("keystore lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn oldest_stored_at(&self) -> Option<Timestamp> {
        let inner = self.inner.read().expect("keystore lock poisoned");
        inner.records.values().map(|stored| stored.stored_at).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> RegionId {
        s.parse().unwrap()
    }

    fn key(n: u8) -> DiagnosisKey {
        DiagnosisKey::new([n; 16], u32::from(n))
    }

    fn upload(keys: impl IntoIterator<Item = u8>, declared: &[&str], testing: &str) -> DiagnosisKeyUpload {
        DiagnosisKeyUpload {
            keys: keys.into_iter().map(key).collect(),
            declared_regions: declared.iter().map(|s| r(s)).collect(),
            testing_region: r(testing),
            upload_time: Timestamp(0),
            authorization_code: "ok".into(),
        }
    }

    fn store() -> KeyStore {
        KeyStore::new(StaticCodeVerifier::new(["ok"]))
    }

    #[test]
    fn local_ingest_is_idempotent() {
        let store = store();
        let up = upload(1..=14, &["CH", "IT"], "CH");
        assert_eq!(store.ingest_local(&up, Timestamp(10)).unwrap(), 14);
        assert_eq!(store.ingest_local(&up, Timestamp(20)).unwrap(), 0);
        assert_eq!(store.len(), 14);
    }

    #[test]
    fn upload_validation() {
        let store = store();
        assert!(matches!(
            store.ingest_local(&upload([1], &["IT"], "CH"), Timestamp(0)),
            Err(KeystoreError::MalformedUpload(_))
        ));
        assert!(matches!(
            store.ingest_local(&upload([], &["CH"], "CH"), Timestamp(0)),
            Err(KeystoreError::MalformedUpload(_))
        ));
        assert!(matches!(
            store.ingest_local(&upload(1..=15, &["CH"], "CH"), Timestamp(0)),
            Err(KeystoreError::MalformedUpload(_))
        ));
        let mut bad = upload([1], &["CH"], "CH");
        bad.authorization_code = "nope".into();
        assert!(matches!(
            store.ingest_local(&bad, Timestamp(0)),
            Err(KeystoreError::UnauthorizedUpload)
        ));
        assert!(store.is_empty());
    }

    #[test]
    fn remote_ingest_dedups_and_preserves_local_origin() {
        let store = store();
        let fresh: Vec<_> = (1..=5).map(key).collect();
        assert_eq!(store.ingest_remote(&fresh, r("IT"), Timestamp(0)).unwrap(), 5);
        assert_eq!(store.ingest_remote(&fresh, r("IT"), Timestamp(1)).unwrap(), 0);

        store
            .ingest_local(&upload([9], &["CH"], "CH"), Timestamp(2))
            .unwrap();
        assert_eq!(store.ingest_remote(&[key(9)], r("FR"), Timestamp(3)).unwrap(), 0);
        assert!(store.origin_of(key(9).bytes()).unwrap().is_local());
    }

    #[test]
    fn local_reads_skip_remote_keys() {
        let store = store();
        store.ingest_local(&upload([1], &["CH"], "CH"), Timestamp(0)).unwrap();
        store.ingest_remote(&[key(2)], r("IT"), Timestamp(0)).unwrap();
        store.ingest_local(&upload([3, 4], &["CH"], "CH"), Timestamp(0)).unwrap();
        store.ingest_remote(&[key(5)], r("IT"), Timestamp(0)).unwrap();

        let local = store.read_local_since(Cursor::START).unwrap();
        assert_eq!(local.len(), 3);
        assert!(local.iter().all(|s| s.origin.is_local()));
        assert_eq!(local, store.read_local_since(Cursor::START).unwrap());
        assert!(store.read_local_since(store.end_cursor()).unwrap().is_empty());
        assert_eq!(store.read_since(Cursor::START).unwrap().len(), 5);
        assert!(matches!(
            store.read_local_since(Cursor(99)),
            Err(KeystoreError::InvalidCursor { cursor: 99, end: 5 })
        ));
    }

    #[test]
    fn region_reads_filter_on_declarations() {
        let store = store();
        store
            .ingest_local(&upload([1], &["CH", "IT"], "CH"), Timestamp(0))
            .unwrap();
        store.ingest_local(&upload([2], &["CH"], "CH"), Timestamp(0)).unwrap();
        let it = store.read_local_for_region(r("IT"), Cursor::START).unwrap();
        assert_eq!(it.len(), 1);
        assert_eq!(it[0].key, key(1));
        assert!(store
            .read_local_for_region(r("FR"), Cursor::START)
            .unwrap()
            .is_empty());
        assert_eq!(
            store.read_local_for_region(r("CH"), Cursor::START).unwrap(),
            store.read_local_since(Cursor::START).unwrap()
        );
    }

    #[test]
    fn purge_respects_retention_boundary() {
        let store = store();
        let now = Timestamp::from_days(100);
        store
            .ingest_remote(&[key(1)], r("IT"), now.minus_secs(31 * SECS_PER_DAY))
            .unwrap();
        store
            .ingest_remote(&[key(2)], r("IT"), now.minus_secs(29 * SECS_PER_DAY))
            .unwrap();
        let policy = RetentionPolicy::default();
        assert_eq!(policy.t_days(), 30);
        assert_eq!(store.purge_expired(policy, now).unwrap(), 1);
        assert!(!store.contains(key(1).bytes()));
        assert!(store.contains(key(2).bytes()));
        assert_eq!(KeyStore::new(StaticCodeVerifier::default()).purge_expired(policy, now).unwrap(), 0);
        assert!(RetentionPolicy::new(0).is_err());
        // Nothing expires before the epoch has advanced past T.
        assert_eq!(store.purge_expired(policy, Timestamp::from_days(1)).unwrap(), 0);
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.journal");
        {
            let store = KeyStore::open(&path, StaticCodeVerifier::new(["ok"])).unwrap();
            store
                .ingest_local(&upload([1, 2], &["CH", "IT"], "CH"), Timestamp(5))
                .unwrap();
            store.ingest_remote(&[key(3)], r("IT"), Timestamp(6)).unwrap();
        }
        let reopened = KeyStore::open(&path, StaticCodeVerifier::new(["ok"])).unwrap();
        assert_eq!(reopened.counts(), PartitionCounts { local: 2, remote: 1 });
        assert_eq!(
            reopened.read_local_for_region(r("IT"), Cursor::START).unwrap().len(),
            2
        );
        let now = Timestamp(6).plus_days(30);
        assert_eq!(reopened.purge_expired(RetentionPolicy::default(), now).unwrap(), 3);
        drop(reopened);
        let again = KeyStore::open(&path, StaticCodeVerifier::new(["ok"])).unwrap();
        assert!(again.is_empty());
        // Re-ingest after purge survives another restart.
        again.ingest_remote(&[key(3)], r("IT"), now).unwrap();
        drop(again);
        let last = KeyStore::open(&path, StaticCodeVerifier::new(["ok"])).unwrap();
        assert_eq!(last.read_since(Cursor::START).unwrap()[0].stored_at, now);
    }
}
