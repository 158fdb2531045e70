//! The data-prep engine: turns the key store into signed, chunked feeds.
//!
//! * the public feed carries every key (local and remote),
//! * the all-to-all feed carries local keys only,
//! * the per-region feed for `R` carries local keys whose uploader declared `R`.
//!
//! Remote keys never reach the backend feeds, so keys are not replicated
//! transitively. All feeds are signed with the backend's single feed key.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use ed25519_dalek::{SigningKey, VerifyingKey};
use log::{debug, warn};
use thiserror::Error;

use crate::batch::{Batch, FeedKind};
use crate::domain::{DiagnosisKey, RegionId, Timestamp};
use crate::keystore::{Cursor, KeyOrigin, KeyStore, KeystoreError, RetentionPolicy, StoredKey};

pub const DEFAULT_MAX_CHUNK_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum ProducerError {
    #[error("unknown feed {0}")]
    UnknownFeed(FeedKind),
    #[error("invalid producer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Keystore(#[from] KeystoreError),
    #[error("feed storage: {0}")]
    Storage(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ProducerConfig {
    pub region: RegionId,
    pub max_chunk_size: usize,
    pub retention: RetentionPolicy,
    /// Where built batches are kept across restarts; in-memory only when `None`.
    pub feed_dir: Option<PathBuf>,
}

impl ProducerConfig {
    pub fn new(region: RegionId) -> Self {
        ProducerConfig {
            region,
            max_chunk_size: DEFAULT_MAX_CHUNK_SIZE,
            retention: RetentionPolicy::default(),
            feed_dir: None,
        }
    }
}

/// A built batch together with its wire encoding.
#[derive(Debug)]
pub struct ServedBatch {
    pub batch: Batch,
    pub bytes: Vec<u8>,
    oldest_stored_at: Timestamp,
}

#[derive(Debug, Clone)]
pub enum ChunkResponse {
    Batch(Arc<ServedBatch>),
    /// Nothing at or after the requested position yet.
    End,
    /// The requested batch was dropped by retention.
    Gone,
}

#[derive(Debug, Default)]
struct Feed {
    batches: BTreeMap<u64, Arc<ServedBatch>>,
    next_batch_id: u64,
    cursor: Cursor,
    /// Keys already emitted by batches reloaded from disk.
    reloaded: HashSet<[u8; 16]>,
}

impl Feed {
    fn new() -> Self {
        Feed {
            next_batch_id: 1,
            ..Feed::default()
        }
    }

    fn serve(&self, chunk: Option<u64>) -> ChunkResponse {
        match chunk {
            None => self
                .batches
                .values()
                .next()
                .map_or(ChunkResponse::End, |b| ChunkResponse::Batch(b.clone())),
            Some(id) if id >= self.next_batch_id => ChunkResponse::End,
            Some(id) => self
                .batches
                .get(&id)
                .map_or(ChunkResponse::Gone, |b| ChunkResponse::Batch(b.clone())),
        }
    }
}

/// Summary of batches per feed, for reports and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedSummary {
    pub feed: FeedKind,
    pub retained: Vec<u64>,
    pub next_batch_id: u64,
}

pub struct Producer {
    config: ProducerConfig,
    store: Arc<KeyStore>,
    signing_key: SigningKey,
    build_lock: Mutex<Cursor>,
    feeds: RwLock<BTreeMap<FeedKind, Feed>>,
    declared: Mutex<BTreeSet<RegionId>>,
    reads: AtomicU64,
}

impl std::fmt::Debug for Producer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Producer")
            .field("region", &self.config.region)
            .finish_non_exhaustive()
    }
}

impl Producer {
    pub fn new(
        config: ProducerConfig,
        store: Arc<KeyStore>,
        signing_key: SigningKey,
    ) -> Result<Self, ProducerError> {
        if config.max_chunk_size == 0 {
            return Err(ProducerError::InvalidConfig(
                "max_chunk_size must be positive".into(),
            ));
        }
        let mut feeds = BTreeMap::new();
        feeds.insert(FeedKind::Public, Feed::new());
        feeds.insert(FeedKind::A2A, Feed::new());
        if let Some(dir) = &config.feed_dir {
            fs::create_dir_all(dir)?;
            for (kind, feed) in load_feeds(dir, &store)? {
                feeds.insert(kind, feed);
            }
        }
        Ok(Producer {
            config,
            store,
            signing_key,
            build_lock: Mutex::new(Cursor::START),
            feeds: RwLock::new(feeds),
            declared: Mutex::new(BTreeSet::new()),
            reads: AtomicU64::new(0),
        })
    }

    pub fn region(&self) -> RegionId {
        self.config.region
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }

    /// Materializes the per-region feed for `region` (e.g. for a peer on the ACL).
    pub fn ensure_region_feed(&self, region: RegionId) {
        if region == self.config.region {
            return;
        }
        let mut feeds = self.feeds.write().expect("feeds lock poisoned");
        feeds
            .entry(FeedKind::PerRegion(region))
            .or_insert_with(Feed::new);
    }

    pub fn has_feed(&self, kind: FeedKind) -> bool {
        self.feeds
            .read()
            .expect("feeds lock poisoned")
            .contains_key(&kind)
    }

    /// Batches new keys into every feed; returns the number of new batches per feed.
    pub fn build_chunks(&self, now: Timestamp) -> Result<BTreeMap<FeedKind, usize>, ProducerError> {
        let mut discovered = self.build_lock.lock().expect("build lock poisoned");
        let end = self.store.end_cursor();

        // Regions declared by new uploads get a feed from their first appearance.
        {
            let mut declared = self.declared.lock().expect("declared lock poisoned");
            for stored in self.store.read_local_since(*discovered)? {
                if let KeyOrigin::Local {
                    declared_regions, ..
                } = &stored.origin
                {
                    declared.extend(declared_regions.iter().copied());
                }
            }
            *discovered = end;
            for region in declared.iter() {
                self.ensure_region_feed(*region);
            }
        }

        let kinds: Vec<FeedKind> = self
            .feeds
            .read()
            .expect("feeds lock poisoned")
            .keys()
            .copied()
            .collect();
        let mut built = BTreeMap::new();
        for kind in kinds {
            let cursor = self.feeds.read().expect("feeds lock poisoned")[&kind].cursor;
            let candidates: Vec<StoredKey> = match kind {
                FeedKind::Public => self.store.read_since(cursor)?,
                FeedKind::A2A => self.store.read_local_since(cursor)?,
                FeedKind::PerRegion(region) => self.store.read_local_for_region(region, cursor)?,
            };
            let mut feeds = self.feeds.write().expect("feeds lock poisoned");
            let feed = feeds.get_mut(&kind).expect("feed exists");
            let fresh: Vec<StoredKey> = candidates
                .into_iter()
                .filter(|stored| stored.seq <= end.0)
                .filter(|stored| !feed.reloaded.contains(stored.key.bytes()))
                .collect();
            feed.cursor = end;
            let mut count = 0;
            for chunk in fresh.chunks(self.config.max_chunk_size) {
                let keys: Vec<DiagnosisKey> = chunk.iter().map(|stored| stored.key).collect();
                let oldest_stored_at = chunk
                    .iter()
                    .map(|stored| stored.stored_at)
                    .min()
                    .expect("chunk is non-empty");
                let batch = Batch::sign(kind, feed.next_batch_id, now, keys, &self.signing_key);
                let served = ServedBatch {
                    bytes: batch.encode(),
                    batch,
                    oldest_stored_at,
                };
                if let Some(dir) = &self.config.feed_dir {
                    persist_batch(dir, &served, feed.next_batch_id + 1)?;
                }
                debug!(
                    "{}: built {} batch {} with {} keys",
                    self.config.region,
                    kind,
                    served.batch.batch_id,
                    served.batch.keys.len()
                );
                feed.batches.insert(feed.next_batch_id, Arc::new(served));
                feed.next_batch_id += 1;
                count += 1;
            }
            if count > 0 {
                built.insert(kind, count);
            }
        }
        Ok(built)
    }

    /// Drops every batch holding a key past retention; returns how many were dropped.
    pub fn purge_expired(&self, now: Timestamp) -> Result<usize, ProducerError> {
        let mut feeds = self.feeds.write().expect("feeds lock poisoned");
        let mut dropped = 0;
        for (kind, feed) in feeds.iter_mut() {
            let expired: Vec<u64> = feed
                .batches
                .iter()
                .filter(|(_, b)| self.config.retention.is_expired(b.oldest_stored_at, now))
                .map(|(id, _)| *id)
                .collect();
            for id in expired {
                feed.batches.remove(&id);
                if let Some(dir) = &self.config.feed_dir {
                    let path = batch_path(dir, *kind, id);
                    if let Err(err) = fs::remove_file(&path) {
                        warn!("could not remove {}: {err}", path.display());
                    }
                }
                dropped += 1;
            }
        }
        Ok(dropped)
    }

    pub fn serve_chunk(
        &self,
        kind: FeedKind,
        chunk: Option<u64>,
    ) -> Result<ChunkResponse, ProducerError> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let feeds = self.feeds.read().expect("feeds lock poisoned");
        let feed = feeds.get(&kind).ok_or(ProducerError::UnknownFeed(kind))?;
        Ok(feed.serve(chunk))
    }

    /// Number of `serve_chunk` calls so far.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn summaries(&self) -> Vec<FeedSummary> {
        self.feeds
            .read()
            .expect("feeds lock poisoned")
            .iter()
            .map(|(kind, feed)| FeedSummary {
                feed: *kind,
                retained: feed.batches.keys().copied().collect(),
                next_batch_id: feed.next_batch_id,
            })
            .collect()
    }

    /// Every retained batch of `kind`, oldest first.
    pub fn retained_batches(&self, kind: FeedKind) -> Vec<Arc<ServedBatch>> {
        self.feeds
            .read()
            .expect("feeds lock poisoned")
            .get(&kind)
            .map(|feed| feed.batches.values().cloned().collect())
            .unwrap_or_default()
    }
}

fn feed_from_label(label: &str) -> Option<FeedKind> {
    match label {
        "public" => Some(FeedKind::Public),
        "a2a" => Some(FeedKind::A2A),
        other => other
            .strip_prefix("region-")
            .and_then(|r| r.parse().ok())
            .map(FeedKind::PerRegion),
    }
}

fn batch_path(dir: &Path, kind: FeedKind, id: u64) -> PathBuf {
    dir.join(kind.label()).join(format!("{id:020}.batch"))
}

fn persist_batch(dir: &Path, served: &ServedBatch, next_id: u64) -> io::Result<()> {
    let kind = served.batch.feed_kind;
    let feed_dir = dir.join(kind.label());
    fs::create_dir_all(&feed_dir)?;
    let path = batch_path(dir, kind, served.batch.batch_id);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &served.bytes)?;
    fs::rename(&tmp, &path)?;
    fs::write(feed_dir.join("NEXT"), next_id.to_string())
}

fn load_feeds(dir: &Path, store: &KeyStore) -> Result<Vec<(FeedKind, Feed)>, ProducerError> {
    let mut feeds = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let Some(kind) = entry.file_name().to_str().and_then(feed_from_label) else {
            continue;
        };
        let mut feed = Feed::new();
        if let Ok(next) = fs::read_to_string(entry.path().join("NEXT")) {
            feed.next_batch_id = next.trim().parse().unwrap_or(1);
        }
        for file in fs::read_dir(entry.path())? {
            let path = file?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("batch") {
                continue;
            }
            let bytes = fs::read(&path)?;
            let batch = match Batch::decode(&bytes) {
                Ok(batch) => batch,
                Err(err) => {
                    warn!("skipping unreadable batch {}: {err}", path.display());
                    continue;
                }
            };
            let oldest_stored_at = batch
                .keys
                .iter()
                .map(|key| store.stored_at(key.bytes()).unwrap_or(Timestamp::ZERO))
                .min()
                .unwrap_or(Timestamp::ZERO);
            feed.reloaded
                .extend(batch.keys.iter().map(|key| *key.bytes()));
            feed.next_batch_id = feed.next_batch_id.max(batch.batch_id + 1);
            feed.batches.insert(
                batch.batch_id,
                Arc::new(ServedBatch {
                    bytes,
                    batch,
                    oldest_stored_at,
                }),
            );
        }
        feeds.push((kind, feed));
    }
    Ok(feeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SECS_PER_DAY;
    use crate::keystore::{DiagnosisKeyUpload, StaticCodeVerifier};

    fn r(s: &str) -> RegionId {
        s.parse().unwrap()
    }

    fn key(n: u8) -> DiagnosisKey {
        DiagnosisKey::new([n; 16], u32::from(n))
    }

    fn upload(keys: &[u8], declared: &[&str]) -> DiagnosisKeyUpload {
        DiagnosisKeyUpload {
            keys: keys.iter().map(|n| key(*n)).collect(),
            declared_regions: declared.iter().map(|s| r(s)).collect(),
            testing_region: r("CH"),
            upload_time: Timestamp(0),
            authorization_code: "ok".into(),
        }
    }

    fn setup() -> (Arc<KeyStore>, Producer) {
        let store = Arc::new(KeyStore::new(StaticCodeVerifier::new(["ok"])));
        let producer = Producer::new(
            ProducerConfig::new(r("CH")),
            store.clone(),
            SigningKey::from_bytes(&[3; 32]),
        )
        .unwrap();
        (store, producer)
    }

    fn batch_keys(producer: &Producer, kind: FeedKind) -> Vec<DiagnosisKey> {
        producer
            .retained_batches(kind)
            .iter()
            .flat_map(|b| b.batch.keys.clone())
            .collect()
    }

    #[test]
    fn public_feed_includes_remote_keys_but_a2a_does_not() {
        let (store, producer) = setup();
        store.ingest_local(&upload(&[1, 2, 3], &["CH"]), Timestamp(0)).unwrap();
        store
            .ingest_remote(&[key(4), key(5)], r("IT"), Timestamp(0))
            .unwrap();
        let built = producer.build_chunks(Timestamp(10)).unwrap();
        assert_eq!(built[&FeedKind::Public], 1);
        assert_eq!(built[&FeedKind::A2A], 1);
        assert_eq!(batch_keys(&producer, FeedKind::Public).len(), 5);
        assert_eq!(
            batch_keys(&producer, FeedKind::A2A),
            vec![key(1), key(2), key(3)]
        );
    }

    #[test]
    fn rebuild_without_new_keys_is_a_no_op() {
        let (store, producer) = setup();
        store.ingest_local(&upload(&[1], &["CH"]), Timestamp(0)).unwrap();
        producer.build_chunks(Timestamp(1)).unwrap();
        let before = producer.summaries();
        assert!(producer.build_chunks(Timestamp(2)).unwrap().is_empty());
        assert_eq!(producer.summaries(), before);
    }

    #[test]
    fn per_region_feed_filters_on_declarations() {
        let (store, producer) = setup();
        store
            .ingest_local(&upload(&[1], &["CH", "IT"]), Timestamp(0))
            .unwrap();
        store.ingest_local(&upload(&[2], &["CH"]), Timestamp(0)).unwrap();
        producer.build_chunks(Timestamp(1)).unwrap();
        assert_eq!(
            batch_keys(&producer, FeedKind::PerRegion(r("IT"))),
            vec![key(1)]
        );
        // Own region gets no per-region feed.
        assert!(!producer.has_feed(FeedKind::PerRegion(r("CH"))));
    }

    #[test]
    fn chunking_respects_max_size_and_ids_are_gap_free() {
        let store = Arc::new(KeyStore::new(StaticCodeVerifier::new(["ok"])));
        let mut config = ProducerConfig::new(r("CH"));
        config.max_chunk_size = 2;
        let producer = Producer::new(config, store.clone(), SigningKey::from_bytes(&[3; 32])).unwrap();
        store
            .ingest_local(&upload(&[1, 2, 3, 4, 5], &["CH"]), Timestamp(0))
            .unwrap();
        producer.build_chunks(Timestamp(1)).unwrap();
        store.ingest_local(&upload(&[6], &["CH"]), Timestamp(0)).unwrap();
        producer.build_chunks(Timestamp(2)).unwrap();
        let sizes: Vec<(u64, usize)> = producer
            .retained_batches(FeedKind::A2A)
            .iter()
            .map(|b| (b.batch.batch_id, b.batch.keys.len()))
            .collect();
        assert_eq!(sizes, vec![(1, 2), (2, 2), (3, 1), (4, 1)]);
    }

    #[test]
    fn serve_chunk_semantics() {
        let store = Arc::new(KeyStore::new(StaticCodeVerifier::new(["ok"])));
        let mut config = ProducerConfig::new(r("CH"));
        config.max_chunk_size = 1;
        let producer = Producer::new(config, store.clone(), SigningKey::from_bytes(&[3; 32])).unwrap();
        assert!(matches!(
            producer.serve_chunk(FeedKind::A2A, None).unwrap(),
            ChunkResponse::End
        ));
        store
            .ingest_local(&upload(&[1, 2, 3, 4, 5], &["CH"]), Timestamp(0))
            .unwrap();
        producer.build_chunks(Timestamp(1)).unwrap();
        let id_of = |resp: ChunkResponse| match resp {
            ChunkResponse::Batch(b) => b.batch.batch_id,
            other => panic!("expected batch, got {other:?}"),
        };
        assert_eq!(id_of(producer.serve_chunk(FeedKind::A2A, Some(3)).unwrap()), 3);
        assert_eq!(id_of(producer.serve_chunk(FeedKind::A2A, None).unwrap()), 1);
        assert!(matches!(
            producer.serve_chunk(FeedKind::A2A, Some(6)).unwrap(),
            ChunkResponse::End
        ));
        assert!(matches!(
            producer.serve_chunk(FeedKind::PerRegion(r("FR")), None),
            Err(ProducerError::UnknownFeed(_))
        ));
    }

    #[test]
    fn retention_turns_old_batches_gone() {
        let (store, producer) = setup();
        store.ingest_local(&upload(&[1], &["CH"]), Timestamp(0)).unwrap();
        producer.build_chunks(Timestamp(0)).unwrap();
        let later = Timestamp::from_days(10);
        store.ingest_local(&upload(&[2], &["CH"]), later).unwrap();
        producer.build_chunks(later).unwrap();

        let now = Timestamp(31 * SECS_PER_DAY);
        assert_eq!(producer.purge_expired(now).unwrap(), 2); // public + a2a batch 1
        assert!(matches!(
            producer.serve_chunk(FeedKind::A2A, Some(1)).unwrap(),
            ChunkResponse::Gone
        ));
        match producer.serve_chunk(FeedKind::A2A, None).unwrap() {
            ChunkResponse::Batch(b) => assert_eq!(b.batch.batch_id, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batches_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(KeyStore::new(StaticCodeVerifier::new(["ok"])));
        let mut config = ProducerConfig::new(r("CH"));
        config.feed_dir = Some(dir.path().to_path_buf());
        {
            let producer =
                Producer::new(config.clone(), store.clone(), SigningKey::from_bytes(&[3; 32]))
                    .unwrap();
            store
                .ingest_local(&upload(&[1, 2], &["CH", "IT"]), Timestamp(0))
                .unwrap();
            producer.build_chunks(Timestamp(1)).unwrap();
        }
        store.ingest_local(&upload(&[3], &["CH"]), Timestamp(2)).unwrap();
        let producer = Producer::new(config, store, SigningKey::from_bytes(&[3; 32])).unwrap();
        producer.build_chunks(Timestamp(3)).unwrap();
        let a2a: Vec<(u64, usize)> = producer
            .retained_batches(FeedKind::A2A)
            .iter()
            .map(|b| (b.batch.batch_id, b.batch.keys.len()))
            .collect();
        assert_eq!(a2a, vec![(1, 2), (2, 1)]);
        assert_eq!(
            batch_keys(&producer, FeedKind::PerRegion(r("IT"))),
            vec![key(1), key(2)]
        );
    }
}
