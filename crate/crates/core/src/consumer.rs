//! Pull-based replication from one producer peer.
//!
//! A poller requests chunk `last_batch_id + 1` until the producer answers END,
//! verifying and decoding each batch before storing its keys in the remote
//! partition. State is persisted after every batch so a restart resumes from
//! the last fully applied batch; re-applying a batch after a crash is harmless
//! because the key store deduplicates.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use ed25519_dalek::VerifyingKey;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{Batch, BatchError, FeedKind};
use crate::domain::{RegionId, ReplicationType, Timestamp};
use crate::journal::{Journal, JournalError, JournalRecord};
use crate::keystore::{KeyStore, KeystoreError};
use crate::registry::RegistryEntry;
use crate::transport::{Request, Status, Transport, TransportError};

pub const DEFAULT_POLL_INTERVAL_SECS: u64 = 300;
pub const NATIVE_FORMAT: &str = "en-batch-v1";

#[derive(Debug, Error)]
pub enum ConsumerError {
    #[error("peer {region} unreachable: {source}")]
    PeerUnreachable {
        region: RegionId,
        source: TransportError,
    },
    #[error("batch {batch_id} from {region} failed signature verification")]
    BadSignature { region: RegionId, batch_id: u64 },
    #[error("undecodable batch from {region}: {reason}")]
    FormatError { region: RegionId, reason: String },
    #[error("producer {region} no longer holds batch {batch_id}")]
    GoneBatch { region: RegionId, batch_id: u64 },
    #[error("producer {region} refused the request ({status:?})")]
    Refused { region: RegionId, status: Status },
    #[error("poll of {region} not due before {due}")]
    NotDue { region: RegionId, due: u64 },
    #[error(transparent)]
    Keystore(#[from] KeystoreError),
    #[error("peer state persistence failed: {0}")]
    Persist(String),
}

/// Configuration for one producer peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerConfig {
    pub region_id: RegionId,
    pub remote_region_url: String,
    pub replication_type: ReplicationType,
    pub format: String,
    pub verification_keys: Option<Vec<VerifyingKey>>,
    /// Reference to the client certificate presented to the producer.
    pub tls_consumer_certificate: String,
}

impl PeerConfig {
    /// Builds a peer configuration from the producer's registry entry.
    pub fn from_registry(
        entry: &RegistryEntry,
        replication_type: ReplicationType,
        tls_consumer_certificate: impl Into<String>,
    ) -> Self {
        PeerConfig {
            region_id: entry.record.region,
            remote_region_url: entry.record.base_url.clone(),
            replication_type,
            format: NATIVE_FORMAT.to_owned(),
            verification_keys: Some(vec![entry.record.feed_verification_key]),
            tls_consumer_certificate: tls_consumer_certificate.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PeerState {
    pub last_batch_id: u64,
    /// Epoch seconds before which the peer should not be polled again.
    pub recommended_next_poll_time: Option<u64>,
}

/// Feed a consumer in `own_region` pulls from a peer.
pub fn select_feed(config: &PeerConfig, own_region: RegionId) -> FeedKind {
    match config.replication_type {
        ReplicationType::AllToAll => FeedKind::A2A,
        ReplicationType::Partial => FeedKind::PerRegion(own_region),
    }
}

pub fn select_feed_path(config: &PeerConfig, own_region: RegionId) -> String {
    select_feed(config, own_region).path()
}

/// Decodes batch bytes in a given vendor format.
pub trait FeedFormat: Send + Sync {
    fn decode(&self, bytes: &[u8]) -> Result<Batch, BatchError>;
}

struct NativeFormat;

impl FeedFormat for NativeFormat {
    fn decode(&self, bytes: &[u8]) -> Result<Batch, BatchError> {
        Batch::decode(bytes)
    }
}

/// Dispatch table from the peer's `format` tag to a decoder.
pub struct FormatRegistry {
    formats: BTreeMap<String, Box<dyn FeedFormat>>,
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut formats: BTreeMap<String, Box<dyn FeedFormat>> = BTreeMap::new();
        formats.insert(NATIVE_FORMAT.to_owned(), Box::new(NativeFormat));
        FormatRegistry { formats }
    }
}

impl FormatRegistry {
    pub fn register(&mut self, tag: impl Into<String>, format: Box<dyn FeedFormat>) {
        self.formats.insert(tag.into(), format);
    }

    pub fn get(&self, tag: &str) -> Option<&dyn FeedFormat> {
        self.formats.get(tag).map(AsRef::as_ref)
    }
}

/// Everything a poll needs besides the peer's own config and state.
pub struct PollContext<'a> {
    pub own_region: RegionId,
    pub transport: &'a dyn Transport,
    pub store: &'a KeyStore,
    pub formats: &'a FormatRegistry,
    pub poll_interval_secs: u64,
    /// Called with the new state after each applied batch, before the next request.
    pub persist: &'a mut dyn FnMut(RegionId, &PeerState) -> Result<(), String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppliedBatch {
    pub batch_id: u64,
    pub keys: usize,
    pub new_keys: usize,
    pub bytes: usize,
}

#[derive(Debug)]
pub struct PollOutcome {
    /// Keys newly stored in the remote partition.
    pub ingested: usize,
    pub batches: Vec<AppliedBatch>,
    pub state: PeerState,
    /// Why the poll stopped early, if it did; `state` still reflects progress.
    pub error: Option<ConsumerError>,
}

/// Pulls every batch after `state.last_batch_id` from the peer.
pub fn poll_peer(
    ctx: &mut PollContext<'_>,
    config: &PeerConfig,
    state: &PeerState,
    now: Timestamp,
) -> PollOutcome {
    let mut outcome = PollOutcome {
        ingested: 0,
        batches: Vec::new(),
        state: *state,
        error: None,
    };
    let region = config.region_id;
    if let Some(due) = state.recommended_next_poll_time {
        if now.secs() < due {
            outcome.error = Some(ConsumerError::NotDue { region, due });
            return outcome;
        }
    }
    let Some(format) = ctx.formats.get(&config.format) else {
        outcome.error = Some(ConsumerError::FormatError {
            region,
            reason: format!("unsupported feed format {:?}", config.format),
        });
        return outcome;
    };
    let feed = select_feed(config, ctx.own_region);
    loop {
        let wanted = outcome.state.last_batch_id + 1;
        let response = match ctx.transport.send(
            &config.remote_region_url,
            Some(&config.tls_consumer_certificate),
            Request::get(feed.chunk_path(wanted)),
        ) {
            Ok(response) => response,
            Err(source) => {
                outcome.error = Some(ConsumerError::PeerUnreachable { region, source });
                return outcome;
            }
        };
        match response.status {
            Status::Ok => {}
            Status::NoContent => {
                outcome.state.recommended_next_poll_time =
                    Some(now.secs() + ctx.poll_interval_secs);
                return outcome;
            }
            Status::Gone => {
                outcome.error = Some(ConsumerError::GoneBatch {
                    region,
                    batch_id: wanted,
                });
                return outcome;
            }
            status => {
                outcome.error = Some(ConsumerError::Refused { region, status });
                return outcome;
            }
        }
        let batch = match format.decode(&response.body) {
            Ok(batch) => batch,
            Err(err) => {
                outcome.error = Some(ConsumerError::FormatError {
                    region,
                    reason: err.to_string(),
                });
                return outcome;
            }
        };
        if batch.batch_id != wanted || batch.feed_kind != feed {
            outcome.error = Some(ConsumerError::FormatError {
                region,
                reason: format!(
                    "asked for {feed} batch {wanted}, got {} batch {}",
                    batch.feed_kind, batch.batch_id
                ),
            });
            return outcome;
        }
        if let Some(keys) = &config.verification_keys {
            if batch.verify_any(keys).is_err() {
                warn!("{}: discarding batch {wanted} from {region}: bad signature", ctx.own_region);
                outcome.error = Some(ConsumerError::BadSignature {
                    region,
                    batch_id: wanted,
                });
                return outcome;
            }
        }
        let new_keys = match ctx.store.ingest_remote(&batch.keys, region, now) {
            Ok(n) => n,
            Err(err) => {
                outcome.error = Some(err.into());
                return outcome;
            }
        };
        let next_state = PeerState {
            last_batch_id: wanted,
            recommended_next_poll_time: outcome.state.recommended_next_poll_time,
        };
        if let Err(reason) = (ctx.persist)(region, &next_state) {
            outcome.error = Some(ConsumerError::Persist(reason));
            return outcome;
        }
        outcome.state = next_state;
        outcome.ingested += new_keys;
        outcome.batches.push(AppliedBatch {
            batch_id: wanted,
            keys: batch.keys.len(),
            new_keys,
            bytes: response.body.len(),
        });
    }
}

/// Repositions a consumer whose next batch was dropped by the producer.
///
/// The state moves to just before the producer's oldest retained batch, or to
/// zero when the producer has nothing retained. Keys in the skipped batches
/// expired at the producer and are not recoverable.
pub fn resync_after_gone(
    ctx: &PollContext<'_>,
    config: &PeerConfig,
    state: &PeerState,
) -> Result<PeerState, ConsumerError> {
    let region = config.region_id;
    let feed = select_feed(config, ctx.own_region);
    let response = ctx
        .transport
        .send(
            &config.remote_region_url,
            Some(&config.tls_consumer_certificate),
            Request::get(feed.path()),
        )
        .map_err(|source| ConsumerError::PeerUnreachable { region, source })?;
    let oldest = match response.status {
        Status::Ok => {
            let format = ctx
                .formats
                .get(&config.format)
                .ok_or_else(|| ConsumerError::FormatError {
                    region,
                    reason: format!("unsupported feed format {:?}", config.format),
                })?;
            format
                .decode(&response.body)
                .map_err(|err| ConsumerError::FormatError {
                    region,
                    reason: err.to_string(),
                })?
                .batch_id
        }
        Status::NoContent => {
            return Ok(PeerState {
                last_batch_id: 0,
                ..*state
            })
        }
        status => return Err(ConsumerError::Refused { region, status }),
    };
    let resumed = oldest.saturating_sub(1);
    if resumed > state.last_batch_id {
        info!(
            "{}: resync with {region} skips batches {}..={} (expired at producer)",
            ctx.own_region,
            state.last_batch_id + 1,
            resumed
        );
        Ok(PeerState {
            last_batch_id: resumed,
            ..*state
        })
    } else {
        Ok(*state)
    }
}

/// Durable per-peer state: `PEER|<region>|<last_batch_id>|<next_poll>` lines,
/// the last line per region winning.
#[derive(Debug)]
pub struct PeerStateStore {
    journal: Option<Mutex<Journal>>,
    states: Mutex<BTreeMap<RegionId, PeerState>>,
}

impl PeerStateStore {
    pub fn in_memory() -> Self {
        PeerStateStore {
            journal: None,
            states: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, JournalError> {
        let (journal, records) = Journal::open(path)?;
        let mut states = BTreeMap::new();
        for record in records {
            if let JournalRecord::Peer {
                region,
                last_batch_id,
                next_poll,
            } = record
            {
                states.insert(
                    region,
                    PeerState {
                        last_batch_id,
                        recommended_next_poll_time: next_poll,
                    },
                );
            }
        }
        Ok(PeerStateStore {
            journal: Some(Mutex::new(journal)),
            states: Mutex::new(states),
        })
    }

    pub fn get(&self, region: RegionId) -> PeerState {
        self.states
            .lock()
            .expect("peer states lock poisoned")
            .get(&region)
            .copied()
            .unwrap_or_default()
    }

    pub fn all(&self) -> BTreeMap<RegionId, PeerState> {
        self.states.lock().expect("peer states lock poisoned").clone()
    }

    pub fn put(&self, region: RegionId, state: &PeerState) -> Result<(), JournalError> {
        if let Some(journal) = &self.journal {
            journal
                .lock()
                .expect("peer journal lock poisoned")
                .append(&[JournalRecord::Peer {
                    region,
                    last_batch_id: state.last_batch_id,
                    next_poll: state.recommended_next_poll_time,
                }])?;
        }
        self.states
            .lock()
            .expect("peer states lock poisoned")
            .insert(region, *state);
        Ok(())
    }
}
