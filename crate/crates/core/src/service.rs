//! A runnable backend node: upload endpoint, feed endpoints behind the ACL,
//! and the build/purge/poll cadences driven by an injectable clock.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use ed25519_dalek::{SigningKey, VerifyingKey};
use log::{debug, info, warn};
use serde::Deserialize;
use thiserror::Error;

use crate::batch::FeedKind;
use crate::consumer::{
    poll_peer, resync_after_gone, ConsumerError, FormatRegistry, PeerConfig, PeerState,
    PeerStateStore, PollContext, PollOutcome, DEFAULT_POLL_INTERVAL_SECS, NATIVE_FORMAT,
};
use crate::domain::{DiagnosisKey, RegionId, ReplicationType, Timestamp, SECS_PER_DAY, SECS_PER_INTERVAL};
use crate::journal::JournalError;
use crate::keystore::{DiagnosisKeyUpload, KeyStore, KeystoreError, RetentionPolicy, StaticCodeVerifier};
use crate::producer::{ChunkResponse, Producer, ProducerConfig, ProducerError, DEFAULT_MAX_CHUNK_SIZE};
use crate::registry::{authorize_feed, verify_chain, AccessControlList, AccessDecision, AclEntry, CertChain, ChainVerdict, Registry};
use crate::transport::{Handler, Method, Request, Response, Status, Transport};

const UPLOAD_MAGIC: &[u8; 4] = b"ENUP";
const UPLOAD_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid node configuration: {0}")]
    Config(String),
    #[error("region {0} is not in the registry")]
    NotRegistered(RegionId),
    #[error(transparent)]
    Keystore(#[from] KeystoreError),
    #[error(transparent)]
    Producer(#[from] ProducerError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed upload body: {0}")]
pub struct UploadCodecError(pub String);

/// Canonical upload body: magic, version, keys (16 bytes + be32 day each),
/// declared regions, testing region, be64 upload time, length-prefixed code.
pub fn encode_upload(upload: &DiagnosisKeyUpload) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + upload.keys.len() * 20);
    out.extend_from_slice(UPLOAD_MAGIC);
    out.push(UPLOAD_VERSION);
    out.push(upload.keys.len() as u8);
    for key in &upload.keys {
        out.extend_from_slice(key.bytes());
        out.extend_from_slice(&key.valid_day().to_be_bytes());
    }
    out.push(upload.declared_regions.len() as u8);
    for region in &upload.declared_regions {
        out.extend_from_slice(&region.as_bytes());
    }
    out.extend_from_slice(&upload.testing_region.as_bytes());
    out.extend_from_slice(&upload.upload_time.secs().to_be_bytes());
    let code = upload.authorization_code.as_bytes();
    out.extend_from_slice(&(code.len() as u16).to_be_bytes());
    out.extend_from_slice(code);
    out
}

pub fn decode_upload(bytes: &[u8]) -> Result<DiagnosisKeyUpload, UploadCodecError> {
    let mut rest = bytes;
    let mut take = |n: usize| -> Result<&[u8], UploadCodecError> {
        if rest.len() < n {
            return Err(UploadCodecError("truncated".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(4)? != UPLOAD_MAGIC {
        return Err(UploadCodecError("bad magic".into()));
    }
    let version = take(1)?[0];
    if version != UPLOAD_VERSION {
        return Err(UploadCodecError(format!("unsupported version {version}")));
    }
    let key_count = take(1)?[0] as usize;
    let mut keys = Vec::with_capacity(key_count);
    for _ in 0..key_count {
        let bytes: [u8; 16] = take(16)?.try_into().expect("16 bytes");
        let day = u32::from_be_bytes(take(4)?.try_into().expect("4 bytes"));
        keys.push(DiagnosisKey::new(bytes, day));
    }
    let region = |raw: &[u8]| {
        RegionId::from_bytes([raw[0], raw[1]]).map_err(|e| UploadCodecError(e.to_string()))
    };
    let region_count = take(1)?[0] as usize;
    let mut declared_regions = BTreeSet::new();
    for _ in 0..region_count {
        declared_regions.insert(region(take(2)?)?);
    }
    let testing_region = region(take(2)?)?;
    let upload_time = Timestamp(u64::from_be_bytes(take(8)?.try_into().expect("8 bytes")));
    let code_len = u16::from_be_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    let authorization_code = String::from_utf8(take(code_len)?.to_vec())
        .map_err(|_| UploadCodecError("code is not utf-8".into()))?;
    if !rest.is_empty() {
        return Err(UploadCodecError(format!("{} trailing bytes", rest.len())));
    }
    Ok(DiagnosisKeyUpload {
        keys,
        declared_regions,
        testing_region,
        upload_time,
        authorization_code,
    })
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Timestamp(secs)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(AtomicU64::new(start.secs()))
    }

    pub fn set(&self, now: Timestamp) {
        self.0.store(now.secs(), Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) -> Timestamp {
        Timestamp(self.0.fetch_add(secs, Ordering::SeqCst) + secs)
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }
}

/// A peer as written in the node config. `url` and `verification_key` may be
/// omitted and are then filled in from the registry.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PeerSpec {
    pub region: RegionId,
    pub replication: ReplicationType,
    pub credential: String,
    pub url: Option<String>,
    pub verification_key: Option<String>,
    pub format: Option<String>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AclSpec {
    /// `public`, `a2a` or `region-XX`.
    pub feed: String,
    /// `subject:<name>` or `issuer:<name>`.
    pub allow: String,
}

/// TLS material of a node served over the network.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TlsSpec {
    /// Hex-encoded certificate chain ending in this region's certificate.
    pub chain: String,
    /// Hex-encoded 32-byte seed of the region certificate's key.
    pub key: String,
    /// Hex-encoded root key. Defaults to the registry's trusted root.
    pub trusted_root: Option<String>,
}

impl TlsSpec {
    pub fn chain(&self) -> Result<CertChain, ServiceError> {
        hex::decode(self.chain.trim())
            .ok()
            .and_then(|bytes| CertChain::decode(&bytes).ok())
            .ok_or_else(|| ServiceError::Config("tls.chain is not a hex-encoded certificate chain".into()))
    }

    pub fn key(&self) -> Result<SigningKey, ServiceError> {
        parse_seed(&self.key, "tls.key")
    }

    /// The configured root, else the registry's.
    pub fn trusted_root(&self, registry: Option<&Registry>) -> Result<VerifyingKey, ServiceError> {
        match (&self.trusted_root, registry) {
            (Some(text), _) => parse_verifying_key(text),
            (None, Some(registry)) => Ok(*registry.trusted_root()),
            (None, None) => Err(ServiceError::Config(
                "tls.trusted_root is required when no registry is configured".into(),
            )),
        }
    }

    fn validate(&self) -> Result<(), ServiceError> {
        let chain = self.chain()?;
        if chain.region.public_key != self.key()?.verifying_key() {
            return Err(ServiceError::Config("tls.key does not match the chain's region certificate".into()));
        }
        if let Some(text) = &self.trusted_root {
            if let ChainVerdict::Invalid { link, reason } = verify_chain(&chain, &parse_verifying_key(text)?) {
                return Err(ServiceError::Config(format!("tls.chain invalid at {link:?} link: {reason}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct BackendNodeConfig {
    pub region: RegionId,
    pub cluster: Option<String>,
    pub listen: Option<String>,
    pub data_dir: Option<PathBuf>,
    /// Hex-encoded 32-byte seed of the feed signing key.
    pub signing_key: String,
    #[serde(default)]
    pub auth_codes: Vec<String>,
    #[serde(default = "default_retention_days")]
    pub retention_days: u32,
    #[serde(default = "default_chunk_size")]
    pub max_chunk_size: usize,
    #[serde(default = "default_poll_interval")]
    pub poll_interval_secs: u64,
    #[serde(default = "default_build_interval")]
    pub build_interval_secs: u64,
    #[serde(default = "default_purge_interval")]
    pub purge_interval_secs: u64,
    #[serde(default)]
    pub peers: Vec<PeerSpec>,
    #[serde(default)]
    pub acl: Vec<AclSpec>,
    pub tls: Option<TlsSpec>,
}

fn default_retention_days() -> u32 {
    RetentionPolicy::default().t_days()
}

fn default_chunk_size() -> usize {
    DEFAULT_MAX_CHUNK_SIZE
}

fn default_poll_interval() -> u64 {
    DEFAULT_POLL_INTERVAL_SECS
}

fn default_build_interval() -> u64 {
    SECS_PER_INTERVAL
}

fn default_purge_interval() -> u64 {
    SECS_PER_DAY
}

impl BackendNodeConfig {
    /// A minimal in-memory configuration with default cadences.
    pub fn new(region: RegionId, signing_key: &SigningKey) -> Self {
        BackendNodeConfig {
            region,
            cluster: None,
            listen: None,
            data_dir: None,
            signing_key: hex::encode(signing_key.to_bytes()),
            auth_codes: Vec::new(),
            retention_days: default_retention_days(),
            max_chunk_size: default_chunk_size(),
            poll_interval_secs: default_poll_interval(),
            build_interval_secs: default_build_interval(),
            purge_interval_secs: default_purge_interval(),
            peers: Vec::new(),
            acl: Vec::new(),
            tls: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        let config: BackendNodeConfig =
            toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.signing_key()?;
        RetentionPolicy::new(self.retention_days)?;
        if self.max_chunk_size == 0 {
            return Err(ServiceError::Config("max_chunk_size must be positive".into()));
        }
        for (name, value) in [
            ("poll_interval_secs", self.poll_interval_secs),
            ("build_interval_secs", self.build_interval_secs),
            ("purge_interval_secs", self.purge_interval_secs),
        ] {
            if value == 0 {
                return Err(ServiceError::Config(format!("{name} must be positive")));
            }
        }
        let mut seen = BTreeSet::new();
        for peer in &self.peers {
            if peer.region == self.region {
                return Err(ServiceError::Config(format!(
                    "peer list contains own region {}",
                    peer.region
                )));
            }
            if !seen.insert(peer.region) {
                return Err(ServiceError::Config(format!("duplicate peer {}", peer.region)));
            }
        }
        self.access_control_list()?;
        if let Some(tls) = &self.tls {
            tls.validate()?;
        }
        Ok(())
    }

    pub fn signing_key(&self) -> Result<SigningKey, ServiceError> {
        parse_seed(&self.signing_key, "signing_key")
    }

    pub fn access_control_list(&self) -> Result<AccessControlList, ServiceError> {
        let mut acl = AccessControlList::new();
        for spec in &self.acl {
            let feed = parse_feed_label(&spec.feed)
                .ok_or_else(|| ServiceError::Config(format!("unknown feed {:?}", spec.feed)))?;
            let entry = match spec.allow.split_once(':') {
                Some(("subject", name)) => AclEntry::Subject(name.to_owned()),
                Some(("issuer", name)) => AclEntry::Issuer(name.to_owned()),
                _ => {
                    return Err(ServiceError::Config(format!(
                        "acl entry {:?} must be subject:<name> or issuer:<name>",
                        spec.allow
                    )))
                }
            };
            acl.allow(feed, entry);
        }
        Ok(acl)
    }

    /// Completes the peer list, looking up missing addresses and keys in the registry.
    pub fn resolve_peers(&self, registry: Option<&Registry>) -> Result<Vec<PeerConfig>, ServiceError> {
        self.peers
            .iter()
            .map(|spec| {
                let entry = match (&spec.url, registry) {
                    (Some(_), _) if spec.verification_key.is_some() => None,
                    (_, Some(registry)) => Some(
                        registry
                            .lookup(spec.region)
                            .map_err(|_| ServiceError::NotRegistered(spec.region))?,
                    ),
                    (None, None) => {
                        return Err(ServiceError::Config(format!(
                            "peer {} has no url and no registry is configured",
                            spec.region
                        )))
                    }
                    (Some(_), None) => None,
                };
                let remote_region_url = spec
                    .url
                    .clone()
                    .or_else(|| entry.as_ref().map(|e| e.record.base_url.clone()))
                    .expect("url checked above");
                let verification_keys = match &spec.verification_key {
                    Some(text) => Some(vec![parse_verifying_key(text)?]),
                    None => entry.as_ref().map(|e| vec![e.record.feed_verification_key]),
                };
                Ok(PeerConfig {
                    region_id: spec.region,
                    remote_region_url,
                    replication_type: spec.replication,
                    format: spec.format.clone().unwrap_or_else(|| NATIVE_FORMAT.to_owned()),
                    verification_keys,
                    tls_consumer_certificate: spec.credential.clone(),
                })
            })
            .collect()
    }
}

fn parse_seed(text: &str, field: &str) -> Result<SigningKey, ServiceError> {
    let seed: [u8; 32] = hex::decode(text.trim())
        .ok()
        .and_then(|bytes| bytes.try_into().ok())
        .ok_or_else(|| ServiceError::Config(format!("{field} must be 32 hex-encoded bytes")))?;
    Ok(SigningKey::from_bytes(&seed))
}

fn parse_verifying_key(text: &str) -> Result<VerifyingKey, ServiceError> {
    hex::decode(text.trim())
        .ok()
        .and_then(|bytes| <[u8; 32]>::try_from(bytes).ok())
        .and_then(|bytes| VerifyingKey::from_bytes(&bytes).ok())
        .ok_or_else(|| ServiceError::Config(format!("bad verification key {text:?}")))
}

/// Inverse of [`FeedKind::label`].
pub fn parse_feed_label(label: &str) -> Option<FeedKind> {
    match label {
        "public" => Some(FeedKind::Public),
        "a2a" => Some(FeedKind::A2A),
        _ => label
            .strip_prefix("region-")
            .and_then(|code| code.parse().ok())
            .map(FeedKind::PerRegion),
    }
}

/// What one call to [`BackendNode::tick`] did.
#[derive(Debug, Default)]
pub struct TickReport {
    pub built: BTreeMap<FeedKind, usize>,
    pub purged_keys: usize,
    pub dropped_batches: usize,
    pub polls: Vec<(RegionId, PollOutcome)>,
    pub resyncs: Vec<(RegionId, u64, u64)>,
}

#[derive(Debug, Default)]
struct Timers {
    next_build: u64,
    next_purge: u64,
}

/// Keystore, producer, consumer state and ACL behind one request handler.
pub struct BackendNode {
    region: RegionId,
    store: Arc<KeyStore>,
    producer: Arc<Producer>,
    acl: AccessControlList,
    peers: Vec<PeerConfig>,
    peer_states: PeerStateStore,
    formats: FormatRegistry,
    retention: RetentionPolicy,
    poll_interval_secs: u64,
    build_interval_secs: u64,
    purge_interval_secs: u64,
    listen: Option<String>,
    timers: Mutex<Timers>,
    denied: AtomicU64,
}

impl std::fmt::Debug for BackendNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendNode")
            .field("region", &self.region)
            .field("peers", &self.peers.len())
            .finish_non_exhaustive()
    }
}

impl BackendNode {
    /// Builds a node. When a registry is given the node's own region must be
    /// registered with the node's feed key, and peers are resolved through it.
    pub fn new(config: &BackendNodeConfig, registry: Option<&Registry>) -> Result<Self, ServiceError> {
        config.validate()?;
        let signing_key = config.signing_key()?;
        if let Some(registry) = registry {
            let own = registry
                .lookup(config.region)
                .map_err(|_| ServiceError::NotRegistered(config.region))?;
            if own.record.feed_verification_key != signing_key.verifying_key() {
                return Err(ServiceError::Config(format!(
                    "registry lists a different feed key for {}",
                    config.region
                )));
            }
        }
        let retention = RetentionPolicy::new(config.retention_days)?;
        let verifier = StaticCodeVerifier::new(config.auth_codes.iter().cloned());
        let (store, peer_states, feed_dir) = match &config.data_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                (
                    KeyStore::open(dir.join("keys.journal"), verifier)?,
                    PeerStateStore::open(dir.join("peers.journal"))?,
                    Some(dir.join("feeds")),
                )
            }
            None => (KeyStore::new(verifier), PeerStateStore::in_memory(), None),
        };
        let store = Arc::new(store);
        let producer = Producer::new(
            ProducerConfig {
                region: config.region,
                max_chunk_size: config.max_chunk_size,
                retention,
                feed_dir,
            },
            store.clone(),
            signing_key,
        )?;
        let acl = config.access_control_list()?;
        let peers = config.resolve_peers(registry)?;
        // Peers may pull their per-region feed before any upload names them.
        for region in acl
            .regions()
            .chain(registry.map(Registry::regions).unwrap_or_default())
        {
            producer.ensure_region_feed(region);
        }
        Ok(BackendNode {
            region: config.region,
            store,
            producer: Arc::new(producer),
            acl,
            peers,
            peer_states,
            formats: FormatRegistry::default(),
            retention,
            poll_interval_secs: config.poll_interval_secs,
            build_interval_secs: config.build_interval_secs,
            purge_interval_secs: config.purge_interval_secs,
            listen: config.listen.clone(),
            timers: Mutex::new(Timers::default()),
            denied: AtomicU64::new(0),
        })
    }

    pub fn region(&self) -> RegionId {
        self.region
    }

    pub fn store(&self) -> &Arc<KeyStore> {
        &self.store
    }

    pub fn producer(&self) -> &Arc<Producer> {
        &self.producer
    }

    pub fn peers(&self) -> &[PeerConfig] {
        &self.peers
    }

    pub fn peer_state(&self, region: RegionId) -> PeerState {
        self.peer_states.get(region)
    }

    pub fn listen_addr(&self) -> Option<&str> {
        self.listen.as_deref()
    }

    /// Requests refused by the ACL so far.
    pub fn denied_count(&self) -> u64 {
        self.denied.load(Ordering::Relaxed)
    }

    pub fn handle_upload(&self, body: &[u8], now: Timestamp) -> Response {
        let upload = match decode_upload(body) {
            Ok(upload) => upload,
            Err(err) => return Response::new(Status::BadRequest, err.to_string()),
        };
        match self.store.ingest_local(&upload, now) {
            Ok(stored) => Response::new(Status::Ok, stored.to_string()),
            Err(KeystoreError::UnauthorizedUpload) => Response::empty(Status::Unauthorized),
            Err(KeystoreError::MalformedUpload(reason)) => Response::new(Status::BadRequest, reason),
            Err(err) => {
                warn!("{}: upload failed: {err}", self.region);
                Response::empty(Status::Internal)
            }
        }
    }

    pub fn handle_feed(&self, request: &Request) -> Response {
        let Some((feed, chunk)) = FeedKind::parse_path(&request.path) else {
            return Response::empty(Status::NotFound);
        };
        if authorize_feed(&self.acl, feed, request.identity.as_ref()) == AccessDecision::Deny {
            self.denied.fetch_add(1, Ordering::Relaxed);
            debug!(
                "{}: denied {} to {}",
                self.region,
                request.path,
                request.identity.as_ref().map_or("anonymous".into(), ToString::to_string)
            );
            return if request.identity.is_none() {
                Response::empty(Status::Unauthorized)
            } else {
                Response::empty(Status::Forbidden)
            };
        }
        match self.producer.serve_chunk(feed, chunk) {
            Ok(ChunkResponse::Batch(batch)) => Response::new(Status::Ok, batch.bytes.clone()),
            Ok(ChunkResponse::End) => Response::empty(Status::NoContent),
            Ok(ChunkResponse::Gone) => Response::empty(Status::Gone),
            Err(ProducerError::UnknownFeed(_)) => Response::empty(Status::NotFound),
            Err(err) => {
                warn!("{}: feed read failed: {err}", self.region);
                Response::empty(Status::Internal)
            }
        }
    }

    /// Runs whatever build, purge and poll work is due at `now`.
    pub fn tick(&self, now: Timestamp, transport: &dyn Transport) -> TickReport {
        let mut report = TickReport::default();
        let (build_due, purge_due) = {
            let mut timers = self.timers.lock().expect("timers lock poisoned");
            let build_due = now.secs() >= timers.next_build;
            if build_due {
                timers.next_build = now.secs() + self.build_interval_secs;
            }
            let purge_due = now.secs() >= timers.next_purge;
            if purge_due {
                timers.next_purge = now.secs() + self.purge_interval_secs;
            }
            (build_due, purge_due)
        };
        if purge_due {
            match self.purge(now) {
                Ok((keys, batches)) => {
                    report.purged_keys = keys;
                    report.dropped_batches = batches;
                }
                Err(err) => warn!("{}: purge failed: {err}", self.region),
            }
        }
        for peer in &self.peers {
            let state = self.peer_states.get(peer.region_id);
            if state.recommended_next_poll_time.is_some_and(|due| now.secs() < due) {
                continue;
            }
            let outcome = self.poll(peer, &state, now, transport);
            if let Some(ConsumerError::GoneBatch { .. }) = outcome.error {
                let before = outcome.state.last_batch_id;
                match self.resync(peer, &outcome.state, transport) {
                    Ok(after) => report.resyncs.push((peer.region_id, before, after.last_batch_id)),
                    Err(err) => warn!("{}: resync with {} failed: {err}", self.region, peer.region_id),
                }
            }
            report.polls.push((peer.region_id, outcome));
        }
        // Building after polling lets remote keys reach the public feed in the same tick.
        if build_due {
            match self.producer.build_chunks(now) {
                Ok(built) => report.built = built,
                Err(err) => warn!("{}: build failed: {err}", self.region),
            }
        }
        report
    }

    /// Drops expired keys and batches; returns (keys, batches) removed.
    pub fn purge(&self, now: Timestamp) -> Result<(usize, usize), ServiceError> {
        let keys = self.store.purge_expired(self.retention, now)?;
        let batches = self.producer.purge_expired(now)?;
        if keys > 0 || batches > 0 {
            info!("{}: purged {keys} keys and {batches} batches", self.region);
        }
        Ok((keys, batches))
    }

    pub fn poll(
        &self,
        peer: &PeerConfig,
        state: &PeerState,
        now: Timestamp,
        transport: &dyn Transport,
    ) -> PollOutcome {
        let peer_states = &self.peer_states;
        let mut persist =
            |region: RegionId, state: &PeerState| peer_states.put(region, state).map_err(|e| e.to_string());
        let mut ctx = PollContext {
            own_region: self.region,
            transport,
            store: &self.store,
            formats: &self.formats,
            poll_interval_secs: self.poll_interval_secs,
            persist: &mut persist,
        };
        let outcome = poll_peer(&mut ctx, peer, state, now);
        if outcome.state != self.peer_states.get(peer.region_id) {
            if let Err(err) = self.peer_states.put(peer.region_id, &outcome.state) {
                warn!("{}: could not persist peer state: {err}", self.region);
            }
        }
        if let Some(err) = &outcome.error {
            debug!("{}: poll of {} stopped: {err}", self.region, peer.region_id);
        }
        outcome
    }

    fn resync(
        &self,
        peer: &PeerConfig,
        state: &PeerState,
        transport: &dyn Transport,
    ) -> Result<PeerState, ConsumerError> {
        let mut persist = |_: RegionId, _: &PeerState| Ok(());
        let ctx = PollContext {
            own_region: self.region,
            transport,
            store: &self.store,
            formats: &self.formats,
            poll_interval_secs: self.poll_interval_secs,
            persist: &mut persist,
        };
        let resynced = resync_after_gone(&ctx, peer, state)?;
        self.peer_states
            .put(peer.region_id, &resynced)
            .map_err(|e| ConsumerError::Persist(e.to_string()))?;
        Ok(resynced)
    }
}

/// Routes requests to a node, stamping uploads with the node's clock.
pub struct NodeHandler {
    node: Arc<BackendNode>,
    clock: Arc<dyn Clock>,
}

impl NodeHandler {
    pub fn new(node: Arc<BackendNode>, clock: Arc<dyn Clock>) -> Self {
        NodeHandler { node, clock }
    }
}

impl Handler for NodeHandler {
    fn handle(&self, request: Request) -> Response {
        match (request.method, request.path.as_str()) {
            (Method::Post, "/v1/keys") => self.node.handle_upload(&request.body, self.clock.now()),
            (Method::Post, _) => Response::empty(Status::MethodNotAllowed),
            (Method::Get, _) => self.node.handle_feed(&request),
        }
    }
}

/// Background cadence thread of a running node.
pub struct NodeHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    node: Arc<BackendNode>,
}

impl NodeHandle {
    pub fn node(&self) -> &Arc<BackendNode> {
        &self.node
    }

    /// Stops the cadence thread after its current tick completes.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(thread) = self.thread.take() {
            if thread.join().is_err() {
                warn!("{}: cadence thread panicked", self.node.region);
            }
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Starts the node's build/purge/poll cadence, checking every `period`.
pub fn run_node(
    node: Arc<BackendNode>,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    period: Duration,
) -> NodeHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let node = node.clone();
        let stop = stop.clone();
        thread::spawn(move || {
            info!("{}: node started with {} peers", node.region, node.peers.len());
            while !stop.load(Ordering::SeqCst) {
                node.tick(clock.now(), transport.as_ref());
                thread::sleep(period);
            }
            info!("{}: node stopped", node.region);
        })
    };
    NodeHandle {
        stop,
        thread: Some(thread),
        node,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{ClientIdentity, InProcessNetwork};

    fn r(s: &str) -> RegionId {
        s.parse().unwrap()
    }

    fn upload(seed: u8, regions: &[&str], testing: &str, code: &str) -> DiagnosisKeyUpload {
        DiagnosisKeyUpload {
            keys: (0..14).map(|d| DiagnosisKey::new([seed.wrapping_add(d as u8); 16], d)).collect(),
            declared_regions: regions.iter().map(|s| r(s)).collect(),
            testing_region: r(testing),
            upload_time: Timestamp(7),
            authorization_code: code.into(),
        }
    }

    fn node(region: &str) -> BackendNode {
        let mut config = BackendNodeConfig::new(r(region), &SigningKey::from_bytes(&[3; 32]));
        config.auth_codes = vec!["good".into()];
        BackendNode::new(&config, None).unwrap()
    }

    #[test]
    fn upload_codec_round_trips() {
        let up = upload(9, &["CH", "IT"], "CH", "c0de");
        let bytes = encode_upload(&up);
        assert_eq!(decode_upload(&bytes).unwrap(), up);
        assert!(decode_upload(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_upload(&extra).is_err());
        assert!(decode_upload(b"XXXX").is_err());
    }

    #[test]
    fn upload_receipts() {
        let node = node("CH");
        let body = encode_upload(&upload(1, &["CH"], "CH", "good"));
        let first = node.handle_upload(&body, Timestamp(0));
        assert_eq!((first.status, first.body.as_slice()), (Status::Ok, &b"14"[..]));
        let again = node.handle_upload(&body, Timestamp(0));
        assert_eq!(again.body, b"0");
        let bad = node.handle_upload(&encode_upload(&upload(50, &["CH"], "CH", "nope")), Timestamp(0));
        assert_eq!(bad.status, Status::Unauthorized);
        assert_eq!(node.handle_upload(b"garbage", Timestamp(0)).status, Status::BadRequest);
    }

    #[test]
    fn feed_access_control() {
        let node = node("CH");
        node.handle_upload(&encode_upload(&upload(1, &["CH", "IT"], "CH", "good")), Timestamp(0));
        node.producer().build_chunks(Timestamp(1)).unwrap();
        let it = Some(ClientIdentity::new("IT", ["EU".to_owned()]));

        let public = node.handle_feed(&Request::get("/v1/keys/1"));
        assert_eq!(public.status, Status::Ok);
        let per_region = node.handle_feed(&Request::get("/v1/IT/keys/1").with_identity(it.clone()));
        assert_eq!(per_region.status, Status::Ok);

        let reads = node.producer().read_count();
        let other = node.handle_feed(&Request::get("/v1/FR/keys/1").with_identity(it.clone()));
        assert_eq!(other.status, Status::Forbidden);
        let anon = node.handle_feed(&Request::get("/v1/a2a/keys/1"));
        assert_eq!(anon.status, Status::Unauthorized);
        let a2a = node.handle_feed(&Request::get("/v1/a2a/keys/1").with_identity(it));
        assert_eq!(a2a.status, Status::Forbidden);
        assert_eq!(node.producer().read_count(), reads, "denied requests must not read batches");
        assert_eq!(node.denied_count(), 3);

        assert_eq!(node.handle_feed(&Request::get("/v2/keys")).status, Status::NotFound);
        assert_eq!(node.handle_feed(&Request::get("/v1/keys/2")).status, Status::NoContent);
    }

    #[test]
    fn config_from_toml() {
        let text = format!(
            r#"
region = "CH"
cluster = "EU"
listen = "127.0.0.1:0"
signing_key = "{}"
auth_codes = ["a"]
poll_interval_secs = 60

[[peers]]
region = "IT"
replication = "partial"
credential = "ch-client"
url = "https://it.example:8443"
verification_key = "{}"

[[acl]]
feed = "a2a"
allow = "issuer:EU"
"#,
            hex::encode([1u8; 32]),
            hex::encode(SigningKey::from_bytes(&[2; 32]).verifying_key().to_bytes())
        );
        let config = BackendNodeConfig::from_toml_str(&text).unwrap();
        assert_eq!(config.retention_days, 30);
        assert_eq!(config.build_interval_secs, 900);
        let peers = config.resolve_peers(None).unwrap();
        assert_eq!(peers[0].replication_type, ReplicationType::Partial);
        assert_eq!(peers[0].remote_region_url, "https://it.example:8443");
        let acl = config.access_control_list().unwrap();
        let eu_member = ClientIdentity::new("FR", ["EU".to_owned()]);
        assert_eq!(acl.authorize(FeedKind::A2A, Some(&eu_member)), AccessDecision::Allow);

        for bad in [
            text.replace("poll_interval_secs = 60", "poll_interval_secs = 0"),
            text.replace("region = \"IT\"", "region = \"CH\""),
            text.replace("issuer:EU", "everyone"),
            text.replace("cluster = \"EU\"", "colour = \"blue\""),
            text.replace("region = \"CH\"", "region = \"XX!\""),
        ] {
            assert!(BackendNodeConfig::from_toml_str(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn tls_table_is_checked() {
        use crate::registry::Certificate;
        let root = SigningKey::from_bytes(&[7; 32]);
        let region = SigningKey::from_bytes(&[8; 32]);
        let chain = CertChain {
            root: Certificate::self_signed("ROOT", &root),
            cluster: None,
            region: Certificate::issue("CH", region.verifying_key(), "ROOT", &root),
        };
        let text = |key: &SigningKey, trusted: &SigningKey| {
            format!(
                "region = \"CH\"\nsigning_key = \"{}\"\n[tls]\nchain = \"{}\"\nkey = \"{}\"\ntrusted_root = \"{}\"\n",
                hex::encode([1u8; 32]),
                hex::encode(chain.encode()),
                hex::encode(key.to_bytes()),
                hex::encode(trusted.verifying_key().to_bytes())
            )
        };
        let config = BackendNodeConfig::from_toml_str(&text(&region, &root)).unwrap();
        let tls = config.tls.unwrap();
        assert_eq!(tls.chain().unwrap(), chain);
        assert_eq!(tls.trusted_root(None).unwrap(), root.verifying_key());
        assert!(BackendNodeConfig::from_toml_str(&text(&root, &root)).is_err());
        assert!(BackendNodeConfig::from_toml_str(&text(&region, &region)).is_err());
    }

    #[test]
    fn feed_labels_round_trip() {
        for feed in [FeedKind::Public, FeedKind::A2A, FeedKind::PerRegion(r("IT"))] {
            assert_eq!(parse_feed_label(&feed.label()), Some(feed));
        }
        assert_eq!(parse_feed_label("region-x"), None);
    }

    #[test]
    fn manual_clock_moves_only_when_told() {
        let clock = ManualClock::new(Timestamp(5));
        assert_eq!(clock.now(), Timestamp(5));
        assert_eq!(clock.advance(10), Timestamp(15));
        clock.set(Timestamp(1));
        assert_eq!(clock.now(), Timestamp(1));
    }

    #[test]
    fn zero_peers_still_serves() {
        let node = Arc::new(node("CH"));
        let net = InProcessNetwork::new();
        let report = node.tick(Timestamp(0), &net);
        assert!(report.polls.is_empty());
        assert_eq!(node.handle_feed(&Request::get("/v1/keys")).status, Status::NoContent);
    }
}
