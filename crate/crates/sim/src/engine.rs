//! Discrete-time execution of a scenario over in-process backend nodes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use ed25519_dalek::{SigningKey, VerifyingKey};
use en_core::batch::{scan_for_region_leaks, Batch, FeedKind};
use en_core::domain::{
    ContactEvent, DiagnosisKey, RegionId, ReplicationType, TemporaryExposureKey, Timestamp, VendorId,
    MAX_UPLOAD_KEYS, SECS_PER_INTERVAL,
};
use en_core::keystore::{Cursor, DiagnosisKeyUpload, KeyOrigin};
use en_core::registry::{BackendRecord, CertChain, Certificate, Registration, Registry};
use en_core::service::{encode_upload, AclSpec, BackendNode, BackendNodeConfig, ManualClock, NodeHandler, PeerSpec};
use en_core::transport::{InProcessNetwork, Method, Request, Response, Status, Transport, TransportError};
use sha2::{Digest, Sha256};

use crate::report::{
    BackendSummary, LinkEntry, NotificationEntry, Outcome, PrivacyScan, ReplicationEvent, Requirement,
    RequirementVerdict, SimulationReport, UploadEntry, UserEntry,
};
use crate::scenario::{associated_regions, location_at, subscription_windows, Scenario, SimError, SimTime};

const AUTH_CODE: &str = "sim-authorized";
const ROOT_NAME: &str = "SIM-ROOT";

/// A finished run: the report plus the state needed for deeper inspection.
pub struct SimulationRun {
    pub report: SimulationReport,
    pub nodes: BTreeMap<RegionId, Arc<BackendNode>>,
    /// Every distinct successful feed response, by (endpoint, path).
    pub wire: BTreeMap<(String, String), Vec<u8>>,
    /// Key bytes each user downloaded over the run.
    pub downloaded: BTreeMap<String, BTreeSet<[u8; 16]>>,
    /// Keys each infected user uploaded.
    pub uploaded: BTreeMap<String, Vec<DiagnosisKey>>,
    /// Observed notifications as (notified, infected, contact time).
    pub matches: BTreeSet<(String, String, Timestamp)>,
}

impl std::fmt::Debug for SimulationRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulationRun")
            .field("scenario", &self.report.scenario)
            .finish_non_exhaustive()
    }
}

impl SimulationRun {
    pub fn node(&self, region: RegionId) -> Option<&Arc<BackendNode>> {
        self.nodes.get(&region)
    }
}

pub fn run_scenario(scenario: &Scenario) -> Result<SimulationReport, SimError> {
    simulate(scenario).map(|run| run.report)
}

fn derive(seed: u64, parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_be_bytes());
    for part in parts {
        hasher.update((part.len() as u32).to_be_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

fn tek(seed: u64, user: &str, day: u32) -> TemporaryExposureKey {
    let digest = derive(seed, &[b"tek", user.as_bytes(), &day.to_be_bytes()]);
    TemporaryExposureKey::new(digest[..16].try_into().expect("16 bytes"), day)
}

/// The key a device switches to for the rest of the day after uploading,
/// so that later contacts do not match the published one.
fn rotated_tek(seed: u64, user: &str, day: u32) -> TemporaryExposureKey {
    let digest = derive(seed, &[b"tek-rotated", user.as_bytes(), &day.to_be_bytes()]);
    TemporaryExposureKey::new(digest[..16].try_into().expect("16 bytes"), day)
}

fn url(region: RegionId) -> String {
    format!("mem://{}", region.as_str().to_lowercase())
}

fn credential(region: RegionId) -> String {
    format!("{region}-tls")
}

/// Records every distinct successful feed response passing through.
struct Recorder {
    net: Arc<InProcessNetwork>,
    wire: Mutex<BTreeMap<(String, String), Vec<u8>>>,
}

impl Transport for Recorder {
    fn send(&self, base_url: &str, credential: Option<&str>, request: Request) -> Result<Response, TransportError> {
        let (method, path) = (request.method, request.path.clone());
        let response = self.net.send(base_url, credential, request)?;
        if method == Method::Get && response.status == Status::Ok {
            let mut wire = self.wire.lock().expect("wire lock poisoned");
            let mut key = (base_url.to_owned(), path.clone());
            let mut n = 1;
            loop {
                match wire.get(&key) {
                    None => {
                        wire.insert(key, response.body.clone());
                        break;
                    }
                    Some(existing) if *existing == response.body => break,
                    Some(_) => {
                        n += 1;
                        key.1 = format!("{path}@{n}");
                    }
                }
            }
        }
        Ok(response)
    }
}

struct CachedBatch {
    bytes: usize,
    keys: Vec<DiagnosisKey>,
    members: HashSet<[u8; 16]>,
}

#[derive(Default)]
struct FeedCache {
    batches: BTreeMap<u64, CachedBatch>,
    next: u64,
}

struct Agent {
    contacts: Vec<(usize, ContactEvent)>,
    cursors: BTreeMap<RegionId, u64>,
    downloaded: BTreeSet<[u8; 16]>,
    bytes: u64,
    /// (contact index, infected user index)
    observed: BTreeSet<(usize, usize)>,
}

struct UploadRecord {
    user: usize,
    backend: RegionId,
    at: Timestamp,
    declared: BTreeSet<RegionId>,
    keys: Vec<DiagnosisKey>,
    stored: usize,
}

struct Federation {
    nodes: BTreeMap<RegionId, Arc<BackendNode>>,
    feed_keys: BTreeMap<RegionId, VerifyingKey>,
    net: Arc<InProcessNetwork>,
    clock: Arc<ManualClock>,
}

fn build_federation(scenario: &Scenario) -> Result<Federation, SimError> {
    let seed = scenario.seed;
    let backend_err = |e: String| SimError::Backend(e);
    let root = SigningKey::from_bytes(&derive(seed, &[b"root"]));
    let root_cert = Certificate::self_signed(ROOT_NAME, &root);
    let registry = Registry::new(root.verifying_key());
    let net = Arc::new(InProcessNetwork::new());
    let clock = Arc::new(ManualClock::new(Timestamp(0)));

    let mut cluster_keys = BTreeMap::new();
    for cluster in &scenario.clusters {
        let key = SigningKey::from_bytes(&derive(seed, &[b"cluster", cluster.name.as_bytes()]));
        let cert = Certificate::issue(cluster.name.clone(), key.verifying_key(), ROOT_NAME, &root);
        cluster_keys.insert(cluster.name.clone(), (key, cert));
    }

    let mut feed_signers = BTreeMap::new();
    for region in &scenario.regions {
        let id = region.id;
        let region_key = SigningKey::from_bytes(&derive(seed, &[b"region", id.as_str().as_bytes()]));
        let feed_key = SigningKey::from_bytes(&derive(seed, &[b"feed", id.as_str().as_bytes()]));
        let cluster = scenario.cluster_of(id).map(|c| c.name.clone());
        let (issuer_name, issuer_key, cluster_cert) = match &cluster {
            Some(name) => {
                let (key, cert) = &cluster_keys[name];
                (name.as_str(), key, Some(cert.clone()))
            }
            None => (ROOT_NAME, &root, None),
        };
        let chain = CertChain {
            root: root_cert.clone(),
            cluster: cluster_cert,
            region: Certificate::issue(id.as_str(), region_key.verifying_key(), issuer_name, issuer_key),
        };
        let mut offered = BTreeSet::from([ReplicationType::Partial]);
        if cluster.is_some() {
            offered.insert(ReplicationType::AllToAll);
        }
        let vendor = VendorId::new(region.vendor.clone().unwrap_or_else(|| "sim".into()))
            .map_err(|e| backend_err(e.to_string()))?;
        let record = BackendRecord::signed(id, cluster, vendor, url(id), feed_key.verifying_key(), offered, &region_key);
        net.register_credential(credential(id), chain.identity());
        if let Registration::Rejected(reason) = registry.register_backend(record, chain) {
            return Err(backend_err(format!("registry rejected {id}: {reason}")));
        }
        feed_signers.insert(id, feed_key);
    }

    let cadence = &scenario.cadence;
    let mut nodes = BTreeMap::new();
    let mut feed_keys = BTreeMap::new();
    for region in scenario.region_ids() {
        let signer = &feed_signers[&region];
        let mut config = BackendNodeConfig::new(region, signer);
        config.cluster = scenario.cluster_of(region).map(|c| c.name.clone());
        config.auth_codes = vec![AUTH_CODE.into()];
        config.retention_days = cadence.retention_days;
        config.max_chunk_size = cadence.max_chunk_size;
        config.poll_interval_secs = cadence.poll_interval_secs;
        config.build_interval_secs = cadence.build_interval_secs;
        for producer in scenario.region_ids() {
            if let Some(mode) = scenario.link_mode(region, producer) {
                config.peers.push(PeerSpec {
                    region: producer,
                    replication: mode,
                    credential: credential(region),
                    url: None,
                    verification_key: None,
                    format: None,
                });
            }
        }
        let own_cluster = scenario.cluster_of(region).map(|c| c.name.clone());
        let mut acl = BTreeSet::new();
        for consumer in scenario.region_ids() {
            if scenario.link_mode(consumer, region) == Some(ReplicationType::AllToAll) {
                let same_cluster = own_cluster.is_some() && scenario.cluster_of(consumer).map(|c| &c.name) == own_cluster.as_ref();
                acl.insert(match (&own_cluster, same_cluster) {
                    (Some(name), true) => format!("issuer:{name}"),
                    _ => format!("subject:{consumer}"),
                });
            }
        }
        config.acl = acl
            .into_iter()
            .map(|allow| AclSpec { feed: "a2a".into(), allow })
            .collect();
        let node = Arc::new(BackendNode::new(&config, Some(&registry)).map_err(|e| backend_err(e.to_string()))?);
        net.register(url(region), Arc::new(NodeHandler::new(node.clone(), clock.clone())));
        feed_keys.insert(region, signer.verifying_key());
        nodes.insert(region, node);
    }
    Ok(Federation {
        nodes,
        feed_keys,
        net,
        clock,
    })
}

/// Runs `scenario` to its horizon.
pub fn simulate(scenario: &Scenario) -> Result<SimulationRun, SimError> {
    scenario.validate()?;
    let fed = build_federation(scenario)?;
    let recorder = Recorder {
        net: fed.net.clone(),
        wire: Mutex::new(BTreeMap::new()),
    };
    let seed = scenario.seed;
    let user_index: HashMap<&str, usize> = scenario
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id.as_str(), i))
        .collect();
    let windows: Vec<_> = scenario
        .users
        .iter()
        .map(|u| subscription_windows(u, scenario.listening))
        .collect();
    let mut agents: Vec<Agent> = scenario
        .users
        .iter()
        .map(|_| Agent {
            contacts: Vec::new(),
            cursors: BTreeMap::new(),
            downloaded: BTreeSet::new(),
            bytes: 0,
            observed: BTreeSet::new(),
        })
        .collect();

    let step_of = |t: SimTime| t.0.secs() / SECS_PER_INTERVAL;
    let mut contacts_at: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in scenario.contacts.iter().enumerate() {
        contacts_at.entry(step_of(c.at)).or_default().push(i);
    }
    let mut infections_at: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, inf) in scenario.infections.iter().enumerate() {
        infections_at.entry(step_of(inf.at)).or_default().push(i);
    }

    let mut uploads: Vec<UploadRecord> = Vec::new();
    let mut uploaded_at: HashMap<usize, Timestamp> = HashMap::new();
    let mut key_owner: HashMap<[u8; 16], usize> = HashMap::new();
    let mut key_upload: HashMap<[u8; 16], usize> = HashMap::new();
    let mut arrivals: BTreeMap<(usize, RegionId), Timestamp> = BTreeMap::new();
    let mut store_cursors: BTreeMap<RegionId, Cursor> = BTreeMap::new();
    let mut caches: BTreeMap<RegionId, FeedCache> = BTreeMap::new();
    let mut rpi_index: HashMap<[u8; 16], (u32, [u8; 16])> = HashMap::new();
    let mut timeline = Vec::new();
    let mut isolation_violations = Vec::new();

    let steps = scenario.horizon().secs() / SECS_PER_INTERVAL;
    for step in 0..steps {
        let now = Timestamp(step * SECS_PER_INTERVAL);
        fed.clock.set(now);

        for &ci in contacts_at.get(&step).into_iter().flatten() {
            let c = &scenario.contacts[ci];
            let (a, b) = (user_index[c.a.as_str()], user_index[c.b.as_str()]);
            let interval = now.interval();
            for (observer, other) in [(a, b), (b, a)] {
                let id = &scenario.users[other].id;
                let key = match uploaded_at.get(&other) {
                    Some(t) if t.day() == now.day() => rotated_tek(seed, id, now.day()),
                    _ => tek(seed, id, now.day()),
                };
                agents[observer].contacts.push((
                    ci,
                    ContactEvent {
                        observed_id: key.rolling_id_at(interval),
                        metadata: [0; 4],
                        observed_at: now,
                    },
                ));
            }
        }

        for &ii in infections_at.get(&step).into_iter().flatten() {
            let infection = &scenario.infections[ii];
            let user_idx = user_index[infection.user.as_str()];
            let user = &scenario.users[user_idx];
            let home = user.base[0];
            if infection.region.is_some_and(|r| r != home) {
                continue;
            }
            let today = now.day();
            let first = today.saturating_sub(MAX_UPLOAD_KEYS as u32 - 1);
            let keys: Vec<DiagnosisKey> = (first..=today).map(|d| DiagnosisKey(tek(seed, &user.id, d))).collect();
            let declared = associated_regions(user, now);
            let upload = DiagnosisKeyUpload {
                keys: keys.clone(),
                declared_regions: declared.clone(),
                testing_region: home,
                upload_time: now,
                authorization_code: AUTH_CODE.into(),
            };
            let response = recorder
                .send(&url(home), None, Request::post("/v1/keys", encode_upload(&upload)))
                .map_err(|e| SimError::Backend(e.to_string()))?;
            if response.status != Status::Ok {
                return Err(SimError::Backend(format!(
                    "upload of {} to {home} failed with {:?}",
                    user.id, response.status
                )));
            }
            let stored = String::from_utf8_lossy(&response.body).parse().unwrap_or(0);
            for key in &keys {
                key_owner.insert(*key.bytes(), user_idx);
                key_upload.insert(*key.bytes(), uploads.len());
            }
            arrivals.insert((uploads.len(), home), now);
            uploaded_at.insert(user_idx, now);
            uploads.push(UploadRecord {
                user: user_idx,
                backend: home,
                at: now,
                declared,
                keys,
                stored,
            });
        }

        for (region, node) in &fed.nodes {
            let report = node.tick(now, &recorder);
            for (producer, outcome) in &report.polls {
                for applied in &outcome.batches {
                    timeline.push(ReplicationEvent {
                        at: SimTime(now).to_string(),
                        consumer: region.to_string(),
                        producer: producer.to_string(),
                        batch_id: applied.batch_id,
                        keys: applied.keys,
                        new_keys: applied.new_keys,
                        bytes: applied.bytes,
                    });
                }
            }
            let cursor = store_cursors.entry(*region).or_insert(Cursor::START);
            let fresh = node.store().read_since(*cursor).map_err(|e| SimError::Backend(e.to_string()))?;
            *cursor = node.store().end_cursor();
            for stored in fresh {
                let KeyOrigin::Remote { source } = stored.origin else {
                    continue;
                };
                let Some(&ui) = key_upload.get(stored.key.bytes()) else {
                    isolation_violations.push(format!("{region} stored unknown key from {source}"));
                    continue;
                };
                arrivals.entry((ui, *region)).or_insert(now);
                let upload = &uploads[ui];
                if upload.backend != source {
                    isolation_violations.push(format!(
                        "{region} got {}'s key from {source}, not from its origin {}",
                        scenario.users[upload.user].id, upload.backend
                    ));
                }
                if scenario.link_mode(*region, source) == Some(ReplicationType::Partial)
                    && !upload.declared.contains(region)
                {
                    isolation_violations.push(format!(
                        "{region} stored {}'s key although the upload did not declare it",
                        scenario.users[upload.user].id
                    ));
                }
            }
        }

        if now.secs() % scenario.cadence.download_interval_secs == 0 {
            for (region, node) in &fed.nodes {
                let cache = caches.entry(*region).or_default();
                refresh_cache(cache, *region, node, &fed.feed_keys[region], &recorder, &mut rpi_index)?;
            }
            for (ui, agent) in agents.iter_mut().enumerate() {
                for (region, list) in &windows[ui] {
                    let listening = list.iter().any(|(from, to)| *from <= now && to.map_or(true, |to| now < to));
                    if !listening {
                        continue;
                    }
                    let cache = &caches[region];
                    let cursor = agent.cursors.entry(*region).or_insert(0);
                    for (id, batch) in cache.batches.range(*cursor + 1..) {
                        agent.bytes += batch.bytes as u64;
                        for key in &batch.keys {
                            agent.downloaded.insert(*key.bytes());
                        }
                        for (ci, contact) in &agent.contacts {
                            let Some((interval, key)) = rpi_index.get(&contact.observed_id.bytes) else {
                                continue;
                            };
                            if *interval == contact.observed_id.interval && batch.members.contains(key) {
                                agent.observed.insert((*ci, key_owner[key]));
                            }
                        }
                        *cursor = *id;
                    }
                }
            }
        }
    }

    let wire = recorder.wire.into_inner().expect("wire lock poisoned");
    let privacy = privacy_scan(&wire, &uploads);
    let notifications = evaluate(scenario, &agents, &uploads, &arrivals, &user_index);
    let mut verdicts: BTreeMap<Requirement, RequirementVerdict> = [
        Requirement::F1,
        Requirement::F2,
        Requirement::F3,
        Requirement::Local,
    ]
    .into_iter()
    .map(|r| (r, RequirementVerdict::default()))
    .collect();
    for n in &notifications {
        let v = verdicts.get_mut(&n.requirement).expect("all requirements listed");
        match n.outcome {
            Outcome::Matched => v.matched += 1,
            Outcome::Missed => v.missed += 1,
            Outcome::Unexpected => v.unexpected += 1,
            Outcome::ExpectedMiss(_) => v.expected_miss += 1,
            Outcome::Absent(_) => v.absent += 1,
        }
    }
    for v in verdicts.values_mut() {
        v.pass = v.missed == 0 && v.unexpected == 0;
    }

    let traffic = fed.net.traffic();
    let mut links = Vec::new();
    for consumer in scenario.region_ids() {
        for producer in scenario.region_ids() {
            let Some(mode) = scenario.link_mode(consumer, producer) else {
                continue;
            };
            let t = traffic.get(&(consumer.to_string(), url(producer))).copied().unwrap_or_default();
            let events = timeline
                .iter()
                .filter(|e: &&ReplicationEvent| e.consumer == consumer.as_str() && e.producer == producer.as_str());
            let (batches, keys) = events.fold((0, 0), |(b, k), e| (b + 1, k + e.keys as u64));
            links.push(LinkEntry {
                consumer: consumer.to_string(),
                producer: producer.to_string(),
                mode: mode.to_string(),
                requests: t.requests,
                bytes: t.response_bytes,
                batches,
                keys,
            });
        }
    }

    let backends = fed
        .nodes
        .iter()
        .map(|(region, node)| {
            let counts = node.store().counts();
            (
                region.to_string(),
                BackendSummary {
                    local_keys: counts.local,
                    remote_keys: counts.remote,
                },
            )
        })
        .collect();

    let users = scenario
        .users
        .iter()
        .zip(&agents)
        .map(|(u, a)| UserEntry {
            user: u.id.clone(),
            bytes: a.bytes,
            keys: a.downloaded.len(),
            matches: a.observed.len(),
        })
        .collect();

    let upload_entries = uploads
        .iter()
        .map(|u| UploadEntry {
            user: scenario.users[u.user].id.clone(),
            backend: u.backend.to_string(),
            at: SimTime(u.at).to_string(),
            declared: u.declared.iter().map(ToString::to_string).collect(),
            keys: u.keys.len(),
            stored: u.stored,
        })
        .collect();

    let passed = verdicts.values().all(|v| v.pass) && isolation_violations.is_empty() && privacy.leaks.is_empty();
    let report = SimulationReport {
        scenario: scenario.name.clone(),
        seed,
        horizon_days: scenario.horizon_days,
        replication: scenario.replication.to_string(),
        listening: scenario.listening.to_string(),
        passed,
        verdicts,
        notifications,
        uploads: upload_entries,
        backends,
        links,
        users,
        timeline,
        isolation_violations,
        privacy,
    };

    let matches = agents
        .iter()
        .enumerate()
        .flat_map(|(ui, a)| {
            a.observed.iter().map(move |(ci, infected)| {
                (
                    scenario.users[ui].id.clone(),
                    scenario.users[*infected].id.clone(),
                    scenario.contacts[*ci].at.0,
                )
            })
        })
        .collect();
    let downloaded = scenario
        .users
        .iter()
        .zip(agents)
        .map(|(u, a)| (u.id.clone(), a.downloaded))
        .collect();
    let uploaded = uploads
        .iter()
        .map(|u| (scenario.users[u.user].id.clone(), u.keys.clone()))
        .collect();
    Ok(SimulationRun {
        report,
        nodes: fed.nodes,
        wire,
        downloaded,
        uploaded,
        matches,
    })
}

/// Pulls new public batches of `region` the way a device would, anonymously.
fn refresh_cache(
    cache: &mut FeedCache,
    region: RegionId,
    node: &BackendNode,
    feed_key: &VerifyingKey,
    transport: &dyn Transport,
    rpi_index: &mut HashMap<[u8; 16], (u32, [u8; 16])>,
) -> Result<(), SimError> {
    let retained: Vec<u64> = node
        .producer()
        .summaries()
        .into_iter()
        .find(|s| s.feed == FeedKind::Public)
        .map(|s| s.retained)
        .unwrap_or_default();
    let oldest = retained.first().copied();
    if let Some(oldest) = oldest {
        cache.batches.retain(|id, _| *id >= oldest);
    } else {
        cache.batches.clear();
    }
    cache.next = cache.next.max(1);
    loop {
        let response = transport
            .send(&url(region), None, Request::get(FeedKind::Public.chunk_path(cache.next)))
            .map_err(|e| SimError::Backend(e.to_string()))?;
        match response.status {
            Status::Ok => {
                let batch = Batch::decode_verified(&response.body, feed_key)
                    .map_err(|e| SimError::Backend(format!("{region} served a bad batch: {e}")))?;
                for key in &batch.keys {
                    if !rpi_index.contains_key(&key.tek().rolling_id_at(key.tek().first_interval()).bytes) {
                        for rpi in en_core::domain::derive_rolling_ids(key.tek()) {
                            rpi_index.insert(rpi.bytes, (rpi.interval, *key.bytes()));
                        }
                    }
                }
                cache.batches.insert(
                    cache.next,
                    CachedBatch {
                        bytes: response.body.len(),
                        members: batch.keys.iter().map(|k| *k.bytes()).collect(),
                        keys: batch.keys,
                    },
                );
                cache.next += 1;
            }
            Status::Gone => match oldest {
                Some(oldest) if oldest > cache.next => cache.next = oldest,
                _ => break,
            },
            _ => break,
        }
    }
    Ok(())
}

fn privacy_scan(wire: &BTreeMap<(String, String), Vec<u8>>, uploads: &[UploadRecord]) -> PrivacyScan {
    let mut patterns = BTreeSet::new();
    for upload in uploads.iter().filter(|u| u.declared.len() >= 2) {
        let codes: Vec<&str> = upload.declared.iter().map(RegionId::as_str).collect();
        for sep in ["", ",", " ", "|", ";"] {
            patterns.insert(codes.join(sep).into_bytes());
        }
        patterns.insert(format!("[\"{}\"]", codes.join("\",\"")).into_bytes());
    }
    let patterns: Vec<Vec<u8>> = patterns.into_iter().collect();
    let mut scan = PrivacyScan::default();
    for ((endpoint, path), body) in wire {
        scan.responses += 1;
        scan.bytes += body.len() as u64;
        if let Err(reason) = scan_for_region_leaks(body, &patterns) {
            scan.leaks.push(format!("{endpoint}{path}: {reason}"));
        }
    }
    scan
}

struct Judgement {
    sure: bool,
    possible: bool,
    reason: String,
}

/// Decides from the scenario alone whether `notified` must, may or cannot
/// learn about `upload`'s keys before the horizon.
fn judge(scenario: &Scenario, notified: usize, upload: &UploadRecord) -> Judgement {
    let c = &scenario.cadence;
    let step = SECS_PER_INTERVAL;
    let home_latency = c.build_interval_secs + c.download_interval_secs + step;
    let remote_latency = 2 * c.build_interval_secs + c.poll_interval_secs + c.download_interval_secs + 2 * step;
    let horizon = scenario.horizon();
    let expiry = upload.at.plus_days(u64::from(c.retention_days));
    let mut available = vec![(upload.backend, home_latency)];
    for region in scenario.region_ids() {
        match scenario.link_mode(region, upload.backend) {
            Some(ReplicationType::AllToAll) => available.push((region, remote_latency)),
            Some(ReplicationType::Partial) if upload.declared.contains(&region) => {
                available.push((region, remote_latency))
            }
            _ => {}
        }
    }
    let windows = subscription_windows(&scenario.users[notified], scenario.listening);
    let mut sure = false;
    let mut possible = false;
    for (region, latency) in &available {
        for (from, to) in windows.get(region).into_iter().flatten() {
            let to = to.unwrap_or(horizon).min(horizon);
            if upload.at.max(*from) < to {
                possible = true;
            }
            let start = upload.at.plus_secs(*latency).max(*from);
            let end = to.min(expiry);
            if start.secs() + c.download_interval_secs + step <= end.secs() {
                sure = true;
            }
        }
    }
    let names: Vec<String> = available.iter().map(|(r, _)| r.to_string()).collect();
    let reason = if possible {
        format!("listening to [{}] ended too soon after the upload", names.join(" "))
    } else {
        format!("not listening to any of [{}] after the upload", names.join(" "))
    };
    Judgement { sure, possible, reason }
}

fn evaluate(
    scenario: &Scenario,
    agents: &[Agent],
    uploads: &[UploadRecord],
    arrivals: &BTreeMap<(usize, RegionId), Timestamp>,
    user_index: &HashMap<&str, usize>,
) -> Vec<NotificationEntry> {
    let mut entries = Vec::new();
    let infection_of: HashMap<usize, usize> = scenario
        .infections
        .iter()
        .enumerate()
        .map(|(i, inf)| (user_index[inf.user.as_str()], i))
        .collect();
    let upload_of: HashMap<usize, usize> = uploads.iter().enumerate().map(|(i, u)| (u.user, i)).collect();
    for (ci, contact) in scenario.contacts.iter().enumerate() {
        let (a, b) = (user_index[contact.a.as_str()], user_index[contact.b.as_str()]);
        let region = location_at(&scenario.users[a], contact.at.0);
        for (notified, infected) in [(a, b), (b, a)] {
            let Some(&ii) = infection_of.get(&infected) else {
                continue;
            };
            let infection = &scenario.infections[ii];
            let at = contact.at.0;
            // Only contacts covered by the uploaded key window are relevant.
            if at > infection.at.0 || at.day() + (MAX_UPLOAD_KEYS as u32 - 1) < infection.at.0.day() {
                continue;
            }
            let local = |u: usize| scenario.users[u].base.contains(&region);
            let requirement = match (local(notified), local(infected)) {
                (true, false) => Requirement::F1,
                (false, true) => Requirement::F2,
                (false, false) => Requirement::F3,
                (true, true) => Requirement::Local,
            };
            let observed = agents[notified].observed.contains(&(ci, infected));
            let mut trace = Vec::new();
            let outcome = match upload_of.get(&infected) {
                None => {
                    let tested_in = infection.region.map_or_else(String::new, |r| r.to_string());
                    if observed {
                        Outcome::Unexpected
                    } else {
                        Outcome::ExpectedMiss(format!(
                            "positive test in {tested_in} outside the base region; roaming uploads are unsupported"
                        ))
                    }
                }
                Some(&ui) => {
                    let upload = &uploads[ui];
                    let judgement = judge(scenario, notified, upload);
                    let outcome = match (observed, judgement.sure, judgement.possible) {
                        (true, _, true) => Outcome::Matched,
                        (true, _, false) => Outcome::Unexpected,
                        (false, true, _) => Outcome::Missed,
                        (false, false, _) => Outcome::Absent(judgement.reason),
                    };
                    if outcome.is_violation() {
                        let declared: Vec<String> = upload.declared.iter().map(ToString::to_string).collect();
                        trace.push(format!(
                            "{} uploaded to {} at {} declaring [{}]",
                            scenario.users[infected].id,
                            upload.backend,
                            SimTime(upload.at),
                            declared.join(" ")
                        ));
                        for ((u, r), t) in arrivals.range((ui, RegionId::from_bytes(*b"AA").expect("valid"))..) {
                            if *u != ui {
                                break;
                            }
                            trace.push(format!("keys stored at {r} at {}", SimTime(*t)));
                        }
                        for (r, list) in subscription_windows(&scenario.users[notified], scenario.listening) {
                            for (from, to) in list {
                                trace.push(format!(
                                    "{} listened to {r} from {} to {}",
                                    scenario.users[notified].id,
                                    SimTime(from),
                                    to.map_or("the horizon".to_owned(), |t| SimTime(t).to_string())
                                ));
                            }
                        }
                    }
                    outcome
                }
            };
            entries.push(NotificationEntry {
                requirement,
                notified: scenario.users[notified].id.clone(),
                infected: scenario.users[infected].id.clone(),
                region: region.to_string(),
                contact_at: contact.at.to_string(),
                upload_at: infection.at.to_string(),
                outcome,
                trace,
            });
        }
    }
    entries
}
