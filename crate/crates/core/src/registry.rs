//! Backend directory and certificate hierarchy.
//!
//! A trusted root issues optional cluster certificates, which issue region
//! certificates (or the root issues region certificates directly). Each backend
//! publishes a record signed by its region certificate. Certificates are
//! compact canonical records signed with ed25519 rather than X.509; a
//! production deployment would map them onto its PKI.
//!
//! The registry file is line based: a header `ENREG1 <hex root key>` followed by
//! one hex-encoded entry (signed record plus chain) per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::RwLock;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use thiserror::Error;

use crate::batch::FeedKind;
use crate::domain::{RegionId, ReplicationType, VendorId};
use crate::transport::ClientIdentity;

const CERT_TAG: &[u8] = b"ENCERT1";
const RECORD_TAG: &[u8] = b"ENREC1";
const FILE_HEADER: &str = "ENREG1";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("no backend registered for {0}")]
    NotFound(RegionId),
    #[error("malformed registry data: {0}")]
    Malformed(String),
    #[error("registry entry for {region} rejected: {reason}")]
    Rejected { region: String, reason: String },
    #[error("registry io: {0}")]
    Io(#[from] io::Error),
}

fn malformed(msg: impl Into<String>) -> RegistryError {
    RegistryError::Malformed(msg.into())
}

/// Length-prefixed field encoding shared by certificates and records.
struct Writer(Vec<u8>);

impl Writer {
    fn new(tag: &[u8]) -> Self {
        Writer(tag.to_vec())
    }

    fn bytes(&mut self, data: &[u8]) -> &mut Self {
        self.0
            .extend_from_slice(&u16::try_from(data.len()).expect("field fits u16").to_be_bytes());
        self.0.extend_from_slice(data);
        self
    }

    fn raw(&mut self, data: &[u8]) -> &mut Self {
        self.0.extend_from_slice(data);
        self
    }
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], tag: &[u8]) -> Result<Self, RegistryError> {
        let rest = data
            .strip_prefix(tag)
            .ok_or_else(|| malformed("bad record tag"))?;
        Ok(Reader { data: rest })
    }

    fn raw(&mut self, len: usize) -> Result<&'a [u8], RegistryError> {
        if self.data.len() < len {
            return Err(malformed("truncated"));
        }
        let (head, tail) = self.data.split_at(len);
        self.data = tail;
        Ok(head)
    }

    fn bytes(&mut self) -> Result<&'a [u8], RegistryError> {
        let len = u16::from_be_bytes(self.raw(2)?.try_into().expect("2 bytes"));
        self.raw(len as usize)
    }

    fn string(&mut self) -> Result<String, RegistryError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| malformed("field is not utf-8"))
    }

    fn key(&mut self) -> Result<VerifyingKey, RegistryError> {
        let bytes: [u8; 32] = self.raw(32)?.try_into().expect("32 bytes");
        VerifyingKey::from_bytes(&bytes).map_err(|_| malformed("invalid public key"))
    }

    fn signature(&mut self) -> Result<[u8; 64], RegistryError> {
        Ok(self.raw(64)?.try_into().expect("64 bytes"))
    }

    fn finish(self) -> Result<(), RegistryError> {
        if self.data.is_empty() {
            Ok(())
        } else {
            Err(malformed("trailing bytes"))
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: String,
    pub public_key: VerifyingKey,
    pub issuer: String,
    pub signature: [u8; 64],
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Certificate({} <- {})", self.subject, self.issuer)
    }
}

impl Certificate {
    pub fn issue(
        subject: impl Into<String>,
        public_key: VerifyingKey,
        issuer: impl Into<String>,
        issuer_key: &SigningKey,
    ) -> Self {
        let mut cert = Certificate {
            subject: subject.into(),
            public_key,
            issuer: issuer.into(),
            signature: [0; 64],
        };
        cert.signature = issuer_key.sign(&cert.tbs_bytes()).to_bytes();
        cert
    }

    pub fn self_signed(subject: impl Into<String>, key: &SigningKey) -> Self {
        let subject = subject.into();
        Certificate::issue(subject.clone(), key.verifying_key(), subject, key)
    }

    /// The signed portion of the certificate.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CERT_TAG);
        w.bytes(self.subject.as_bytes())
            .bytes(self.issuer.as_bytes())
            .raw(self.public_key.as_bytes());
        w.0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tbs_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    fn read(reader: &mut Reader<'_>) -> Result<Self, RegistryError> {
        let body = reader.bytes()?;
        let mut inner = Reader::new(body, CERT_TAG)?;
        let cert = Certificate {
            subject: inner.string()?,
            issuer: inner.string()?,
            public_key: inner.key()?,
            signature: inner.signature()?,
        };
        inner.finish()?;
        Ok(cert)
    }

    fn signed_by(&self, issuer: &VerifyingKey) -> bool {
        issuer
            .verify(&self.tbs_bytes(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertChain {
    pub root: Certificate,
    pub cluster: Option<Certificate>,
    pub region: Certificate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainLink {
    Root,
    Cluster,
    Region,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid,
    Invalid { link: ChainLink, reason: String },
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainVerdict::Valid)
    }
}

impl CertChain {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(b"");
        w.bytes(&self.root.encode());
        match &self.cluster {
            Some(cluster) => {
                w.raw(&[1]).bytes(&cluster.encode());
            }
            None => {
                w.raw(&[0]);
            }
        }
        w.bytes(&self.region.encode());
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RegistryError> {
        let mut reader = Reader { data: bytes };
        let chain = CertChain::read(&mut reader)?;
        reader.finish()?;
        Ok(chain)
    }

    fn read(reader: &mut Reader<'_>) -> Result<Self, RegistryError> {
        let root = Certificate::read(reader)?;
        let cluster = match reader.raw(1)?[0] {
            0 => None,
            1 => Some(Certificate::read(reader)?),
            _ => return Err(malformed("bad cluster flag")),
        };
        let region = Certificate::read(reader)?;
        Ok(CertChain {
            root,
            cluster,
            region,
        })
    }

    /// The identity a backend holding this chain presents to its peers.
    pub fn identity(&self) -> ClientIdentity {
        let mut issuers = Vec::new();
        if let Some(cluster) = &self.cluster {
            issuers.push(cluster.subject.clone());
        }
        issuers.push(self.root.subject.clone());
        ClientIdentity::new(self.region.subject.clone(), issuers)
    }
}

/// Verifies each link of `chain` up to `trusted_root`, reporting the first broken one.
pub fn verify_chain(chain: &CertChain, trusted_root: &VerifyingKey) -> ChainVerdict {
    let invalid = |link, reason: &str| ChainVerdict::Invalid {
        link,
        reason: reason.to_owned(),
    };
    if chain.root.public_key != *trusted_root {
        return invalid(ChainLink::Root, "root key is not the trusted root");
    }
    if chain.root.issuer != chain.root.subject || !chain.root.signed_by(trusted_root) {
        return invalid(ChainLink::Root, "root is not validly self-signed");
    }
    let mut parent = &chain.root;
    if let Some(cluster) = &chain.cluster {
        if cluster.issuer != parent.subject {
            return invalid(ChainLink::Cluster, "issuer does not name the root");
        }
        if !cluster.signed_by(&parent.public_key) {
            return invalid(ChainLink::Cluster, "signature does not verify under the root");
        }
        parent = cluster;
    }
    if chain.region.issuer != parent.subject {
        return invalid(ChainLink::Region, "issuer does not name its parent");
    }
    if !chain.region.signed_by(&parent.public_key) {
        return invalid(ChainLink::Region, "signature does not verify under its parent");
    }
    ChainVerdict::Valid
}

#[derive(Clone, PartialEq, Eq)]
pub struct BackendRecord {
    pub region: RegionId,
    pub cluster: Option<String>,
    pub vendor: VendorId,
    pub base_url: String,
    pub feed_verification_key: VerifyingKey,
    pub replication_offered: BTreeSet<ReplicationType>,
    pub signature: [u8; 64],
}

impl fmt::Debug for BackendRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRecord")
            .field("region", &self.region)
            .field("cluster", &self.cluster)
            .field("vendor", &self.vendor)
            .field("base_url", &self.base_url)
            .field("replication_offered", &self.replication_offered)
            .finish()
    }
}

impl BackendRecord {
    pub fn signed(
        region: RegionId,
        cluster: Option<String>,
        vendor: VendorId,
        base_url: impl Into<String>,
        feed_verification_key: VerifyingKey,
        replication_offered: BTreeSet<ReplicationType>,
        region_key: &SigningKey,
    ) -> Self {
        let mut record = BackendRecord {
            region,
            cluster,
            vendor,
            base_url: base_url.into(),
            feed_verification_key,
            replication_offered,
            signature: [0; 64],
        };
        record.resign(region_key);
        record
    }

    pub fn resign(&mut self, region_key: &SigningKey) {
        self.signature = region_key.sign(&self.signed_bytes()).to_bytes();
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut offered = 0u8;
        for kind in &self.replication_offered {
            offered |= match kind {
                ReplicationType::AllToAll => 1,
                ReplicationType::Partial => 2,
            };
        }
        let mut w = Writer::new(RECORD_TAG);
        w.raw(&self.region.as_bytes())
            .bytes(self.cluster.as_deref().unwrap_or("").as_bytes())
            .bytes(self.vendor.as_str().as_bytes())
            .bytes(self.base_url.as_bytes())
            .raw(self.feed_verification_key.as_bytes())
            .raw(&[offered]);
        w.0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    fn read(reader: &mut Reader<'_>) -> Result<Self, RegistryError> {
        let body = reader.bytes()?;
        let mut r = Reader::new(body, RECORD_TAG)?;
        let region_bytes: [u8; 2] = r.raw(2)?.try_into().expect("2 bytes");
        let region =
            RegionId::from_bytes(region_bytes).map_err(|e| malformed(e.to_string()))?;
        let cluster = r.string()?;
        let vendor = VendorId::new(r.string()?).map_err(|e| malformed(e.to_string()))?;
        let base_url = r.string()?;
        let feed_verification_key = r.key()?;
        let offered = r.raw(1)?[0];
        let mut replication_offered = BTreeSet::new();
        if offered & 1 != 0 {
            replication_offered.insert(ReplicationType::AllToAll);
        }
        if offered & 2 != 0 {
            replication_offered.insert(ReplicationType::Partial);
        }
        let signature = r.signature()?;
        r.finish()?;
        Ok(BackendRecord {
            region,
            cluster: (!cluster.is_empty()).then_some(cluster),
            vendor,
            base_url,
            feed_verification_key,
            replication_offered,
            signature,
        })
    }

    fn signed_by(&self, key: &VerifyingKey) -> bool {
        key.verify(&self.signed_bytes(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub record: BackendRecord,
    pub chain: CertChain,
}

impl RegistryEntry {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(b"");
        w.bytes(&self.record.encode()).raw(&self.chain.encode());
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RegistryError> {
        let mut reader = Reader { data: bytes };
        let record = BackendRecord::read(&mut reader)?;
        let chain = CertChain::read(&mut reader)?;
        reader.finish()?;
        Ok(RegistryEntry { record, chain })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Registration {
    Accepted,
    Rejected(String),
}

/// Checks an entry against the trusted root without touching any registry.
pub fn check_entry(record: &BackendRecord, chain: &CertChain, trusted_root: &VerifyingKey) -> Registration {
    if let ChainVerdict::Invalid { link, reason } = verify_chain(chain, trusted_root) {
        return Registration::Rejected(format!("chain invalid at {link:?} link: {reason}"));
    }
    if chain.region.subject != record.region.as_str() {
        return Registration::Rejected(format!(
            "record for {} carries a certificate for {}",
            record.region, chain.region.subject
        ));
    }
    let chain_cluster = chain.cluster.as_ref().map(|c| c.subject.as_str());
    if record.cluster.as_deref() != chain_cluster {
        return Registration::Rejected("record cluster does not match the certificate chain".into());
    }
    if !record.signed_by(&chain.region.public_key) {
        return Registration::Rejected("record signature does not verify under the region certificate".into());
    }
    Registration::Accepted
}

/// The backend directory; lookups only ever see entries that verified.
#[derive(Debug)]
pub struct Registry {
    trusted_root: VerifyingKey,
    entries: RwLock<BTreeMap<RegionId, RegistryEntry>>,
}

impl Registry {
    pub fn new(trusted_root: VerifyingKey) -> Self {
        Registry {
            trusted_root,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn trusted_root(&self) -> &VerifyingKey {
        &self.trusted_root
    }

    pub fn register_backend(&self, record: BackendRecord, chain: CertChain) -> Registration {
        let verdict = check_entry(&record, &chain, &self.trusted_root);
        if verdict == Registration::Accepted {
            self.entries
                .write()
                .expect("registry lock poisoned")
                .insert(record.region, RegistryEntry { record, chain });
        }
        verdict
    }

    pub fn lookup(&self, region: RegionId) -> Result<RegistryEntry, RegistryError> {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .get(&region)
            .cloned()
            .ok_or(RegistryError::NotFound(region))
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .values()
            .cloned()
            .collect()
    }

    pub fn regions(&self) -> Vec<RegionId> {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .keys()
            .copied()
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{FILE_HEADER} {}\n", hex::encode(self.trusted_root.as_bytes()));
        for entry in self.entries() {
            out.push_str(&hex::encode(entry.encode()));
            out.push('\n');
        }
        out
    }

    /// Parses a registry file, returning the registry and any rejected entries.
    pub fn parse_lenient(text: &str) -> Result<(Registry, Vec<RegistryError>), RegistryError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| malformed("empty registry file"))?;
        let root_hex = header
            .strip_prefix(FILE_HEADER)
            .map(str::trim)
            .ok_or_else(|| malformed("missing ENREG1 header"))?;
        let root_bytes: [u8; 32] = hex::decode(root_hex)
            .map_err(|e| malformed(format!("root key: {e}")))?
            .try_into()
            .map_err(|_| malformed("root key must be 32 bytes"))?;
        let root = VerifyingKey::from_bytes(&root_bytes).map_err(|_| malformed("invalid root key"))?;
        let registry = Registry::new(root);
        let mut rejected = Vec::new();
        for (n, line) in lines.enumerate() {
            let entry = hex::decode(line.trim())
                .map_err(|e| malformed(format!("entry {}: {e}", n + 1)))
                .and_then(|bytes| RegistryEntry::decode(&bytes));
            match entry {
                Ok(entry) => {
                    let region = entry.record.region;
                    if let Registration::Rejected(reason) =
                        registry.register_backend(entry.record, entry.chain)
                    {
                        rejected.push(RegistryError::Rejected {
                            region: region.to_string(),
                            reason,
                        });
                    }
                }
                Err(err) => rejected.push(err),
            }
        }
        Ok((registry, rejected))
    }

    /// Parses a registry file, failing if any entry does not verify.
    pub fn parse(text: &str) -> Result<Registry, RegistryError> {
        let (registry, mut rejected) = Registry::parse_lenient(text)?;
        match rejected.pop() {
            None => Ok(registry),
            Some(err) => Err(err),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Registry, RegistryError> {
        Registry::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RegistryError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_file_string())?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AclEntry {
    /// A certificate subject, e.g. a region code.
    Subject(String),
    /// Any certificate issued (directly or transitively) by this authority.
    Issuer(String),
}

impl AclEntry {
    fn admits(&self, identity: &ClientIdentity) -> bool {
        match self {
            AclEntry::Subject(subject) => identity.subject == *subject,
            AclEntry::Issuer(issuer) => identity.issuers.iter().any(|i| i == issuer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessDecision {
    Allow,
    Deny,
}

/// Per-feed consumer allow lists. The public feed is open; the per-region feed
/// for `R` always admits `R`'s own backend; everything else must be listed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessControlList {
    entries: BTreeMap<FeedKind, BTreeSet<AclEntry>>,
}

impl AccessControlList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allow(&mut self, feed: FeedKind, entry: AclEntry) -> &mut Self {
        self.entries.entry(feed).or_default().insert(entry);
        self
    }

    /// Regions that have a per-region feed mentioned in this list.
    pub fn regions(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.entries.keys().filter_map(|feed| match feed {
            FeedKind::PerRegion(region) => Some(*region),
            _ => None,
        })
    }

    pub fn authorize(&self, feed: FeedKind, identity: Option<&ClientIdentity>) -> AccessDecision {
        authorize_feed(self, feed, identity)
    }
}

pub fn authorize_feed(
    acl: &AccessControlList,
    feed: FeedKind,
    identity: Option<&ClientIdentity>,
) -> AccessDecision {
    if feed == FeedKind::Public {
        return AccessDecision::Allow;
    }
    let Some(identity) = identity else {
        return AccessDecision::Deny;
    };
    if let FeedKind::PerRegion(region) = feed {
        if identity.subject == region.as_str() {
            return AccessDecision::Allow;
        }
    }
    let listed = acl
        .entries
        .get(&feed)
        .is_some_and(|entries| entries.iter().any(|entry| entry.admits(identity)));
    if listed {
        AccessDecision::Allow
    } else {
        AccessDecision::Deny
    }
}
