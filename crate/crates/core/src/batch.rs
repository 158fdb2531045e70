//! Canonical batch encoding.
//!
//! ```text
//! offset size  field
//!      0    4  magic "ENKB"
//!      4    1  version (1)
//!      5    1  feed kind (0 public, 1 a2a, 2 per-region)
//!      6    2  feed region (ASCII, zero unless per-region)
//!      8    8  batch id (big endian)
//!     16    8  produced_at, seconds (big endian)
//!     24    4  key count n (big endian)
//!     28 20*n  key records: 16 key bytes + valid_day (big endian u32)
//!   28+20n  64  ed25519 signature over bytes [0, 28+20n)
//! ```

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use thiserror::Error;

use crate::domain::{DiagnosisKey, RegionId, Timestamp};

pub const BATCH_MAGIC: &[u8; 4] = b"ENKB";
pub const BATCH_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;
pub const KEY_RECORD_LEN: usize = 20;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BatchError {
    #[error("malformed batch: {0}")]
    Malformed(String),
    #[error("batch signature does not verify")]
    BadSignature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeedKind {
    /// The smartphone feed: local and remote keys.
    Public,
    /// Local keys only, for all-to-all peers.
    A2A,
    /// Local keys whose uploader declared the region.
    PerRegion(RegionId),
}

impl FeedKind {
    pub fn path(&self) -> String {
        match self {
            FeedKind::Public => "/v1/keys".to_owned(),
            FeedKind::A2A => "/v1/a2a/keys".to_owned(),
            FeedKind::PerRegion(region) => format!("/v1/{region}/keys"),
        }
    }

    pub fn chunk_path(&self, chunk: u64) -> String {
        format!("{}/{chunk}", self.path())
    }

    /// Parses a feed path, returning the feed and optional chunk number.
    pub fn parse_path(path: &str) -> Option<(FeedKind, Option<u64>)> {
        let rest = path.strip_prefix("/v1/")?;
        let segments: Vec<&str> = rest.trim_end_matches('/').split('/').collect();
        let (kind, tail) = match segments.as_slice() {
            ["keys", tail @ ..] => (FeedKind::Public, tail),
            ["a2a", "keys", tail @ ..] => (FeedKind::A2A, tail),
            [region, "keys", tail @ ..] => (FeedKind::PerRegion(region.parse().ok()?), tail),
            _ => return None,
        };
        match tail {
            [] => Some((kind, None)),
            [chunk] if !chunk.is_empty() && chunk.bytes().all(|b| b.is_ascii_digit()) => {
                Some((kind, Some(chunk.parse().ok()?)))
            }
            _ => None,
        }
    }

    fn code(&self) -> (u8, [u8; 2]) {
        match self {
            FeedKind::Public => (0, [0; 2]),
            FeedKind::A2A => (1, [0; 2]),
            FeedKind::PerRegion(region) => (2, region.as_bytes()),
        }
    }

    /// Directory-safe label, used for on-disk feed storage.
    pub fn label(&self) -> String {
        match self {
            FeedKind::Public => "public".into(),
            FeedKind::A2A => "a2a".into(),
            FeedKind::PerRegion(region) => format!("region-{region}"),
        }
    }
}

impl fmt::Display for FeedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Batch {
    pub feed_kind: FeedKind,
    pub batch_id: u64,
    pub produced_at: Timestamp,
    pub keys: Vec<DiagnosisKey>,
    pub signature: [u8; SIGNATURE_LEN],
}

impl fmt::Debug for Batch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Batch")
            .field("feed_kind", &self.feed_kind)
            .field("batch_id", &self.batch_id)
            .field("produced_at", &self.produced_at)
            .field("keys", &self.keys.len())
            .finish()
    }
}

impl Batch {
    pub fn sign(
        feed_kind: FeedKind,
        batch_id: u64,
        produced_at: Timestamp,
        keys: Vec<DiagnosisKey>,
        signing_key: &SigningKey,
    ) -> Self {
        let mut batch = Batch {
            feed_kind,
            batch_id,
            produced_at,
            keys,
            signature: [0; SIGNATURE_LEN],
        };
        batch.signature = signing_key.sign(&batch.signed_bytes()).to_bytes();
        batch
    }

    /// The header and key records: the region covered by the signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.keys.len() * KEY_RECORD_LEN);
        let (kind, region) = self.feed_kind.code();
        out.extend_from_slice(BATCH_MAGIC);
        out.push(BATCH_VERSION);
        out.push(kind);
        out.extend_from_slice(&region);
        out.extend_from_slice(&self.batch_id.to_be_bytes());
        out.extend_from_slice(&self.produced_at.secs().to_be_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_be_bytes());
        for key in &self.keys {
            out.extend_from_slice(key.bytes());
            out.extend_from_slice(&key.valid_day().to_be_bytes());
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BatchError> {
        let malformed = |msg: &str| BatchError::Malformed(msg.to_owned());
        if bytes.len() < HEADER_LEN + SIGNATURE_LEN {
            return Err(malformed("shorter than header and signature"));
        }
        if &bytes[0..4] != BATCH_MAGIC {
            return Err(malformed("bad magic"));
        }
        if bytes[4] != BATCH_VERSION {
            return Err(BatchError::Malformed(format!("unsupported version {}", bytes[4])));
        }
        let region = [bytes[6], bytes[7]];
        let feed_kind = match bytes[5] {
            0 | 1 if region != [0, 0] => return Err(malformed("region set on non-region feed")),
            0 => FeedKind::Public,
            1 => FeedKind::A2A,
            2 => FeedKind::PerRegion(
                RegionId::from_bytes(region).map_err(|_| malformed("bad feed region"))?,
            ),
            other => return Err(BatchError::Malformed(format!("unknown feed kind {other}"))),
        };
        let batch_id = u64::from_be_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let produced_at = u64::from_be_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let count = u32::from_be_bytes(bytes[24..28].try_into().expect("4 bytes")) as usize;
        let expected = count
            .checked_mul(KEY_RECORD_LEN)
            .and_then(|n| n.checked_add(HEADER_LEN + SIGNATURE_LEN))
            .ok_or_else(|| malformed("key count overflows"))?;
        if bytes.len() != expected {
            return Err(BatchError::Malformed(format!(
                "length {} does not match {count} keys ({expected})",
                bytes.len()
            )));
        }
        let keys = bytes[HEADER_LEN..HEADER_LEN + count * KEY_RECORD_LEN]
            .chunks_exact(KEY_RECORD_LEN)
            .map(|record| {
                let mut key = [0u8; 16];
                key.copy_from_slice(&record[..16]);
                let day = u32::from_be_bytes(record[16..20].try_into().expect("4 bytes"));
                DiagnosisKey::new(key, day)
            })
            .collect();
        let mut signature = [0u8; SIGNATURE_LEN];
        signature.copy_from_slice(&bytes[expected - SIGNATURE_LEN..]);
        Ok(Batch {
            feed_kind,
            batch_id,
            produced_at: Timestamp(produced_at),
            keys,
            signature,
        })
    }

    pub fn verify(&self, key: &VerifyingKey) -> Result<(), BatchError> {
        let signature = Signature::from_bytes(&self.signature);
        key.verify(&self.signed_bytes(), &signature)
            .map_err(|_| BatchError::BadSignature)
    }

    /// Verifies against any of `keys`.
    pub fn verify_any<'a>(
        &self,
        keys: impl IntoIterator<Item = &'a VerifyingKey>,
    ) -> Result<(), BatchError> {
        let signed = self.signed_bytes();
        let signature = Signature::from_bytes(&self.signature);
        if keys
            .into_iter()
            .any(|key| key.verify(&signed, &signature).is_ok())
        {
            Ok(())
        } else {
            Err(BatchError::BadSignature)
        }
    }

    pub fn decode_verified(bytes: &[u8], key: &VerifyingKey) -> Result<Self, BatchError> {
        let batch = Batch::decode(bytes)?;
        batch.verify(key)?;
        Ok(batch)
    }
}

/// Checks a raw batch encoding for leaked regional information.
///
/// The only region code permitted outside the key records is the feed's own
/// region in a per-region header; the byte length must account for exactly the
/// header, the key records and the signature, so there is nowhere else to hide
/// data. `forbidden` byte strings (e.g. serialized declared-region sets) must not
/// appear anywhere in the encoding.
pub fn scan_for_region_leaks(bytes: &[u8], forbidden: &[Vec<u8>]) -> Result<(), String> {
    let batch = Batch::decode(bytes).map_err(|e| e.to_string())?;
    if batch.encode() != bytes {
        return Err("encoding is not canonical".into());
    }
    for pattern in forbidden {
        if !pattern.is_empty() && bytes.windows(pattern.len()).any(|w| w == pattern.as_slice()) {
            return Err(format!(
                "batch {} on {} contains forbidden pattern {:?}",
                batch.batch_id,
                batch.feed_kind,
                String::from_utf8_lossy(pattern)
            ));
        }
    }
    Ok(())
}
