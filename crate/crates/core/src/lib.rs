//! Federated exposure-notification backend: key storage, signed feeds,
//! pull replication between regional backends, and the backend registry.

pub mod batch;
pub mod consumer;
pub mod domain;
pub mod journal;
pub mod keystore;
pub mod producer;
pub mod registry;
pub mod service;
pub mod transport;

pub use batch::{Batch, BatchError, FeedKind};
pub use consumer::{ConsumerError, PeerConfig, PeerState};
pub use domain::{
    ClusterId, ContactEvent, DiagnosisKey, RegionClassification, RegionId, ReplicationType,
    RollingProximityId, TemporaryExposureKey, Timestamp, VendorId, Visit,
};
pub use keystore::{DiagnosisKeyUpload, KeyStore, KeystoreError, RetentionPolicy};
pub use producer::{Producer, ProducerConfig, ProducerError};
pub use registry::{AccessControlList, BackendRecord, CertChain, Certificate, Registry};
pub use transport::{ClientIdentity, InProcessNetwork, Request, Response, Status, Transport};
pub use service::{BackendNode, BackendNodeConfig, Clock, ManualClock, NodeHandler, SystemClock};
