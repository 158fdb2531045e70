//! Request/response contract shared by the feed endpoints and their clients.
//!
//! Two bindings implement it: the in-process [`InProcessNetwork`] used by the
//! simulator and tests, and a mutually authenticated TLS binding in `en-net`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

/// The authenticated peer behind a request, as established by the transport.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientIdentity {
    /// Certificate subject; for backends, the region code.
    pub subject: String,
    /// Issuing authorities, nearest first.
    pub issuers: Vec<String>,
}

impl ClientIdentity {
    pub fn new(subject: impl Into<String>, issuers: impl IntoIterator<Item = String>) -> Self {
        ClientIdentity {
            subject: subject.into(),
            issuers: issuers.into_iter().collect(),
        }
    }
}

impl fmt::Display for ClientIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.subject)?;
        for issuer in &self.issuers {
            write!(f, " <- {issuer}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: Method,
    pub path: String,
    pub identity: Option<ClientIdentity>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn get(path: impl Into<String>) -> Self {
        Request {
            method: Method::Get,
            path: path.into(),
            identity: None,
            body: Vec::new(),
        }
    }

    pub fn post(path: impl Into<String>, body: Vec<u8>) -> Self {
        Request {
            method: Method::Post,
            path: path.into(),
            identity: None,
            body,
        }
    }

    pub fn with_identity(mut self, identity: Option<ClientIdentity>) -> Self {
        self.identity = identity;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Ok,
    /// End of feed: nothing newer yet.
    NoContent,
    BadRequest,
    Unauthorized,
    Forbidden,
    NotFound,
    MethodNotAllowed,
    /// The requested batch was dropped by retention.
    Gone,
    Internal,
    Unavailable,
}

impl Status {
    pub fn code(self) -> u16 {
        match self {
            Status::Ok => 200,
            Status::NoContent => 204,
            Status::BadRequest => 400,
            Status::Unauthorized => 401,
            Status::Forbidden => 403,
            Status::NotFound => 404,
            Status::MethodNotAllowed => 405,
            Status::Gone => 410,
            Status::Internal => 500,
            Status::Unavailable => 503,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            200 => Status::Ok,
            204 => Status::NoContent,
            400 => Status::BadRequest,
            401 => Status::Unauthorized,
            403 => Status::Forbidden,
            404 => Status::NotFound,
            405 => Status::MethodNotAllowed,
            410 => Status::Gone,
            500 => Status::Internal,
            503 => Status::Unavailable,
            _ => return None,
        })
    }

    pub fn reason(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::NoContent => "No Content",
            Status::BadRequest => "Bad Request",
            Status::Unauthorized => "Unauthorized",
            Status::Forbidden => "Forbidden",
            Status::NotFound => "Not Found",
            Status::MethodNotAllowed => "Method Not Allowed",
            Status::Gone => "Gone",
            Status::Internal => "Internal Server Error",
            Status::Unavailable => "Service Unavailable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(status: Status, body: impl Into<Vec<u8>>) -> Self {
        Response {
            status,
            body: body.into(),
        }
    }

    pub fn empty(status: Status) -> Self {
        Response {
            status,
            body: Vec::new(),
        }
    }
}

pub trait Handler: Send + Sync {
    fn handle(&self, request: Request) -> Response;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("authentication failed: {0}")]
    Handshake(String),
    #[error("transport failure: {0}")]
    Io(String),
}

/// Client side of the contract. `credential` names the client certificate to
/// present; `None` means an anonymous (public feed) request.
pub trait Transport: Send + Sync {
    fn send(
        &self,
        base_url: &str,
        credential: Option<&str>,
        request: Request,
    ) -> Result<Response, TransportError>;
}

/// Bytes and requests observed on one (client, endpoint) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkTraffic {
    pub requests: u64,
    pub response_bytes: u64,
}

/// Endpoints registered by URL, called synchronously with injected identities.
#[derive(Default)]
pub struct InProcessNetwork {
    endpoints: RwLock<HashMap<String, Arc<dyn Handler>>>,
    credentials: RwLock<HashMap<String, ClientIdentity>>,
    offline: RwLock<HashSet<String>>,
    traffic: Mutex<BTreeMap<(String, String), LinkTraffic>>,
}

impl fmt::Debug for InProcessNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InProcessNetwork").finish_non_exhaustive()
    }
}

impl InProcessNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, base_url: impl Into<String>, handler: Arc<dyn Handler>) {
        self.endpoints
            .write()
            .expect("network lock poisoned")
            .insert(base_url.into(), handler);
    }

    /// Makes `credential` present as `identity` during the simulated handshake.
    pub fn register_credential(&self, credential: impl Into<String>, identity: ClientIdentity) {
        self.credentials
            .write()
            .expect("network lock poisoned")
            .insert(credential.into(), identity);
    }

    pub fn set_offline(&self, base_url: &str, offline: bool) {
        let mut set = self.offline.write().expect("network lock poisoned");
        if offline {
            set.insert(base_url.to_owned());
        } else {
            set.remove(base_url);
        }
    }

    /// Traffic per (client label, endpoint URL); anonymous clients are labelled `-`.
    pub fn traffic(&self) -> BTreeMap<(String, String), LinkTraffic> {
        self.traffic.lock().expect("network lock poisoned").clone()
    }
}

impl Transport for InProcessNetwork {
    fn send(
        &self,
        base_url: &str,
        credential: Option<&str>,
        request: Request,
    ) -> Result<Response, TransportError> {
        if self
            .offline
            .read()
            .expect("network lock poisoned")
            .contains(base_url)
        {
            return Err(TransportError::Unreachable(base_url.to_owned()));
        }
        let handler = self
            .endpoints
            .read()
            .expect("network lock poisoned")
            .get(base_url)
            .cloned()
            .ok_or_else(|| TransportError::Unreachable(base_url.to_owned()))?;
        let identity = match credential {
            None => None,
            Some(credential) => Some(
                self.credentials
                    .read()
                    .expect("network lock poisoned")
                    .get(credential)
                    .cloned()
                    .ok_or_else(|| {
                        TransportError::Handshake(format!("unknown client certificate {credential}"))
                    })?,
            ),
        };
        let label = identity
            .as_ref()
            .map_or_else(|| "-".to_owned(), |id| id.subject.clone());
        let response = handler.handle(request.with_identity(identity));
        let mut traffic = self.traffic.lock().expect("network lock poisoned");
        let entry = traffic.entry((label, base_url.to_owned())).or_default();
        entry.requests += 1;
        entry.response_bytes += response.body.len() as u64;
        Ok(response)
    }
}
