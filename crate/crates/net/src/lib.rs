//! Mutually authenticated HTTPS binding of the backend transport.
//!
//! Servers always present their region certificate. Clients present one when
//! they hold a credential for the target (peer backends pulling a restricted
//! feed) and connect anonymously otherwise (apps, public feed readers).

mod client;
mod http;
mod identity;
mod server;
mod tls;

use thiserror::Error;

pub use client::TlsTransport;
pub use identity::{verify_peer_certificate, TlsIdentity, CHAIN_EXTENSION_OID};
pub use server::TlsServer;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("invalid TLS identity: {0}")]
    Identity(String),
    #[error("TLS configuration: {0}")]
    Tls(String),
    #[error("{0}")]
    Io(String),
}
