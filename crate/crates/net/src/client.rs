use std::collections::HashMap;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use en_core::transport::{Request, Response, Transport, TransportError};
use rustls::pki_types::ServerName;
use rustls::{ClientConfig, ClientConnection, StreamOwned};

use crate::http::{read_response, write_request};
use crate::identity::TlsIdentity;
use crate::tls::client_config;
use crate::NetError;

/// Placeholder SNI for hosts that are bare IP addresses or otherwise not
/// valid DNS names.
const FALLBACK_SERVER_NAME: &str = "en-backend";

/// HTTPS client side. Credentials name the client certificates registered
/// with [`TlsTransport::add_credential`].
pub struct TlsTransport {
    trusted_root: VerifyingKey,
    anonymous: Arc<ClientConfig>,
    credentials: RwLock<HashMap<String, Arc<ClientConfig>>>,
    timeout: Duration,
}

impl TlsTransport {
    pub fn new(trusted_root: VerifyingKey) -> Result<Self, NetError> {
        Ok(TlsTransport {
            trusted_root,
            anonymous: client_config(None, trusted_root)?,
            credentials: RwLock::new(HashMap::new()),
            timeout: Duration::from_secs(10),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn add_credential(&self, name: impl Into<String>, identity: &TlsIdentity) -> Result<(), NetError> {
        let config = client_config(Some(identity), self.trusted_root)?;
        self.credentials
            .write()
            .expect("credentials lock")
            .insert(name.into(), config);
        Ok(())
    }
}

/// Splits `https://host:port[/prefix]` into the authority and path prefix.
fn split_url(base_url: &str) -> Result<(&str, &str), TransportError> {
    let rest = base_url
        .strip_prefix("https://")
        .ok_or_else(|| TransportError::Unreachable(format!("not an https url: {base_url}")))?;
    let (authority, prefix) = match rest.find('/') {
        Some(i) => (&rest[..i], rest[i..].trim_end_matches('/')),
        None => (rest, ""),
    };
    if authority.is_empty() {
        return Err(TransportError::Unreachable(format!("no host in {base_url}")));
    }
    Ok((authority, prefix))
}

fn host_of(authority: &str) -> &str {
    if let Some(rest) = authority.strip_prefix('[') {
        return rest.split(']').next().unwrap_or(rest);
    }
    authority.rsplit_once(':').map_or(authority, |(host, _)| host)
}

fn classify(e: io::Error) -> TransportError {
    // rustls reports protocol and certificate failures as InvalidData.
    if e.kind() == io::ErrorKind::InvalidData {
        TransportError::Handshake(e.to_string())
    } else {
        TransportError::Io(e.to_string())
    }
}

impl Transport for TlsTransport {
    fn send(&self, base_url: &str, credential: Option<&str>, mut request: Request) -> Result<Response, TransportError> {
        let config = match credential {
            None => self.anonymous.clone(),
            Some(name) => self
                .credentials
                .read()
                .expect("credentials lock")
                .get(name)
                .cloned()
                .ok_or_else(|| TransportError::Handshake(format!("no client certificate named {name}")))?,
        };
        let (authority, prefix) = split_url(base_url)?;
        let with_port = if authority.contains(':') && !authority.ends_with(']') {
            authority.to_owned()
        } else {
            format!("{authority}:443")
        };
        let addr = with_port
            .to_socket_addrs()
            .map_err(|e| TransportError::Unreachable(format!("{authority}: {e}")))?
            .next()
            .ok_or_else(|| TransportError::Unreachable(format!("{authority}: no address")))?;
        let tcp = TcpStream::connect_timeout(&addr, self.timeout)
            .map_err(|e| TransportError::Unreachable(format!("{authority}: {e}")))?;
        tcp.set_read_timeout(Some(self.timeout)).map_err(classify)?;
        tcp.set_write_timeout(Some(self.timeout)).map_err(classify)?;

        let host = host_of(authority);
        let name = ServerName::try_from(host.to_owned())
            .or_else(|_| ServerName::try_from(FALLBACK_SERVER_NAME))
            .map_err(|e| TransportError::Handshake(e.to_string()))?;
        let conn = ClientConnection::new(config, name).map_err(|e| TransportError::Handshake(e.to_string()))?;
        let mut stream = StreamOwned::new(conn, tcp);
        stream.conn.complete_io(&mut stream.sock).map_err(classify)?;

        if !prefix.is_empty() {
            request.path = format!("{prefix}{}", request.path);
        }
        write_request(&mut stream, authority, &request).map_err(classify)?;
        read_response(&mut stream).map_err(classify)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_split_into_authority_and_prefix() {
        assert_eq!(split_url("https://it.example:8443").unwrap(), ("it.example:8443", ""));
        assert_eq!(split_url("https://it.example/en/").unwrap(), ("it.example", "/en"));
        assert!(split_url("http://it.example").is_err());
        assert!(split_url("https://").is_err());
        assert_eq!(host_of("127.0.0.1:9"), "127.0.0.1");
        assert_eq!(host_of("[::1]:9"), "::1");
        assert_eq!(host_of("it.example"), "it.example");
    }
}
