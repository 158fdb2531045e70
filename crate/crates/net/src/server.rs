use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use en_core::transport::{Handler, Response, Status};
use log::{debug, warn};
use rustls::{ServerConfig, ServerConnection, StreamOwned};

use crate::http::{read_request, write_response};
use crate::identity::{verify_peer_certificate, TlsIdentity};
use crate::tls::server_config;
use crate::NetError;

const IO_TIMEOUT: Duration = Duration::from_secs(10);

/// HTTPS listener serving one handler, one thread per connection.
pub struct TlsServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TlsServer {
    pub fn bind(
        addr: &str,
        identity: &TlsIdentity,
        trusted_root: VerifyingKey,
        handler: Arc<dyn Handler>,
    ) -> Result<Self, NetError> {
        let config = server_config(identity, trusted_root)?;
        let listener = TcpListener::bind(addr).map_err(|e| NetError::Io(format!("bind {addr}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| NetError::Io(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let stop = stop.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match stream {
                        Ok(stream) => {
                            let config = config.clone();
                            let handler = handler.clone();
                            thread::spawn(move || {
                                if let Err(e) = serve(stream, config, handler.as_ref(), &trusted_root) {
                                    debug!("connection closed with error: {e}");
                                }
                            });
                        }
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
            })
        };
        Ok(TlsServer {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// `https://127.0.0.1:<port>` style base URL of this listener.
    pub fn base_url(&self) -> String {
        format!("https://{}", self.addr)
    }

    /// Stops accepting; connections already being served run to completion.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(thread) = self.thread.take() {
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = thread.join();
        }
    }
}

impl Drop for TlsServer {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn serve(
    tcp: TcpStream,
    config: Arc<ServerConfig>,
    handler: &dyn Handler,
    trusted_root: &VerifyingKey,
) -> io::Result<()> {
    tcp.set_read_timeout(Some(IO_TIMEOUT))?;
    tcp.set_write_timeout(Some(IO_TIMEOUT))?;
    let conn = ServerConnection::new(config).map_err(io::Error::other)?;
    let mut stream = StreamOwned::new(conn, tcp);
    let response = match read_request(&mut stream) {
        Ok(mut request) => {
            // The verifier already accepted the certificate; this only
            // recovers the identity it vouches for.
            request.identity = stream
                .conn
                .peer_certificates()
                .and_then(|certs| certs.first())
                .and_then(|der| verify_peer_certificate(der, trusted_root).ok())
                .map(|chain| chain.identity());
            handler.handle(request)
        }
        Err(e) if e.kind() == io::ErrorKind::InvalidData && stream.conn.is_handshaking() => return Err(e),
        Err(e) if e.kind() == io::ErrorKind::InvalidData => Response::new(Status::BadRequest, e.to_string()),
        Err(e) => return Err(e),
    };
    write_response(&mut stream, &response)?;
    stream.conn.send_close_notify();
    stream.flush()
}
