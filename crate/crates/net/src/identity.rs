//! X.509 wrapping of the federation's certificate chains.
//!
//! TLS needs X.509 end-entity certificates, the federation trusts its own
//! compact chains. Each backend therefore presents a self-issued X.509
//! certificate for its region key that carries the encoded chain in a
//! private extension. A peer is accepted when the embedded chain verifies
//! under the trusted root and the certificate key is the region key named by
//! the chain; the TLS handshake itself proves possession of that key.

use ed25519_dalek::pkcs8::EncodePrivateKey;
use ed25519_dalek::{SigningKey, VerifyingKey};
use en_core::registry::{verify_chain, CertChain, ChainVerdict};
use rcgen::{CertificateParams, CustomExtension, DistinguishedName, DnType, KeyPair, PKCS_ED25519};
use rustls::pki_types::{CertificateDer, PrivatePkcs8KeyDer};
use x509_parser::prelude::{FromDer, X509Certificate};

use crate::NetError;

/// Private-arc OID of the extension holding the encoded chain.
pub const CHAIN_EXTENSION_OID: &[u64] = &[1, 3, 6, 1, 4, 1, 61027, 1, 1];
const ED25519_OID: &str = "1.3.101.112";

/// Everything a backend needs to authenticate itself over TLS.
pub struct TlsIdentity {
    chain: CertChain,
    cert: CertificateDer<'static>,
    key: PrivatePkcs8KeyDer<'static>,
}

impl std::fmt::Debug for TlsIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TlsIdentity").field("chain", &self.chain).finish_non_exhaustive()
    }
}

impl TlsIdentity {
    /// `key` must be the private key of the chain's region certificate.
    pub fn new(chain: CertChain, key: &SigningKey) -> Result<Self, NetError> {
        if chain.region.public_key != key.verifying_key() {
            return Err(NetError::Identity("key does not match the region certificate".into()));
        }
        let pkcs8 = key
            .to_pkcs8_der()
            .map_err(|e| NetError::Identity(format!("pkcs8 encoding: {e}")))?;
        let key_der = PrivatePkcs8KeyDer::from(pkcs8.as_bytes().to_vec());
        let pair = KeyPair::from_pkcs8_der_and_sign_algo(&key_der, &PKCS_ED25519)
            .map_err(|e| NetError::Identity(e.to_string()))?;
        let mut params = CertificateParams::new(Vec::<String>::new()).map_err(|e| NetError::Identity(e.to_string()))?;
        let mut name = DistinguishedName::new();
        name.push(DnType::CommonName, chain.region.subject.clone());
        params.distinguished_name = name;
        params
            .custom_extensions
            .push(CustomExtension::from_oid_content(CHAIN_EXTENSION_OID, chain.encode()));
        let cert = params
            .self_signed(&pair)
            .map_err(|e| NetError::Identity(e.to_string()))?;
        Ok(TlsIdentity {
            chain,
            cert: cert.der().clone(),
            key: key_der,
        })
    }

    pub fn chain(&self) -> &CertChain {
        &self.chain
    }

    pub fn certificate(&self) -> &CertificateDer<'static> {
        &self.cert
    }

    pub(crate) fn private_key(&self) -> PrivatePkcs8KeyDer<'static> {
        self.key.clone_key()
    }
}

/// Checks a presented certificate and returns the chain it vouches for.
pub fn verify_peer_certificate(der: &[u8], trusted_root: &VerifyingKey) -> Result<CertChain, String> {
    let (_, cert) = X509Certificate::from_der(der).map_err(|e| format!("not an X.509 certificate: {e}"))?;
    let wanted = CHAIN_EXTENSION_OID
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(".");
    let extension = cert
        .extensions()
        .iter()
        .find(|e| e.oid.to_id_string() == wanted)
        .ok_or("certificate carries no federation chain")?;
    let chain = CertChain::decode(extension.value).map_err(|e| e.to_string())?;
    if let ChainVerdict::Invalid { link, reason } = verify_chain(&chain, trusted_root) {
        return Err(format!("chain invalid at {link:?} link: {reason}"));
    }
    let spki = cert.public_key();
    if spki.algorithm.algorithm.to_id_string() != ED25519_OID {
        return Err("certificate key is not ed25519".into());
    }
    if spki.subject_public_key.data.as_ref() != chain.region.public_key.as_bytes() {
        return Err("certificate key is not the region key of its chain".into());
    }
    Ok(chain)
}
