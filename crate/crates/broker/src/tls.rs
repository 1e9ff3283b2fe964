use std::sync::Arc;

use mqware::connector::tls::{load_certs, load_private_key, load_root_store, provider};
use rustls::server::WebPkiClientVerifier;
use rustls::ServerConfig;

use crate::config::ServerTlsConfig;
use crate::BrokerError;

pub fn server_config(tls: &ServerTlsConfig) -> Result<Arc<ServerConfig>, BrokerError> {
    let certs = load_certs(&tls.cert_path).map_err(BrokerError::Tls)?;
    let key = load_private_key(&tls.key_path).map_err(BrokerError::Tls)?;
    let provider = provider();
    let builder = ServerConfig::builder_with_provider(provider.clone())
        .with_safe_default_protocol_versions()
        .map_err(|e| BrokerError::Tls(e.to_string()))?;
    let builder = match &tls.client_ca_path {
        Some(ca) => {
            let roots = Arc::new(load_root_store(ca).map_err(BrokerError::Tls)?);
            let verifier = WebPkiClientVerifier::builder_with_provider(roots, provider);
            let verifier = if tls.require_client_cert {
                verifier
            } else {
                verifier.allow_unauthenticated()
            };
            builder.with_client_cert_verifier(verifier.build().map_err(|e| BrokerError::Tls(e.to_string()))?)
        }
        None => builder.with_no_client_auth(),
    };
    let config = builder
        .with_single_cert(certs, key)
        .map_err(|e| BrokerError::Tls(e.to_string()))?;
    Ok(Arc::new(config))
}

/// Subject common name of a DER certificate.
pub fn common_name(der: &[u8]) -> Option<String> {
    let (_, cert) = x509_parser::parse_x509_certificate(der).ok()?;
    let cn = cert.subject().iter_common_name().next()?.as_str().ok()?.to_string();
    Some(cn)
}
