use std::sync::Arc;
use std::time::Duration;

use aegis::server::Background;
use aegis_core::clock::SystemClock;
use aegis_core::platform::StubFactory;
use aegis_core::{Platform, PlatformConfig};
use ureq::tls::{Certificate, RootCerts, TlsConfig};

#[test]
fn api_is_served_over_tls() {
    let generated = rcgen::generate_simple_self_signed(vec!["localhost".to_string()]).unwrap();
    let cert_pem = generated.cert.pem();
    let key_pem = generated.key_pair.serialize_pem();

    let platform = Arc::new(Platform::in_memory(
        PlatformConfig::default(),
        Arc::new(SystemClock),
        Arc::new(StubFactory),
    ));
    let server = Background::spawn_tls(
        aegis::api::router(platform),
        "127.0.0.1:0".parse().unwrap(),
        cert_pem.clone().into_bytes(),
        key_pem.into_bytes(),
    )
    .unwrap();
    let port = server.addr().port();

    let root = Certificate::from_pem(cert_pem.as_bytes()).unwrap();
    let tls = TlsConfig::builder()
        .root_certs(RootCerts::Specific(Arc::new(vec![root])))
        .build();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .tls_config(tls)
        .timeout_global(Some(Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .get(&format!("https://localhost:{port}/health"))
        .call()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert!(resp.body_mut().read_to_string().unwrap().contains("ok"));
    let resp = agent
        .get(&format!("https://localhost:{port}/services"))
        .call()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 401);

    // Without trusting the certificate the handshake fails.
    let strict: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .build()
        .into();
    assert!(strict
        .get(&format!("https://localhost:{port}/health"))
        .call()
        .is_err());
    // Plain HTTP to the TLS port gets no HTTP answer.
    let plain: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into();
    let r = plain.get(&format!("http://localhost:{port}/health")).call();
    assert!(r.map(|r| r.status().as_u16() != 200).unwrap_or(true));
}
