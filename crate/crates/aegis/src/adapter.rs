//! HTTP model adapter: `POST {endpoint}/predict` with a JSON
//! [`AdapterRequest`], answered by an [`AdapterResponse`].

use std::sync::Arc;
use std::time::Duration;

use aegis_core::gateway::{
    AdapterError, AdapterRequest, AdapterResponse, ModelAdapter, StubAdapter,
};
use aegis_core::platform::{AdapterFactory, STUB_SCHEME};

#[derive(Debug)]
pub struct HttpAdapter {
    url: String,
    agent: ureq::Agent,
}

impl HttpAdapter {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/predict", endpoint.trim_end_matches('/')),
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn transport(e: ureq::Error) -> AdapterError {
    match e {
        ureq::Error::Timeout(_) => AdapterError::Timeout,
        ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => {
            AdapterError::Timeout
        }
        ureq::Error::HostNotFound | ureq::Error::ConnectionFailed | ureq::Error::Io(_) => {
            AdapterError::Unreachable(e.to_string())
        }
        other => AdapterError::Protocol(other.to_string()),
    }
}

impl ModelAdapter for HttpAdapter {
    fn predict(&self, request: &AdapterRequest) -> Result<AdapterResponse, AdapterError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(transport)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_json::<AdapterResponse>()
                .map_err(|e| AdapterError::Protocol(format!("response body: {e}"))),
            502..=504 => Err(AdapterError::Unreachable(format!("HTTP {status}"))),
            _ => {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                Err(AdapterError::Protocol(format!(
                    "HTTP {status}: {}",
                    text.trim()
                )))
            }
        }
    }
}

/// `http://` and `https://` endpoints go over the network; `stub:` endpoints
/// use the in-process stub model.
#[derive(Debug, Clone, Default)]
pub struct HttpFactory;

impl AdapterFactory for HttpFactory {
    fn adapter(&self, endpoint: &str, timeout: Duration) -> Result<Arc<dyn ModelAdapter>, String> {
        if endpoint.starts_with(STUB_SCHEME) {
            Ok(Arc::new(StubAdapter::default()))
        } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            Ok(Arc::new(HttpAdapter::new(endpoint, timeout)))
        } else {
            Err(format!("unsupported endpoint `{endpoint}`"))
        }
    }
}
