//! HTTP client implementing [`GuidanceProvider`] over the wire protocol.
//!
//! The remote provider operates in pixel space: encode is the identity and
//! the pullback passes gradients through unchanged. Latent-space guidance
//! would need the encoder Jacobian on this side of the wire, which a remote
//! endpoint cannot supply; rather than approximate it silently, such
//! providers are not supported here.

use std::io::Read;
use std::time::Duration;

use crate::error::{Error, Result, TransportError};
use crate::imagebuf::ImageBuf;

use super::wire;
use super::GuidanceProvider;

/// Upper bound on response payloads (64 MB); a malformed server cannot make
/// us allocate unboundedly.
const MAX_RESPONSE_BYTES: u64 = 64 * 1024 * 1024;

pub struct RemoteProvider {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteProvider {
    /// Builds a client without touching the network.
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout.min(Duration::from_secs(10)))
            .timeout(timeout)
            .build();
        RemoteProvider { base_url: endpoint.trim_end_matches('/').to_string(), agent }
    }

    /// Builds a client and verifies the endpoint speaks protocol version 1.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let provider = Self::new(endpoint, timeout);
        let version = provider.health()?;
        if version.trim() != wire::PROTOCOL_VERSION {
            return Err(TransportError::Malformed(format!(
                "unsupported protocol version {version:?} (want {})",
                wire::PROTOCOL_VERSION
            ))
            .into());
        }
        Ok(provider)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    fn map_err(&self, url: &str, err: ureq::Error) -> Error {
        match err {
            ureq::Error::Status(status, _) => {
                TransportError::Status { url: url.to_string(), status }.into()
            }
            ureq::Error::Transport(t) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("timeout") {
                    TransportError::Timeout { url: url.to_string() }.into()
                } else {
                    TransportError::Connect { url: url.to_string(), msg }.into()
                }
            }
        }
    }

    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>> {
        let url = self.url(path);
        let response = self
            .agent
            .post(&url)
            .set("Content-Type", "application/octet-stream")
            .send_bytes(body)
            .map_err(|e| self.map_err(&url, e))?;
        let mut bytes = Vec::new();
        response
            .into_reader()
            .take(MAX_RESPONSE_BYTES)
            .read_to_end(&mut bytes)
            .map_err(|e| TransportError::Malformed(format!("reading response body: {e}")))?;
        Ok(bytes)
    }

    fn expect_shape(&self, got: &ImageBuf, like: &ImageBuf) -> Result<()> {
        if !got.same_shape(like) {
            return Err(TransportError::DimensionMismatch {
                expected: format!("{}x{}x{}", like.height, like.width, like.channels),
                got: format!("{}x{}x{}", got.height, got.width, got.channels),
            }
            .into());
        }
        Ok(())
    }
}

impl GuidanceProvider for RemoteProvider {
    fn health(&self) -> Result<String> {
        let url = self.url(wire::HEALTH_PATH);
        let response = self.agent.get(&url).call().map_err(|e| self.map_err(&url, e))?;
        response
            .into_string()
            .map_err(|e| TransportError::Malformed(format!("health body: {e}")).into())
    }

    fn predict_noise(
        &self,
        z_t: &ImageBuf,
        noise: &ImageBuf,
        timestep: f64,
        prompt: &str,
        seed: u64,
    ) -> Result<ImageBuf> {
        let body = wire::encode_predict_noise_request(z_t, noise, timestep, prompt, seed);
        let bytes = self.post(wire::PREDICT_NOISE_PATH, &body)?;
        let predicted = wire::decode_response(&bytes)?;
        self.expect_shape(&predicted, z_t)?;
        if !predicted.is_finite() {
            return Err(TransportError::Malformed("non-finite predicted noise".into()).into());
        }
        Ok(predicted)
    }

    fn encode(&self, image: &ImageBuf) -> Result<ImageBuf> {
        Ok(image.clone())
    }

    fn encode_pullback(&self, _image: &ImageBuf, upstream: &ImageBuf) -> Result<ImageBuf> {
        Ok(upstream.clone())
    }

    fn denoise(
        &self,
        image: &ImageBuf,
        noise_level: f64,
        prompt: &str,
        seed: u64,
    ) -> Result<ImageBuf> {
        let body = wire::encode_denoise_request(image, noise_level, prompt, seed);
        let bytes = self.post(wire::DENOISE_PATH, &body)?;
        let refined = wire::decode_response(&bytes)?;
        self.expect_shape(&refined, image)?;
        if !refined.is_finite() {
            return Err(TransportError::Malformed("non-finite refined image".into()).into());
        }
        Ok(refined)
    }
}

/// Parses `--provider` style selectors: `oracle` or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSelector {
    Oracle,
    Remote(String),
}

impl std::str::FromStr for ProviderSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "oracle" {
            Ok(ProviderSelector::Oracle)
        } else if let Some(url) = s.strip_prefix("remote:") {
            if url.is_empty() {
                Err(Error::invalid("remote provider needs a URL, e.g. remote:http://host:port"))
            } else {
                Ok(ProviderSelector::Remote(url.to_string()))
            }
        } else {
            Err(Error::invalid(format!(
                "unknown provider {s:?}; expected 'oracle' or 'remote:URL'"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_selector_parses() {
        assert_eq!("oracle".parse::<ProviderSelector>().unwrap(), ProviderSelector::Oracle);
        assert_eq!(
            "remote:http://127.0.0.1:9".parse::<ProviderSelector>().unwrap(),
            ProviderSelector::Remote("http://127.0.0.1:9".into())
        );
        assert!("remote:".parse::<ProviderSelector>().is_err());
        assert!("other".parse::<ProviderSelector>().is_err());
    }

    #[test]
    fn unreachable_endpoint_is_a_typed_transport_error() {
        // Reserved port with nothing listening.
        let provider = RemoteProvider::new("http://127.0.0.1:1", Duration::from_millis(200));
        match provider.health() {
            Err(Error::Transport(_)) => {}
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
