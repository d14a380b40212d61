//! HTTP client for an external captioning service.
//!
//! Wire format: `POST {endpoint}/caption` with `{"image": "<base64 png>"}`,
//! answered by `{"caption": "<text>"}`.

use std::thread;
use std::time::Duration;

use base64::Engine;
use log::warn;
use serde::Deserialize;
use vlmir_data::ImageTensor;

use crate::error::{CaptionError, Result};

#[derive(Debug, Clone)]
pub struct RemoteCaptioner {
    endpoint: String,
    timeout: Duration,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: Option<String>,
}

impl RemoteCaptioner {
    /// `retries` counts attempts after the first one. Waits between attempts
    /// double, starting from 200 ms.
    pub fn new(endpoint: &str, timeout: Duration, retries: u32) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            timeout,
            retries,
            backoff: Duration::from_millis(200),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn with_backoff(mut self, initial: Duration) -> Self {
        self.backoff = initial;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn caption(&self, image: &ImageTensor) -> Result<String> {
        let png = image.to_png_bytes()?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(png)
        })
        .to_string();

        let attempts = self.retries + 1;
        let mut wait = self.backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(caption) => return Ok(caption),
                Err(e) if e.is_transient() => {
                    warn!("caption attempt {attempt}/{attempts} failed: {e}");
                    last = e.to_string();
                    if attempt < attempts {
                        thread::sleep(wait);
                        wait *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(CaptionError::ProviderUnavailable { attempts, last })
    }

    fn attempt(&self, body: &str) -> Result<String> {
        let url = format!("{}/caption", self.endpoint);
        let mut response = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(transport)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(CaptionError::Status { status, body: text });
        }
        let parsed: CaptionResponse =
            serde_json::from_str(&text).map_err(|e| CaptionError::MalformedResponse(e.to_string()))?;
        match parsed.caption {
            Some(c) if !c.trim().is_empty() => Ok(c.trim().to_string()),
            Some(_) => Err(CaptionError::MalformedResponse("empty caption".into())),
            None => Err(CaptionError::MalformedResponse("missing `caption` field".into())),
        }
    }
}

fn transport(e: ureq::Error) -> CaptionError {
    match e {
        ureq::Error::Timeout(_) => CaptionError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => CaptionError::Timeout,
        other => CaptionError::Transport(other.to_string()),
    }
}
