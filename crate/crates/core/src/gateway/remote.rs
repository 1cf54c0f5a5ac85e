//! Remote HTTP backend.
//!
//! Speaks a small JSON protocol: `POST {endpoint}/complete` with the
//! rendered prompt and image references, answering `{"text": ...}`, and
//! `POST {endpoint}/embed` answering `{"values": [...]}`. Credentials are
//! looked up from the environment variable named in the config; the
//! config itself never stores a secret.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::backend::{AnalystRequest, Backend, BackendError};

pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    auth_env: Option<String>,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    values: Vec<f32>,
}

impl RemoteBackend {
    pub fn new(
        endpoint: String,
        model: String,
        auth_env: Option<String>,
        timeout: Option<Duration>,
    ) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(timeout.unwrap_or(Duration::from_secs(120)))
            .build();
        Self {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model,
            auth_env,
        }
    }

    fn auth_header(&self) -> Result<Option<String>, BackendError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(secret) if !secret.is_empty() => Ok(Some(format!("Bearer {secret}"))),
                Ok(_) => Err(BackendError::Permanent(format!(
                    "auth environment variable {var} is empty"
                ))),
                Err(_) => Err(BackendError::Permanent(format!(
                    "auth environment variable {var} is not set"
                ))),
            },
        }
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String, BackendError> {
        let url = format!("{}/{path}", self.endpoint);
        let mut req = self.agent.post(&url);
        if let Some(header) = self.auth_header()? {
            req = req.set("Authorization", &header);
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| BackendError::Transient(format!("reading response body: {e}"))),
            // 429 and 5xx are worth retrying; other statuses are on us.
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code} from {url}: {}", detail.trim());
                if code == 429 || code >= 500 {
                    Err(BackendError::Transient(msg))
                } else {
                    Err(BackendError::Permanent(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => {
                Err(BackendError::Transient(format!("transport error for {url}: {t}")))
            }
        }
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &AnalystRequest) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "kind": request.kind.as_str(),
            "request_id": request.id,
            "prompt": request.prompt,
            "images": request.images,
        });
        let raw = self.post("complete", body)?;
        let parsed: CompleteResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Permanent(format!("malformed completion response: {e}")))?;
        Ok(parsed.text)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::Permanent("cannot embed empty text".into()));
        }
        let body = json!({ "model": self.model, "text": text });
        let raw = self.post("embed", body)?;
        let parsed: EmbedResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Permanent(format!("malformed embedding response: {e}")))?;
        Ok(parsed.values)
    }
}
