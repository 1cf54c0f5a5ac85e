//! The backend abstraction: anything that can answer analyst prompts and
//! embed text.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What a request is asking the analyst to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    DetectChanges,
    SelfCritic,
    DeriveAbstractions,
    VerifyMembership,
    UnusualThings,
}

impl RequestKind {
    pub const ALL: [RequestKind; 5] = [
        RequestKind::DetectChanges,
        RequestKind::SelfCritic,
        RequestKind::DeriveAbstractions,
        RequestKind::VerifyMembership,
        RequestKind::UnusualThings,
    ];

    /// Kinds that must carry at least one image reference.
    pub fn needs_images(self) -> bool {
        matches!(
            self,
            RequestKind::DetectChanges | RequestKind::SelfCritic | RequestKind::UnusualThings
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::DetectChanges => "detect_changes",
            RequestKind::SelfCritic => "self_critic",
            RequestKind::DeriveAbstractions => "derive_abstractions",
            RequestKind::VerifyMembership => "verify_membership",
            RequestKind::UnusualThings => "unusual_things",
        }
    }
}

/// A fully rendered analyst request.
///
/// `bindings` carries the template variables that produced `prompt`; the
/// synthetic backend reads them instead of re-parsing the prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystRequest {
    pub id: String,
    pub kind: RequestKind,
    pub template_id: String,
    pub bindings: BTreeMap<String, String>,
    /// Ordered image references; must be non-empty for image-bearing kinds.
    pub images: Vec<String>,
    pub prompt: String,
}

/// Backend failures, split by whether retrying can help.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Timeouts, rate limits, 5xx — worth retrying.
    #[error("transient backend error: {0}")]
    Transient(String),
    /// Malformed requests, auth failures — retrying cannot help.
    #[error("permanent backend error: {0}")]
    Permanent(String),
}

/// An analyst/embedding provider. Implementations must be safe to call from
/// many worker threads at once; the gateway enforces the in-flight cap.
pub trait Backend: Send + Sync {
    /// Answer a rendered prompt with free text in the protocol's answer
    /// format for `request.kind`.
    fn complete(&self, request: &AnalystRequest) -> Result<String, BackendError>;

    /// Embed a text into a dense vector (normalization happens gateway-side).
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError>;
}

/// Backend selection, as written in config files.
///
/// Secrets never appear inline: `auth_env` names an environment variable
/// that holds the credential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        auth_env: Option<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
    Synthetic {
        world_path: PathBuf,
    },
}

impl BackendConfig {
    /// Instantiate the configured backend.
    pub fn build(&self) -> Result<Arc<dyn Backend>, super::GatewayError> {
        match self {
            BackendConfig::Remote { endpoint, model, auth_env, timeout_ms } => {
                Ok(Arc::new(super::remote::RemoteBackend::new(
                    endpoint.clone(),
                    model.clone(),
                    auth_env.clone(),
                    timeout_ms.map(std::time::Duration::from_millis),
                )))
            }
            BackendConfig::Synthetic { world_path } => {
                let world = super::synthetic::SyntheticWorld::load(world_path)?;
                Ok(Arc::new(super::synthetic::SyntheticBackend::new(world)))
            }
        }
    }
}
