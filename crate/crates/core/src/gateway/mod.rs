//! Uniform interface to the vision-language analyst and text-embedding
//! backends.
//!
//! The gateway owns prompt templates, structured-output parsing, retries
//! with exponential backoff, the in-flight request cap, and the poison
//! store for requests that keep failing. Callers get typed operations;
//! which backend answers (remote HTTP or the synthetic oracle) is a config
//! detail.

mod backend;
mod limiter;
pub mod parse;
mod remote;
mod synthetic;
mod templates;

pub use backend::{AnalystRequest, Backend, BackendConfig, BackendError, RequestKind};
pub use limiter::{ConcurrencyLimiter, RetryPolicy};
pub use parse::{
    format_change_line, parse_abstractions, parse_change_line, parse_findings, parse_unusual,
    parse_yn, Finding, FindingError, ParseError,
};
pub use remote::RemoteBackend;
pub use synthetic::{
    AbstractionScript, LocationScript, PlantedChange, SyntheticBackend, SyntheticWorld,
};
pub use templates::{PromptTemplates, TEMPLATE_IDS};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ImageSequence, SeqImage};
use crate::detect::ChangeRecord;
use crate::embedding::{EmbeddingError, EmbeddingVector};
use crate::store::NdjsonAppender;

/// One change as reported by the analyst, before grounding and dedup.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawChange {
    pub before_desc: String,
    pub after_desc: String,
    /// 1-based index of the image the change happened after; valid values
    /// for a sequence of n images are 1..=n-1.
    pub after_index: usize,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template error: {0}")]
    Template(String),
    #[error("synthetic world error: {0}")]
    World(String),
    #[error("backend gave up on {kind} request {request_id}: {message}")]
    Backend {
        request_id: String,
        kind: String,
        message: String,
    },
    #[error("text must be non-empty")]
    EmptyText,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("poison store: {0}")]
    Poison(#[from] crate::store::StoreError),
    #[error("bad request: {0}")]
    BadRequest(String),
}

/// Gateway tuning knobs. `max_in_flight` defaults to 64 concurrent backend
/// requests.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Directory of template overrides; defaults ship compiled in.
    pub template_dir: Option<PathBuf>,
    /// Role the analyst plays in prompts.
    pub role: String,
    /// Where to record requests that exhausted their retries.
    pub poison_path: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 64,
            retry: RetryPolicy::default(),
            template_dir: None,
            role: "city analyst".to_string(),
            poison_path: None,
        }
    }
}

/// A request that exhausted its retries, as written to the poison store.
/// `kind` is one of the analyst kinds or `"embed_text"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub request_id: String,
    pub kind: String,
    pub attempts: u32,
    pub last_error: String,
}

/// Counters exposed by [`Gateway::stats`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub requests_by_kind: BTreeMap<String, u64>,
    pub embed_requests: u64,
    pub retries: u64,
    pub poisoned: u64,
    pub parse_errors: u64,
    /// Critic verdicts forced to "discard" because the backend failed.
    pub critic_conservative_false: u64,
    /// Membership verdicts forced to "no" because the backend failed.
    pub membership_conservative_false: u64,
    /// Highest number of simultaneously in-flight backend requests seen.
    pub high_water_in_flight: u64,
}

#[derive(Default)]
struct Counters {
    requests: [AtomicU64; RequestKind::ALL.len()],
    embeds: AtomicU64,
    retries: AtomicU64,
    poisoned: AtomicU64,
    parse_errors: AtomicU64,
    critic_conservative: AtomicU64,
    membership_conservative: AtomicU64,
}

fn kind_slot(kind: RequestKind) -> usize {
    RequestKind::ALL.iter().position(|k| *k == kind).expect("kind in ALL")
}

/// Result of one detection call: grounded findings plus per-line problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectOutcome {
    pub changes: Vec<RawChange>,
    pub errors: Vec<FindingError>,
}

/// Typed front door to the analyst backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    templates: PromptTemplates,
    limiter: ConcurrencyLimiter,
    retry: RetryPolicy,
    role: String,
    poison: Mutex<PoisonSink>,
    counters: Counters,
    next_id: AtomicU64,
}

struct PoisonSink {
    path: Option<PathBuf>,
    appender: Option<NdjsonAppender>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Result<Self, GatewayError> {
        let templates = match &config.template_dir {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::default(),
        };
        Ok(Self {
            backend,
            templates,
            limiter: ConcurrencyLimiter::new(config.max_in_flight),
            retry: config.retry,
            role: config.role,
            poison: Mutex::new(PoisonSink { path: config.poison_path, appender: None }),
            counters: Counters::default(),
            next_id: AtomicU64::new(1),
        })
    }

    /// Open a gateway over the synthetic world stored at `world_path`.
    pub fn synthetic(
        world_path: &std::path::Path,
        config: GatewayConfig,
    ) -> Result<Self, GatewayError> {
        let backend = BackendConfig::Synthetic { world_path: world_path.to_path_buf() }.build()?;
        Self::new(backend, config)
    }

    pub fn stats(&self) -> StatsSnapshot {
        let mut requests_by_kind = BTreeMap::new();
        for kind in RequestKind::ALL {
            requests_by_kind.insert(
                kind.as_str().to_string(),
                self.counters.requests[kind_slot(kind)].load(Ordering::SeqCst),
            );
        }
        StatsSnapshot {
            requests_by_kind,
            embed_requests: self.counters.embeds.load(Ordering::SeqCst),
            retries: self.counters.retries.load(Ordering::SeqCst),
            poisoned: self.counters.poisoned.load(Ordering::SeqCst),
            parse_errors: self.counters.parse_errors.load(Ordering::SeqCst),
            critic_conservative_false: self.counters.critic_conservative.load(Ordering::SeqCst),
            membership_conservative_false: self
                .counters
                .membership_conservative
                .load(Ordering::SeqCst),
            high_water_in_flight: self.limiter.high_water() as u64,
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.limit()
    }

    fn request(
        &self,
        kind: RequestKind,
        bindings: BTreeMap<String, String>,
        images: Vec<String>,
    ) -> Result<AnalystRequest, GatewayError> {
        if kind.needs_images() && images.is_empty() {
            return Err(GatewayError::BadRequest(format!(
                "{} request needs at least one image",
                kind.as_str()
            )));
        }
        let template_id = kind.as_str().to_string();
        let prompt = self.templates.render(&template_id, &bindings)?;
        let id = format!("req-{:08}", self.next_id.fetch_add(1, Ordering::SeqCst));
        Ok(AnalystRequest { id, kind, template_id, bindings, images, prompt })
    }

    /// Run one backend call through the limiter and retry policy;
    /// poison-record it if every attempt fails. The limiter slot is held
    /// only while an attempt is actually on the wire, not during backoff.
    fn run_backend<T>(
        &self,
        kind_label: &str,
        request_id: &str,
        op: impl Fn() -> Result<T, BackendError>,
    ) -> Result<T, GatewayError> {
        let mut attempts: u32 = 1;
        let result = self.retry.run(
            || {
                let _slot = self.limiter.acquire();
                op()
            },
            |tried, _| {
                attempts = tried + 1;
                self.counters.retries.fetch_add(1, Ordering::SeqCst);
            },
        );
        match result {
            Ok(v) => Ok(v),
            Err(err) => {
                self.record_poison(request_id, kind_label, attempts, &err)?;
                Err(GatewayError::Backend {
                    request_id: request_id.to_string(),
                    kind: kind_label.to_string(),
                    message: err.to_string(),
                })
            }
        }
    }

    fn complete(&self, request: &AnalystRequest) -> Result<String, GatewayError> {
        self.counters.requests[kind_slot(request.kind)].fetch_add(1, Ordering::SeqCst);
        self.run_backend(request.kind.as_str(), &request.id, || self.backend.complete(request))
    }

    fn record_poison(
        &self,
        request_id: &str,
        kind: &str,
        attempts: u32,
        err: &BackendError,
    ) -> Result<(), GatewayError> {
        self.counters.poisoned.fetch_add(1, Ordering::SeqCst);
        let mut sink = self.poison.lock().unwrap();
        if sink.appender.is_none() {
            if let Some(path) = sink.path.clone() {
                sink.appender = Some(NdjsonAppender::open(&path)?);
            }
        }
        if let Some(appender) = sink.appender.as_mut() {
            appender.append(&PoisonRecord {
                request_id: request_id.to_string(),
                kind: kind.to_string(),
                attempts,
                last_error: err.to_string(),
            })?;
            appender.sync()?;
        }
        Ok(())
    }

    fn image_lines(images: &[(usize, &SeqImage)]) -> String {
        images
            .iter()
            .map(|(no, img)| {
                format!("This is image No. {no}, taken in {}.", img.timestamp.format("%B %Y"))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Ask the analyst what changed across a sequence.
    ///
    /// Findings are grounded: an `after_index` outside `1..=len-1` becomes
    /// a per-line error instead of a change.
    pub fn detect_changes(&self, sequence: &ImageSequence) -> Result<DetectOutcome, GatewayError> {
        let numbered: Vec<(usize, &SeqImage)> =
            sequence.images.iter().enumerate().map(|(i, img)| (i + 1, img)).collect();
        let bindings = BTreeMap::from([
            ("image_lines".to_string(), Self::image_lines(&numbered)),
            ("role".to_string(), self.role.clone()),
            ("location_id".to_string(), sequence.location_id.clone()),
        ]);
        let images = sequence.images.iter().map(|img| img.uri.clone()).collect();
        let request = self.request(RequestKind::DetectChanges, bindings, images)?;
        let answer = self.complete(&request)?;

        let (findings, mut errors) = parse_findings(&answer);
        self.counters.parse_errors.fetch_add(errors.len() as u64, Ordering::SeqCst);
        let max_index = sequence.pair_count();
        let mut changes = Vec::new();
        for finding in findings {
            if finding.change.after_index >= 1 && finding.change.after_index <= max_index {
                changes.push(finding.change);
            } else {
                self.counters.parse_errors.fetch_add(1, Ordering::SeqCst);
                errors.push(FindingError {
                    line_no: finding.line_no,
                    line: format_change_line(&finding.change),
                    error: ParseError::BadIndex(format!(
                        "{} (sequence has {} images)",
                        finding.change.after_index,
                        sequence.images.len()
                    )),
                });
            }
        }
        errors.sort_by_key(|e| e.line_no);
        Ok(DetectOutcome { changes, errors })
    }

    /// One round of self-critique on a detected change, shown only its two
    /// evidence images. `true` keeps the change. Any failure — backend
    /// exhaustion, an unparseable verdict, or bad evidence positions —
    /// conservatively discards it and bumps a counter.
    pub fn self_critic(&self, change: &RawChange, sequence: &ImageSequence) -> bool {
        let verdict = self.try_self_critic(change, sequence);
        match verdict {
            Ok(keep) => keep,
            Err(_) => {
                self.counters.critic_conservative.fetch_add(1, Ordering::SeqCst);
                false
            }
        }
    }

    fn try_self_critic(
        &self,
        change: &RawChange,
        sequence: &ImageSequence,
    ) -> Result<bool, GatewayError> {
        let i = change.after_index;
        if i < 1 || i >= sequence.images.len() {
            return Err(GatewayError::BadRequest(format!(
                "evidence positions {i} and {} out of range for {} images",
                i + 1,
                sequence.images.len()
            )));
        }
        let evidence = [(i, &sequence.images[i - 1]), (i + 1, &sequence.images[i])];
        let bindings = BTreeMap::from([
            ("image_lines".to_string(), Self::image_lines(&evidence)),
            ("role".to_string(), self.role.clone()),
            ("location_id".to_string(), sequence.location_id.clone()),
            ("before".to_string(), change.before_desc.clone()),
            ("after".to_string(), change.after_desc.clone()),
            ("after_index".to_string(), change.after_index.to_string()),
        ]);
        let images = evidence.iter().map(|(_, img)| img.uri.clone()).collect();
        let request = self.request(RequestKind::SelfCritic, bindings, images)?;
        let answer = self.complete(&request)?;
        parse_yn(&answer).map_err(|e| {
            self.counters.parse_errors.fetch_add(1, Ordering::SeqCst);
            GatewayError::BadRequest(format!("unparseable critic answer: {e}"))
        })
    }

    /// Derive the abstraction ladder for a change: the cross product of
    /// place-detail levels and change-detail levels, full detail first.
    /// An answer with no parseable enumeration yields an empty list (and a
    /// counted diagnostic), not an error.
    pub fn derive_abstractions(&self, change: &ChangeRecord) -> Result<Vec<String>, GatewayError> {
        if change.after_desc.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let bindings = BTreeMap::from([
            ("before".to_string(), change.before_desc.clone()),
            ("after".to_string(), change.after_desc.clone()),
        ]);
        let request = self.request(RequestKind::DeriveAbstractions, bindings, Vec::new())?;
        let answer = self.complete(&request)?;
        match parse_abstractions(&answer) {
            Ok(texts) => Ok(texts),
            Err(_) => {
                self.counters.parse_errors.fetch_add(1, Ordering::SeqCst);
                Ok(Vec::new())
            }
        }
    }

    /// Does `change` belong to the group described by `trend_text`?
    /// Failures conservatively answer "no" and bump a counter.
    pub fn verify_membership(&self, change: &ChangeRecord, trend_text: &str) -> bool {
        self.verify_membership_text(&change.full_text(), trend_text)
    }

    /// Text-level membership check; see [`Gateway::verify_membership`].
    pub fn verify_membership_text(&self, change_text: &str, trend_text: &str) -> bool {
        match self.verify_membership_checked(change_text, trend_text) {
            Ok(member) => member,
            Err(_) => {
                self.counters.membership_conservative.fetch_add(1, Ordering::SeqCst);
                false
            }
        }
    }

    /// Membership check that surfaces backend failures instead of folding
    /// them into a conservative "no". Callers that need to distinguish a
    /// genuine negative from an unanswerable query (e.g. to report that a
    /// verification can no longer reach its threshold) use this form.
    pub fn verify_membership_checked(
        &self,
        change_text: &str,
        trend_text: &str,
    ) -> Result<bool, GatewayError> {
        if change_text.is_empty() || trend_text.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let bindings = BTreeMap::from([
            ("change".to_string(), change_text.to_string()),
            ("trend".to_string(), trend_text.to_string()),
        ]);
        let request = self.request(RequestKind::VerifyMembership, bindings, Vec::new())?;
        let answer = self.complete(&request)?;
        parse_yn(&answer).map_err(|e| {
            self.counters.parse_errors.fetch_add(1, Ordering::SeqCst);
            GatewayError::BadRequest(format!("unparseable membership answer: {e}"))
        })
    }

    /// Embed a text, normalized to unit length.
    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        self.counters.embeds.fetch_add(1, Ordering::SeqCst);
        let request_id = format!("req-{:08}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let values =
            self.run_backend("embed_text", &request_id, || self.backend.embed_text(text))?;
        Ok(EmbeddingVector::normalized(values)?)
    }

    /// Ask the analyst what is unusual in a single image.
    pub fn unusual_things(&self, image: &SeqImage) -> Result<Vec<String>, GatewayError> {
        let bindings = BTreeMap::from([
            ("image_lines".to_string(), Self::image_lines(&[(1, image)])),
            ("role".to_string(), self.role.clone()),
        ]);
        let request =
            self.request(RequestKind::UnusualThings, bindings, vec![image.uri.clone()])?;
        let answer = self.complete(&request)?;
        Ok(parse_unusual(&answer))
    }
}
