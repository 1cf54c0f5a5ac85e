//! Deterministic synthetic backend: a scripted world stands in for the
//! vision-language analyst.
//!
//! The world file plants, per location, the changes the "analyst" will
//! report (optionally flagged as hallucinations the critic should reject),
//! plus abstraction tables, trend-membership tables, unusual-thing findings,
//! and embedding overrides. Answers are rendered in the exact wire formats
//! the gateway's parsers consume, so swapping this backend for a remote one
//! changes only answer *content*, never answer handling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::{AnalystRequest, Backend, BackendError, RequestKind};
use super::parse::format_change_line;
use super::RawChange;
use crate::embedding::hash_embedding;

/// A change the scripted analyst reports for a location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedChange {
    /// 1-based index of the image the change happened after.
    pub after_index: usize,
    pub before: String,
    pub after: String,
    /// Hallucinations are still *reported* by detection, but the critic
    /// (and ground truth) reject them.
    #[serde(default)]
    pub hallucination: bool,
}

impl PlantedChange {
    pub fn full_text(&self) -> String {
        format!("Before: {} After: {}", self.before, self.after)
    }
}

/// Everything the scripted analyst knows about one location.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocationScript {
    #[serde(default)]
    pub changes: Vec<PlantedChange>,
}

/// A scripted abstraction table for one change text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionScript {
    /// Texts in (place level, change level) order.
    pub texts: Vec<String>,
    /// Optional grid shape (p_levels, c_levels); must multiply to
    /// `texts.len()`. Defaults to a 1 x len grid.
    #[serde(default)]
    pub grid: Option<(usize, usize)>,
}

/// The scripted world: lookup tables for every analyst question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    /// Dimension of embeddings produced by this world.
    pub embed_dim: usize,
    /// Seed for the fallback hash-embedding of unscripted texts.
    pub embed_seed: u64,
    /// Raw (pre-normalization) embedding overrides by exact text.
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f32>>,
    /// Location id -> scripted detection output.
    #[serde(default)]
    pub locations: BTreeMap<String, LocationScript>,
    /// Change full text -> scripted abstraction table.
    #[serde(default)]
    pub abstractions: BTreeMap<String, AbstractionScript>,
    /// Change full text -> trend texts it belongs to (besides the implicit
    /// "identical text" membership).
    #[serde(default)]
    pub memberships: BTreeMap<String, BTreeSet<String>>,
    /// Image uri -> scripted unusual-thing findings.
    #[serde(default)]
    pub unusual: BTreeMap<String, Vec<String>>,
    /// Image uri -> raw image-embedding override.
    #[serde(default)]
    pub image_embeddings: BTreeMap<String, Vec<f32>>,
    /// Image uri -> caption, for caption-then-embed scoring.
    #[serde(default)]
    pub captions: BTreeMap<String, String>,
}

impl SyntheticWorld {
    pub fn new(embed_dim: usize, embed_seed: u64) -> Self {
        Self {
            embed_dim,
            embed_seed,
            embeddings: BTreeMap::new(),
            locations: BTreeMap::new(),
            abstractions: BTreeMap::new(),
            memberships: BTreeMap::new(),
            unusual: BTreeMap::new(),
            image_embeddings: BTreeMap::new(),
            captions: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, super::GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            super::GatewayError::World(format!("cannot read world {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            super::GatewayError::World(format!("bad world file {}: {e}", path.display()))
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), super::GatewayError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| super::GatewayError::World(format!("cannot serialize world: {e}")))?;
        std::fs::write(path, text).map_err(|e| {
            super::GatewayError::World(format!("cannot write world {}: {e}", path.display()))
        })
    }

    /// The script for `location_id`, falling back to the id with its last
    /// `/`-separated segment removed. Capture-point ids are commonly
    /// `<location>/<nn>`, and detection asks by selected-point id.
    pub fn location_script(&self, location_id: &str) -> Option<&LocationScript> {
        if let Some(script) = self.locations.get(location_id) {
            return Some(script);
        }
        let prefix = location_id.rsplit_once('/')?.0;
        self.locations.get(prefix)
    }

    /// Ground-truth membership: scripted pairs plus identical-text identity.
    pub fn is_member(&self, change_text: &str, trend_text: &str) -> bool {
        if change_text == trend_text {
            return true;
        }
        self.memberships
            .get(change_text)
            .map(|trends| trends.contains(trend_text))
            .unwrap_or(false)
    }

    /// Ground-truth critic verdict for a change at a location: true iff a
    /// planted, non-hallucinated change matches by text and index.
    pub fn is_genuine(&self, location_id: &str, change: &RawChange) -> bool {
        self.location_script(location_id)
            .map(|script| {
                script.changes.iter().any(|planted| {
                    !planted.hallucination
                        && planted.after_index == change.after_index
                        && planted.before == change.before_desc
                        && planted.after == change.after_desc
                })
            })
            .unwrap_or(false)
    }

    pub fn raw_embedding(&self, text: &str) -> Vec<f32> {
        match self.embeddings.get(text) {
            Some(values) => values.clone(),
            None => hash_embedding(self.embed_seed, text, self.embed_dim)
                .values()
                .to_vec(),
        }
    }

    /// Raw image embedding: the override if scripted, otherwise a hash
    /// embedding of the uri in a namespace separate from text embeddings.
    pub fn raw_image_embedding(&self, uri: &str) -> Vec<f32> {
        match self.image_embeddings.get(uri) {
            Some(values) => values.clone(),
            None => hash_embedding(self.embed_seed, &format!("[image] {uri}"), self.embed_dim)
                .values()
                .to_vec(),
        }
    }
}

/// Backend that answers from a [`SyntheticWorld`].
pub struct SyntheticBackend {
    world: SyntheticWorld,
}

impl SyntheticBackend {
    pub fn new(world: SyntheticWorld) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn binding<'r>(req: &'r AnalystRequest, name: &str) -> Result<&'r str, BackendError> {
        req.bindings
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| BackendError::Permanent(format!("missing binding {name:?}")))
    }

    fn answer_detect(&self, req: &AnalystRequest) -> Result<String, BackendError> {
        let location_id = Self::binding(req, "location_id")?;
        let script = self.world.location_script(location_id);
        let mut out = String::new();
        if let Some(script) = script {
            for (i, planted) in script.changes.iter().enumerate() {
                let line = format_change_line(&RawChange {
                    before_desc: planted.before.clone(),
                    after_desc: planted.after.clone(),
                    after_index: planted.after_index,
                });
                out.push_str(&format!("{}. {line}\n", i + 1));
            }
        }
        if out.is_empty() {
            out.push_str("No changes found.\n");
        }
        Ok(out)
    }

    fn answer_critic(&self, req: &AnalystRequest) -> Result<String, BackendError> {
        let location_id = Self::binding(req, "location_id")?;
        let change = RawChange {
            before_desc: Self::binding(req, "before")?.to_string(),
            after_desc: Self::binding(req, "after")?.to_string(),
            after_index: Self::binding(req, "after_index")?
                .parse()
                .map_err(|_| BackendError::Permanent("bad after_index binding".into()))?,
        };
        if self.world.is_genuine(location_id, &change) {
            Ok("Answer: Y.\nReason: The claimed change is visible in the images.\n".into())
        } else {
            Ok("Answer: N.\nReason: The claimed change can not be confirmed from the images.\n"
                .into())
        }
    }

    fn answer_abstractions(&self, req: &AnalystRequest) -> Result<String, BackendError> {
        let before = Self::binding(req, "before")?;
        let after = Self::binding(req, "after")?;
        // Mirror ChangeRecord::full_text so scripts keyed by it also cover
        // single-image pseudo-changes, whose before side is empty.
        let full_text = if before.is_empty() {
            after.to_string()
        } else {
            format!("Before: {before} After: {after}")
        };
        let fallback = AbstractionScript { texts: vec![full_text.clone()], grid: None };
        let script = self.world.abstractions.get(&full_text).unwrap_or(&fallback);
        let (p_levels, c_levels) = match script.grid {
            Some((p, c)) if p * c == script.texts.len() => (p, c),
            Some((p, c)) => {
                return Err(BackendError::Permanent(format!(
                    "abstraction grid {p}x{c} does not fit {} texts",
                    script.texts.len()
                )))
            }
            None => (1, script.texts.len()),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "There are {p_levels} levels of details on where the change happened:\n"
        ));
        for p in 1..=p_levels {
            out.push_str(&format!("p{p}. Level {p} of the place.\n"));
        }
        out.push_str(&format!(
            "Meanwhile, there are {c_levels} levels of details on the change itself:\n"
        ));
        for c in 1..=c_levels {
            out.push_str(&format!("c{c}. Level {c} of the change.\n"));
        }
        out.push_str("\nAnswer:\n");
        for (i, text) in script.texts.iter().enumerate() {
            let p = i / c_levels + 1;
            let c = i % c_levels + 1;
            out.push_str(&format!("(p{p} + c{c}) {text}\n"));
        }
        Ok(out)
    }

    fn answer_membership(&self, req: &AnalystRequest) -> Result<String, BackendError> {
        let change = Self::binding(req, "change")?;
        let trend = Self::binding(req, "trend")?;
        if self.world.is_member(change, trend) {
            Ok("Answer: Y.\nReason: The change generalizes to the group description.\n".into())
        } else {
            Ok("Answer: N.\nReason: The change does not generalize to the group description.\n"
                .into())
        }
    }

    fn answer_unusual(&self, req: &AnalystRequest) -> Result<String, BackendError> {
        let image = req
            .images
            .first()
            .ok_or_else(|| BackendError::Permanent("unusual_things request without image".into()))?;
        match self.world.unusual.get(image) {
            Some(findings) if !findings.is_empty() => {
                let mut out = String::new();
                for (i, f) in findings.iter().enumerate() {
                    out.push_str(&format!("{}. {f}\n", i + 1));
                }
                Ok(out)
            }
            _ => Ok("None.\n".into()),
        }
    }
}

impl crate::detect::ImageEmbedder for SyntheticBackend {
    fn embed_image(
        &self,
        uri: &str,
    ) -> Result<crate::embedding::EmbeddingVector, crate::detect::DetectError> {
        Ok(crate::embedding::EmbeddingVector::normalized(
            self.world.raw_image_embedding(uri),
        )?)
    }
}

impl Backend for SyntheticBackend {
    fn complete(&self, request: &AnalystRequest) -> Result<String, BackendError> {
        match request.kind {
            RequestKind::DetectChanges => self.answer_detect(request),
            RequestKind::SelfCritic => self.answer_critic(request),
            RequestKind::DeriveAbstractions => self.answer_abstractions(request),
            RequestKind::VerifyMembership => self.answer_membership(request),
            RequestKind::UnusualThings => self.answer_unusual(request),
        }
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::Permanent("cannot embed empty text".into()));
        }
        Ok(self.world.raw_embedding(text))
    }
}
