//! Prompt templates: external text assets with `{name}` placeholders.
//!
//! The shipped defaults are compiled in; `from_dir` swaps any or all of
//! them for files on disk so prompts can be iterated without rebuilding.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::GatewayError;

pub const TEMPLATE_IDS: [&str; 5] = [
    "detect_changes",
    "self_critic",
    "derive_abstractions",
    "verify_membership",
    "unusual_things",
];

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            "detect_changes".to_string(),
            include_str!("../../assets/prompts/detect_changes.txt").to_string(),
        );
        templates.insert(
            "self_critic".to_string(),
            include_str!("../../assets/prompts/self_critic.txt").to_string(),
        );
        templates.insert(
            "derive_abstractions".to_string(),
            include_str!("../../assets/prompts/derive_abstractions.txt").to_string(),
        );
        templates.insert(
            "verify_membership".to_string(),
            include_str!("../../assets/prompts/verify_membership.txt").to_string(),
        );
        templates.insert(
            "unusual_things".to_string(),
            include_str!("../../assets/prompts/unusual_things.txt").to_string(),
        );
        Self { templates }
    }
}

impl PromptTemplates {
    /// Start from the compiled-in defaults and override any template that
    /// has a `<id>.txt` file in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let mut this = Self::default();
        for id in TEMPLATE_IDS {
            let path = dir.join(format!("{id}.txt"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    GatewayError::Template(format!("cannot read {}: {e}", path.display()))
                })?;
                this.templates.insert(id.to_string(), text);
            }
        }
        Ok(this)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    /// Render template `id`, substituting every `{name}` placeholder from
    /// `bindings`. A placeholder without a binding is an error — prompts
    /// must never go out half-filled.
    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, GatewayError> {
        let template = self
            .templates
            .get(id)
            .ok_or_else(|| GatewayError::Template(format!("unknown template {id:?}")))?;
        let mut missing: Vec<String> = Vec::new();
        let rendered = placeholder_re().replace_all(template, |caps: &regex::Captures<'_>| {
            let name = &caps[1];
            match bindings.get(name) {
                Some(value) => value.clone(),
                None => {
                    missing.push(name.to_string());
                    String::new()
                }
            }
        });
        if !missing.is_empty() {
            missing.dedup();
            return Err(GatewayError::Template(format!(
                "template {id:?} is missing bindings for: {}",
                missing.join(", ")
            )));
        }
        Ok(rendered.into_owned())
    }
}
