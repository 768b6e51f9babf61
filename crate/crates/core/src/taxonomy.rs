//! Structural roles and the hierarchical semantic tag vocabulary.
//!
//! A [`TagRegistry`] holds every tag path that the parser will recognise as
//! component markup. The built-in registry carries the full semantic
//! component hierarchy; overlays may add tags and roles but never remove
//! built-ins.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Deepest tag path supported (`instruction:guideline:cot`).
pub const MAX_TAG_DEPTH: usize = 3;

/// The four roles every registry carries.
pub const BUILTIN_ROLES: [&str; 4] = ["system", "user", "assistant", "tools"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("invalid identifier segment {segment:?} in {raw:?}")]
    InvalidIdentifier { raw: String, segment: String },
    #[error("tag {raw:?} has depth {depth}, maximum is {MAX_TAG_DEPTH}")]
    DepthExceeded { raw: String, depth: usize },
    #[error("unknown tag {raw:?}")]
    UnknownTag { raw: String },
    #[error("invalid role name {0:?}")]
    InvalidRole(String),
    #[error("role {0:?} collides with a built-in role")]
    RoleCollision(String),
    #[error("failed to read registry overlay {path}: {reason}")]
    Overlay { path: String, reason: String },
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// A structural role such as `system` or `user`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Role(String);

impl Role {
    pub fn new(name: impl Into<String>) -> Result<Self, TaxonomyError> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(TaxonomyError::InvalidRole(name));
        }
        Ok(Role(name))
    }

    pub fn system() -> Self {
        Role("system".into())
    }

    pub fn user() -> Self {
        Role("user".into())
    }

    pub fn assistant() -> Self {
        Role("assistant".into())
    }

    pub fn tools() -> Self {
        Role("tools".into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }

    pub fn is_builtin(&self) -> bool {
        BUILTIN_ROLES.contains(&self.0.as_str())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Hierarchical semantic component identifier, e.g. `instruction:guideline:cot`.
///
/// Segments match `[a-z][a-z0-9_]*`; depth is between 1 and [`MAX_TAG_DEPTH`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TagPath {
    segments: Vec<String>,
}

impl TagPath {
    /// Parses a canonical tag, lowercasing and trimming first.
    pub fn parse(raw: &str) -> Result<Self, TaxonomyError> {
        let normalized = raw.trim().to_lowercase();
        let segments: Vec<String> = normalized.split(':').map(str::to_owned).collect();
        if segments.len() > MAX_TAG_DEPTH {
            return Err(TaxonomyError::DepthExceeded {
                raw: raw.to_owned(),
                depth: segments.len(),
            });
        }
        if let Some(bad) = segments.iter().find(|s| !is_identifier(s)) {
            return Err(TaxonomyError::InvalidIdentifier {
                raw: raw.to_owned(),
                segment: bad.clone(),
            });
        }
        Ok(TagPath { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    /// The depth-1 ancestor (the path itself when already top level).
    pub fn category(&self) -> TagPath {
        TagPath {
            segments: vec![self.segments[0].clone()],
        }
    }

    /// All prefixes from depth 1 up to and including `self`.
    pub fn prefixes(&self) -> impl Iterator<Item = TagPath> + '_ {
        (1..=self.segments.len()).map(move |n| TagPath {
            segments: self.segments[..n].to_vec(),
        })
    }

    /// Segment-wise prefix test: `instruction` is a prefix of
    /// `instruction:task` but `tools` is not a prefix of `tools_prompt`.
    pub fn starts_with(&self, prefix: &TagPath) -> bool {
        self.segments.len() >= prefix.segments.len() && self.segments[..prefix.segments.len()] == prefix.segments[..]
    }

    pub fn canonical(&self) -> String {
        self.segments.join(":")
    }
}

impl fmt::Display for TagPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for TagPath {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TagPath::parse(s)
    }
}

impl Serialize for TagPath {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for TagPath {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        TagPath::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Built-in semantic components: canonical path and a short description.
pub const BUILTIN_TAGS: &[(&str, &str)] = &[
    (
        "instruction",
        "High-level directive component that guides the model's behavior",
    ),
    ("instruction:task", "Task related instruction"),
    (
        "instruction:guideline",
        "Non-task specific instructions that shape response behavior",
    ),
    (
        "instruction:guideline:role",
        "Directives for the model to assume a specific role",
    ),
    (
        "instruction:guideline:scenario",
        "Context setting for the task environment",
    ),
    (
        "instruction:guideline:behavioral",
        "Instructions for model conduct and interaction style",
    ),
    ("instruction:guideline:emotion", "Guidelines for emotional tone"),
    ("instruction:guideline:cot", "Directives for showing reasoning process"),
    (
        "instruction:guideline:safety",
        "Guidelines ensuring safe and ethical responses",
    ),
    ("contextual_ref", "Background information and supporting materials"),
    (
        "contextual_ref:fewshot",
        "Sample input-output pairs for in-context learning",
    ),
    ("contextual_ref:knowledge_base", "Reference information or facts"),
    ("contextual_ref:context_for_task", "Relevant background information"),
    ("output_const", "Specifications for response format and limitations"),
    ("output_const:label", "Defined set of possible output categories"),
    ("output_const:wordlimit", "Restrictions on response length"),
    ("output_const:format", "Structure requirements for the response"),
    ("output_const:style_tone", "Requirements for writing style"),
    ("tools", "Specifications for tool usage"),
    ("tools:tool_name", "Identifier for specific tool"),
    ("tools:tool_description", "Explanation of tool functionality"),
    ("tools:parameters", "Required inputs and configuration"),
    ("request_query", "The primary query or task from user"),
    ("response", "Semantic component for model output"),
    ("response:answer", "Direct answer to the request or question"),
    (
        "response:peripheral_explanation",
        "Supporting information and clarifications",
    ),
    ("other", "Additional functional elements"),
    ("other:adversarial", "Components designed for adversarial purpose"),
    ("historical_context", "Pointer to the previous conversation history"),
    ("system_prompt", "Pointer to the system prompt"),
    ("tools_prompt", "Pointer to the tools prompt"),
];

/// Set of recognised tag paths (closed under prefix) plus registered roles.
///
/// Immutable once built; share it behind `&` or `Arc` across workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagRegistry {
    entries: BTreeMap<TagPath, String>,
    roles: BTreeSet<Role>,
}

impl Default for TagRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TagRegistry {
    /// Registry with the built-in roles and no tags.
    pub fn empty() -> Self {
        TagRegistry {
            entries: BTreeMap::new(),
            roles: BUILTIN_ROLES.iter().map(|r| Role(r.to_string())).collect(),
        }
    }

    /// Registry with every built-in tag and role.
    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        for (path, description) in BUILTIN_TAGS {
            let path = TagPath::parse(path).expect("built-in tags are valid");
            registry.entries.insert(path, description.to_string());
        }
        registry
    }

    /// Adds `raw` and any missing prefixes. Existing descriptions are kept,
    /// so re-registering is idempotent.
    pub fn register_tag(&mut self, raw: &str, description: &str) -> Result<TagPath, TaxonomyError> {
        let path = TagPath::parse(raw)?;
        for prefix in path.prefixes() {
            let text = if prefix == path {
                description.to_owned()
            } else {
                String::new()
            };
            self.entries.entry(prefix).or_insert(text);
        }
        Ok(path)
    }

    pub fn register_role(&mut self, name: &str) -> Result<Role, TaxonomyError> {
        let role = Role::new(name)?;
        if role.is_builtin() {
            return Err(TaxonomyError::RoleCollision(name.to_owned()));
        }
        self.roles.insert(role.clone());
        Ok(role)
    }

    /// Validates raw tag text against the registry.
    pub fn validate_tag(&self, raw: &str) -> Result<TagPath, TaxonomyError> {
        let unknown = || TaxonomyError::UnknownTag { raw: raw.to_owned() };
        let path = TagPath::parse(raw).map_err(|_| unknown())?;
        if self.entries.contains_key(&path) {
            Ok(path)
        } else {
            Err(unknown())
        }
    }

    /// Exact lookup on canonical text, used by the parser on markup names.
    pub fn lookup_canonical(&self, name: &str) -> Option<&TagPath> {
        // canonical text is already lowercase; reject anything that would need normalising
        if name.is_empty() || name.len() != name.trim().len() {
            return None;
        }
        let path = TagPath::parse(name).ok()?;
        if path.canonical() != name {
            return None;
        }
        self.entries.get_key_value(&path).map(|(k, _)| k)
    }

    pub fn contains(&self, path: &TagPath) -> bool {
        self.entries.contains_key(path)
    }

    pub fn description(&self, path: &TagPath) -> Option<&str> {
        self.entries.get(path).map(String::as_str)
    }

    pub fn has_role(&self, role: &Role) -> bool {
        self.roles.contains(role)
    }

    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.roles.iter()
    }

    pub fn tags(&self) -> impl Iterator<Item = (&TagPath, &str)> {
        self.entries.iter().map(|(k, v)| (k, v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Depth-1 tags sorted by canonical text.
    pub fn top_level_categories(&self) -> Vec<TagPath> {
        let mut top: Vec<TagPath> = self.entries.keys().filter(|p| p.depth() == 1).cloned().collect();
        top.sort_by_key(TagPath::canonical);
        top
    }

    /// Applies an overlay file mapping canonical tag to description.
    ///
    /// `.json` files are read as a JSON object, everything else as TOML.
    pub fn load_overlay(&mut self, path: &Path) -> Result<usize, TaxonomyError> {
        let overlay_err = |reason: String| TaxonomyError::Overlay {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| overlay_err(e.to_string()))?;
        let map: BTreeMap<String, String> = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| overlay_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| overlay_err(e.to_string()))?
        };
        for (tag, description) in &map {
            self.register_tag(tag, description)?;
        }
        Ok(map.len())
    }

    /// SHA-256 over tags, descriptions and roles; printed for provenance.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (path, description) in &self.entries {
            hasher.update(path.canonical().as_bytes());
            hasher.update([0x1f]);
            hasher.update(description.as_bytes());
            hasher.update([0x1e]);
        }
        for role in &self.roles {
            hasher.update(b"role:");
            hasher.update(role.name().as_bytes());
            hasher.update([0x1e]);
        }
        hex::encode(hasher.finalize())
    }

    /// Indented listing used to fill the annotation meta-prompt.
    pub fn render_listing(&self) -> String {
        let mut out = String::new();
        for (path, description) in &self.entries {
            let indent = "    ".repeat(path.depth() - 1);
            let tag = path.canonical();
            out.push_str(&format!("{indent}<{tag}> </{tag}>: {description}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_single_node() {
        let mut reg = TagRegistry::empty();
        reg.register_tag("instruction", "d").unwrap();
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn register_adds_prefix_closure() {
        let mut reg = TagRegistry::empty();
        reg.register_tag("instruction:guideline:cot", "cot").unwrap();
        let names: Vec<String> = reg.tags().map(|(p, _)| p.canonical()).collect();
        assert_eq!(
            names,
            vec!["instruction", "instruction:guideline", "instruction:guideline:cot"]
        );
        // idempotent
        reg.register_tag("instruction:guideline:cot", "cot").unwrap();
        assert_eq!(reg.len(), 3);
    }

    #[test]
    fn register_rejects_bad_identifiers_and_depth() {
        let mut reg = TagRegistry::empty();
        assert!(matches!(
            reg.register_tag("Bad Tag", ""),
            Err(TaxonomyError::InvalidIdentifier { .. })
        ));
        assert!(matches!(
            reg.register_tag("a:b:c:d", ""),
            Err(TaxonomyError::DepthExceeded { depth: 4, .. })
        ));
        assert!(matches!(
            reg.register_tag("", ""),
            Err(TaxonomyError::InvalidIdentifier { .. })
        ));
        assert!(reg.is_empty());
    }

    #[test]
    fn validate_known_and_unknown() {
        let reg = TagRegistry::builtin();
        let few = reg.validate_tag("contextual_ref:fewshot").unwrap();
        assert_eq!(few.segments(), ["contextual_ref", "fewshot"]);
        assert_eq!(reg.validate_tag("request_query").unwrap().depth(), 1);
        assert_eq!(
            reg.validate_tag("  Request_Query ").unwrap().canonical(),
            "request_query"
        );
        match reg.validate_tag("tool_call") {
            Err(TaxonomyError::UnknownTag { raw }) => assert_eq!(raw, "tool_call"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn top_level_categories() {
        let names: Vec<String> = TagRegistry::builtin()
            .top_level_categories()
            .iter()
            .map(TagPath::canonical)
            .collect();
        assert_eq!(
            names,
            vec![
                "contextual_ref",
                "historical_context",
                "instruction",
                "other",
                "output_const",
                "request_query",
                "response",
                "system_prompt",
                "tools",
                "tools_prompt"
            ]
        );
        assert!(TagRegistry::empty().top_level_categories().is_empty());
        let mut reg = TagRegistry::empty();
        reg.register_tag("other:adversarial", "").unwrap();
        assert_eq!(reg.top_level_categories(), vec![TagPath::parse("other").unwrap()]);
    }

    #[test]
    fn builtin_golden_list() {
        let expected = [
            "contextual_ref",
            "contextual_ref:context_for_task",
            "contextual_ref:fewshot",
            "contextual_ref:knowledge_base",
            "historical_context",
            "instruction",
            "instruction:guideline",
            "instruction:guideline:behavioral",
            "instruction:guideline:cot",
            "instruction:guideline:emotion",
            "instruction:guideline:role",
            "instruction:guideline:safety",
            "instruction:guideline:scenario",
            "instruction:task",
            "other",
            "other:adversarial",
            "output_const",
            "output_const:format",
            "output_const:label",
            "output_const:style_tone",
            "output_const:wordlimit",
            "request_query",
            "response",
            "response:answer",
            "response:peripheral_explanation",
            "system_prompt",
            "tools",
            "tools:parameters",
            "tools:tool_description",
            "tools:tool_name",
            "tools_prompt",
        ];
        let reg = TagRegistry::builtin();
        let names: Vec<String> = reg.tags().map(|(p, _)| p.canonical()).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn segment_prefix_is_not_string_prefix() {
        let tools = TagPath::parse("tools").unwrap();
        assert!(!TagPath::parse("tools_prompt").unwrap().starts_with(&tools));
        assert!(TagPath::parse("tools:parameters").unwrap().starts_with(&tools));
    }

    #[test]
    fn roles() {
        let mut reg = TagRegistry::builtin();
        assert!(reg.has_role(&Role::tools()));
        assert!(matches!(
            reg.register_role("user"),
            Err(TaxonomyError::RoleCollision(_))
        ));
        assert!(matches!(
            reg.register_role("bad role"),
            Err(TaxonomyError::InvalidRole(_))
        ));
        let ipython = reg.register_role("ipython").unwrap();
        assert!(reg.has_role(&ipython));
        assert!(!ipython.is_builtin());
    }

    #[test]
    fn lookup_canonical_is_exact() {
        let reg = TagRegistry::builtin();
        assert!(reg.lookup_canonical("instruction").is_some());
        assert!(reg.lookup_canonical("Instruction").is_none());
        assert!(reg.lookup_canonical(" instruction").is_none());
    }

    #[test]
    fn overlay_extends_registry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.toml");
        std::fs::write(&path, "\"other:distractor\" = \"Distracting content\"\n").unwrap();
        let mut reg = TagRegistry::builtin();
        let before = reg.checksum();
        assert_eq!(reg.load_overlay(&path).unwrap(), 1);
        assert!(reg.validate_tag("other:distractor").is_ok());
        assert_ne!(before, reg.checksum());
        // built-ins survive
        assert_eq!(
            reg.description(&TagPath::parse("other").unwrap()),
            Some("Additional functional elements")
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn segment() -> impl Strategy<Value = String> {
            "[a-z][a-z0-9_]{0,6}"
        }

        proptest! {
            #[test]
            fn prefix_closure(segs in prop::collection::vec(segment(), 1..=3)) {
                let mut reg = TagRegistry::empty();
                let path = reg.register_tag(&segs.join(":"), "x").unwrap();
                for prefix in path.prefixes() {
                    prop_assert!(reg.validate_tag(&prefix.canonical()).is_ok());
                }
            }

            #[test]
            fn canonicalization_idempotent(segs in prop::collection::vec(segment(), 1..=3)) {
                let reg = {
                    let mut r = TagRegistry::empty();
                    r.register_tag(&segs.join(":"), "").unwrap();
                    r
                };
                let once = reg.validate_tag(&segs.join(":").to_uppercase()).unwrap();
                let twice = reg.validate_tag(&once.canonical()).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
