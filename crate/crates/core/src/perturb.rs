//! Semantic (reorder, insert, delete) and syntactic (delimiter) operators.
//!
//! Operators act on the prompt's target message (see
//! [`AnnotatedPrompt::target_message`]) and fail loudly; callers that want
//! the old "print and return the text unchanged" behaviour can catch the
//! error and call [`target_text`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt_model::{AnnotatedMessage, AnnotatedPrompt, Component};
use crate::taxonomy::{TagPath, TagRegistry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PerturbError {
    #[error("invalid component name: {name}. Valid options are: {valid:?}")]
    InvalidComponentName { name: String, valid: Vec<String> },
    #[error("invalid position: {0}")]
    InvalidPosition(String),
    #[error("no components found for category: {0}")]
    NoComponentsFound(String),
    #[error("index {index} out of range for {len} components")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("tag {0} is not registered")]
    UnknownTag(String),
    #[error("prompt has no messages")]
    NoTargetMessage,
    #[error("unsupported escape sequence {0:?}")]
    BadEscape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderPosition {
    First,
    Middle,
    Last,
}

impl ReorderPosition {
    pub const ALL: [ReorderPosition; 3] = [ReorderPosition::First, ReorderPosition::Middle, ReorderPosition::Last];

    pub fn as_str(self) -> &'static str {
        match self {
            ReorderPosition::First => "first",
            ReorderPosition::Middle => "middle",
            ReorderPosition::Last => "last",
        }
    }
}

impl FromStr for ReorderPosition {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(ReorderPosition::First),
            "middle" => Ok(ReorderPosition::Middle),
            "last" => Ok(ReorderPosition::Last),
            other => Err(PerturbError::InvalidPosition(other.to_owned())),
        }
    }
}

impl fmt::Display for ReorderPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterPosition {
    All,
    First,
    Middle,
    Last,
}

impl DelimiterPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            DelimiterPosition::All => "all",
            DelimiterPosition::First => "first",
            DelimiterPosition::Middle => "middle",
            DelimiterPosition::Last => "last",
        }
    }
}

impl FromStr for DelimiterPosition {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(DelimiterPosition::All),
            "first" => Ok(DelimiterPosition::First),
            "middle" => Ok(DelimiterPosition::Middle),
            "last" => Ok(DelimiterPosition::Last),
            other => Err(PerturbError::InvalidPosition(other.to_owned())),
        }
    }
}

impl fmt::Display for DelimiterPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn target_mut(ap: &mut AnnotatedPrompt) -> Result<&mut AnnotatedMessage, PerturbError> {
    let idx = ap.target_message().ok_or(PerturbError::NoTargetMessage)?;
    Ok(&mut ap.messages[idx])
}

/// Current text of the target message.
pub fn target_text(ap: &AnnotatedPrompt, remove_tags: bool) -> String {
    ap.target_message()
        .map(|i| ap.messages[i].render(remove_tags))
        .unwrap_or_default()
}

fn resolve_category(registry: &TagRegistry, name: &str) -> Result<TagPath, PerturbError> {
    let invalid = || PerturbError::InvalidComponentName {
        name: name.to_owned(),
        valid: registry.top_level_categories().iter().map(TagPath::canonical).collect(),
    };
    let path = registry.validate_tag(name).map_err(|_| invalid())?;
    if path.depth() != 1 {
        return Err(invalid());
    }
    Ok(path)
}

/// New presentation order for `reorder_component`, over document-order
/// indices. `related` moves as one block keeping its internal order.
pub fn reorder_indices(related: &[usize], others: &[usize], position: ReorderPosition) -> Vec<usize> {
    match position {
        ReorderPosition::First => related.iter().chain(others).copied().collect(),
        ReorderPosition::Last => others.iter().chain(related).copied().collect(),
        ReorderPosition::Middle => {
            let mid = others.len() / 2;
            others[..mid]
                .iter()
                .chain(related)
                .chain(&others[mid..])
                .copied()
                .collect()
        }
    }
}

/// Moves every component of `category` (a registered top-level tag) to the
/// first, middle or last position and returns the target message text.
pub fn reorder_component(
    ap: &mut AnnotatedPrompt,
    registry: &TagRegistry,
    category: &str,
    position: ReorderPosition,
    remove_tags: bool,
) -> Result<String, PerturbError> {
    let category = resolve_category(registry, category)?;
    let msg = target_mut(ap)?;
    let (related, others): (Vec<usize>, Vec<usize>) =
        (0..msg.components.len()).partition(|&i| msg.components[i].tag.starts_with(&category));
    if related.is_empty() {
        return Err(PerturbError::NoComponentsFound(category.canonical()));
    }
    msg.tag_order = reorder_indices(&related, &others, position);
    msg.refresh();
    Ok(msg.render(remove_tags))
}

/// Which delimiter slots `modify_delimiter` rewrites for `k` components.
pub fn delimiter_indices(k: usize, position: DelimiterPosition) -> Vec<usize> {
    if k <= 1 {
        return Vec::new();
    }
    match position {
        DelimiterPosition::All => (0..k - 1).collect(),
        DelimiterPosition::First => vec![0],
        DelimiterPosition::Last => vec![k - 2],
        DelimiterPosition::Middle if k >= 3 => vec![(k - 1) / 2],
        DelimiterPosition::Middle => Vec::new(),
    }
}

/// Replaces `delimiter_after` of the selected components (document order)
/// and returns the target message text.
pub fn modify_delimiter(
    ap: &mut AnnotatedPrompt,
    new_delimiter: &str,
    position: DelimiterPosition,
    remove_tags: bool,
) -> Result<String, PerturbError> {
    let msg = target_mut(ap)?;
    for idx in delimiter_indices(msg.components.len(), position) {
        msg.components[idx].delimiter_after = Some(new_delimiter.to_owned());
        msg.components[idx].metadata.delimiter = None;
    }
    msg.refresh();
    Ok(msg.render(remove_tags))
}

/// Sets every non-terminal delimiter of the target message to `delimiter`.
pub fn normalize_delimiters(ap: &mut AnnotatedPrompt, delimiter: &str) -> Result<(), PerturbError> {
    modify_delimiter(ap, delimiter, DelimiterPosition::All, false).map(|_| ())
}

/// Inserts `component` at document position `at` of the target message.
///
/// Inserting at the end hands the component's `delimiter_after` to the
/// previous final component so only the new last one lacks a delimiter.
pub fn insert_component(
    ap: &mut AnnotatedPrompt,
    registry: &TagRegistry,
    mut component: Component,
    at: usize,
) -> Result<(), PerturbError> {
    if !registry.contains(&component.tag) {
        return Err(PerturbError::UnknownTag(component.tag.canonical()));
    }
    let msg = target_mut(ap)?;
    let len = msg.components.len();
    if at > len {
        return Err(PerturbError::IndexOutOfRange { index: at, len });
    }
    if at == len {
        let carried = component.delimiter_after.take().unwrap_or_default();
        if let Some(last) = msg.components.last_mut() {
            last.delimiter_after = Some(carried);
            last.metadata.delimiter = None;
        }
    } else if component.delimiter_after.is_none() {
        component.delimiter_after = Some(String::new());
    }
    component.metadata = Default::default();
    let slot = msg
        .tag_order
        .iter()
        .position(|&i| i == at)
        .unwrap_or(msg.tag_order.len());
    for i in &mut msg.tag_order {
        if *i >= at {
            *i += 1;
        }
    }
    msg.tag_order.insert(slot, at);
    msg.components.insert(at, component);
    msg.refresh();
    Ok(())
}

/// Removes the component at document position `index` of the target
/// message and returns it.
///
/// Its `delimiter_after` goes with it. Removing the final component instead
/// drops the delimiter before it; that delimiter is returned on the removed
/// component so reinserting it at the same index restores the message.
pub fn delete_component(ap: &mut AnnotatedPrompt, index: usize) -> Result<Component, PerturbError> {
    let msg = target_mut(ap)?;
    let len = msg.components.len();
    if index >= len {
        return Err(PerturbError::IndexOutOfRange { index, len });
    }
    let mut removed = msg.components.remove(index);
    if index == len - 1 {
        if let Some(last) = msg.components.last_mut() {
            removed.delimiter_after = last.delimiter_after.take();
            last.metadata.delimiter = None;
        }
    }
    msg.tag_order.retain(|&i| i != index);
    for i in &mut msg.tag_order {
        if *i > index {
            *i -= 1;
        }
    }
    msg.refresh();
    Ok(removed)
}

/// Decodes `\n`, `\t`, `\\` and `\s` (one space) in command-line delimiter
/// arguments.
pub fn parse_escaped(raw: &str) -> Result<String, PerturbError> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some(other) => return Err(PerturbError::BadEscape(format!("\\{other}"))),
            None => return Err(PerturbError::BadEscape("\\".into())),
        }
    }
    Ok(out)
}

/// A named perturbation, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PerturbationSpec {
    Identity,
    Reorder {
        component: String,
        position: ReorderPosition,
    },
    Delimiter {
        new: String,
        position: DelimiterPosition,
    },
}

impl PerturbationSpec {
    pub fn apply(&self, ap: &mut AnnotatedPrompt, registry: &TagRegistry) -> Result<(), PerturbError> {
        match self {
            PerturbationSpec::Identity => Ok(()),
            PerturbationSpec::Reorder { component, position } => {
                reorder_component(ap, registry, component, *position, false).map(|_| ())
            }
            PerturbationSpec::Delimiter { new, position } => modify_delimiter(ap, new, *position, false).map(|_| ()),
        }
    }
}
