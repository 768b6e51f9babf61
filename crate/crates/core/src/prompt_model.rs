//! Role/content prompts and their tag-annotated component structure.
//!
//! Annotated content is a flat sequence of `<tag>..</tag>` regions using
//! registered canonical tag names. Everything outside a region is leading
//! text, trailing text, or the delimiter between two regions. Spans are
//! character offsets into the de-tagged text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::syntax::{DelimiterInfo, MarkerProfile};
use crate::taxonomy::{Role, TagPath, TagRegistry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("message {message}: expected </{}> but found </{found}> at byte {offset}", expected.as_deref().unwrap_or("(none)"))]
    MismatchedTag {
        message: usize,
        expected: Option<String>,
        found: String,
        offset: usize,
    },
    #[error("message {message}: <{tag}> opened at byte {offset} is never closed")]
    UnclosedTag { message: usize, tag: String, offset: usize },
    #[error("message {message}: <{inner}> at byte {offset} opens inside <{outer}>")]
    NestedTag {
        message: usize,
        outer: String,
        inner: String,
        offset: usize,
    },
    #[error("message {message}: role {role:?} is not registered")]
    UnknownRole { message: usize, role: String },
    #[error("prompt contains no user message")]
    NoUserMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// One JSON Lines record: `{"id": ..., "messages": [{"role", "content"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub messages: Vec<Message>,
}

impl Prompt {
    pub fn new(messages: Vec<Message>) -> Self {
        Prompt { id: None, messages }
    }

    pub fn single(role: Role, content: impl Into<String>) -> Self {
        Prompt::new(vec![Message::new(role, content)])
    }

    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.messages.iter().map(|m| &m.role)
    }
}

/// Half-open character range into de-tagged message text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Slices `text` by character offsets.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
        let start = indices.nth(self.start).unwrap_or(text.len());
        let end = if self.end == self.start {
            start
        } else {
            indices.nth(self.end - self.start - 1).unwrap_or(text.len())
        };
        &text[start..end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentIndex {
    pub role: Role,
    pub order: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markers: Option<MarkerProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<DelimiterInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub tag: TagPath,
    pub content: String,
    pub index: ComponentIndex,
    pub span: Span,
    /// Raw text up to the next component; `None` only on the final one.
    pub delimiter_after: Option<String>,
    #[serde(default)]
    pub metadata: ComponentMetadata,
}

impl Component {
    /// A free-standing component for insertion; index and span are fixed
    /// up by the receiving message.
    pub fn new(tag: TagPath, content: impl Into<String>, delimiter_after: Option<String>) -> Self {
        Component {
            tag,
            content: content.into(),
            index: ComponentIndex {
                role: Role::user(),
                order: 0,
            },
            span: Span { start: 0, end: 0 },
            delimiter_after,
            metadata: ComponentMetadata::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagIssueKind {
    Mismatched,
    StrayClose,
    Unclosed,
    Nested,
}

/// A markup problem that lenient parsing stepped over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagIssue {
    pub message: usize,
    pub kind: TagIssueKind,
    pub tag: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    /// Tag-like markup whose name is not registered; kept verbatim.
    pub unknown_tags: usize,
    pub issues: Vec<TagIssue>,
}

impl ParseDiagnostics {
    pub fn count(&self, kind: TagIssueKind) -> usize {
        self.issues.iter().filter(|i| i.kind == kind).count()
    }

    pub fn count_all(&self) -> usize {
        self.issues.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedMessage {
    pub role: Role,
    pub leading_text: String,
    pub trailing_text: String,
    pub components: Vec<Component>,
    /// Presentation order as indices into `components`.
    pub tag_order: Vec<usize>,
}

impl AnnotatedMessage {
    fn plain(role: Role, content: &str) -> Self {
        AnnotatedMessage {
            role,
            leading_text: content.to_owned(),
            trailing_text: String::new(),
            components: Vec::new(),
            tag_order: Vec::new(),
        }
    }

    /// Renders the message in presentation order.
    ///
    /// Each component carries its own `delimiter_after`. The component in
    /// the final presentation slot emits none; its delimiter is handed to the
    /// one non-terminal component that has no delimiter of its own, so the
    /// multiset of delimiters survives any reordering.
    pub fn render(&self, remove_tags: bool) -> String {
        let mut out = String::with_capacity(self.leading_text.len() + self.trailing_text.len() + 64);
        out.push_str(&self.leading_text);
        self.walk(remove_tags, |piece| out.push_str(piece));
        out.push_str(&self.trailing_text);
        out
    }

    fn walk(&self, remove_tags: bool, mut emit: impl FnMut(&str)) {
        let k = self.tag_order.len();
        if k == 0 {
            return;
        }
        let displaced = self.components[self.tag_order[k - 1]].delimiter_after.as_deref();
        for (slot, &idx) in self.tag_order.iter().enumerate() {
            let comp = &self.components[idx];
            let tag = comp.tag.canonical();
            if !remove_tags {
                emit("<");
                emit(&tag);
                emit(">");
            }
            emit(&comp.content);
            if !remove_tags {
                emit("</");
                emit(&tag);
                emit(">");
            }
            if slot + 1 < k {
                emit(comp.delimiter_after.as_deref().or(displaced).unwrap_or(""));
            }
        }
    }

    /// Recomputes spans against the current presentation order and re-packs
    /// component orders to be consecutive.
    pub fn refresh(&mut self) {
        for (order, comp) in self.components.iter_mut().enumerate() {
            comp.index.order = order;
            comp.index.role = self.role.clone();
        }
        let k = self.tag_order.len();
        if k == 0 {
            return;
        }
        let displaced = self.components[self.tag_order[k - 1]]
            .delimiter_after
            .as_deref()
            .map(|d| d.chars().count());
        let mut cursor = self.leading_text.chars().count();
        for slot in 0..k {
            let idx = self.tag_order[slot];
            let comp = &mut self.components[idx];
            let len = comp.content.chars().count();
            comp.span = Span {
                start: cursor,
                end: cursor + len,
            };
            cursor += len;
            if slot + 1 < k {
                cursor += comp
                    .delimiter_after
                    .as_deref()
                    .map(|d| d.chars().count())
                    .or(displaced)
                    .unwrap_or(0);
            }
        }
    }

    /// Components in presentation order.
    pub fn ordered(&self) -> impl Iterator<Item = &Component> {
        self.tag_order.iter().map(move |&i| &self.components[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPrompt {
    pub source: Prompt,
    pub messages: Vec<AnnotatedMessage>,
    pub diagnostics: ParseDiagnostics,
}

impl AnnotatedPrompt {
    /// Index of the message operators act on: the last user message with
    /// components, else the last message with components, else the last one.
    pub fn target_message(&self) -> Option<usize> {
        let with_components = |m: &&AnnotatedMessage| !m.components.is_empty();
        self.messages
            .iter()
            .enumerate()
            .rev()
            .find(|(_, m)| m.role == Role::user() && with_components(m))
            .or_else(|| self.messages.iter().enumerate().rev().find(|(_, m)| with_components(m)))
            .map(|(i, _)| i)
            .or_else(|| self.messages.len().checked_sub(1))
    }

    pub fn components(&self) -> impl Iterator<Item = &Component> {
        self.messages.iter().flat_map(|m| m.components.iter())
    }

    pub fn component_count(&self) -> usize {
        self.messages.iter().map(|m| m.components.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct TagToken<'r> {
    start: usize,
    end: usize,
    close: bool,
    tag: &'r TagPath,
}

/// Finds registered tag markup in `text`, counting unregistered tag-like
/// markup as unknown.
fn scan_tags<'r>(text: &str, registry: &'r TagRegistry, unknown: &mut usize) -> Vec<TagToken<'r>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while let Some(rel) = memchr_lt(&bytes[i..]) {
        let start = i + rel;
        let mut j = start + 1;
        let close = bytes.get(j) == Some(&b'/');
        if close {
            j += 1;
        }
        let name_start = j;
        while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_' || bytes[j] == b':') {
            j += 1;
        }
        if j > name_start && bytes.get(j) == Some(&b'>') && bytes[name_start].is_ascii_alphabetic() {
            let name = &text[name_start..j];
            match registry.lookup_canonical(name) {
                Some(tag) => {
                    tokens.push(TagToken {
                        start,
                        end: j + 1,
                        close,
                        tag,
                    });
                    i = j + 1;
                    continue;
                }
                None => *unknown += 1,
            }
        }
        i = start + 1;
    }
    tokens
}

fn memchr_lt(bytes: &[u8]) -> Option<usize> {
    bytes.iter().position(|&b| b == b'<')
}

/// Pairs tokens into flat regions. Strict mode stops at the first problem;
/// lenient mode records it and treats the offending markup as plain text.
fn pair_tokens(
    message: usize,
    tokens: &[TagToken<'_>],
    lenient: bool,
    issues: &mut Vec<TagIssue>,
) -> Result<Vec<(usize, usize)>, ParseError> {
    let mut pairs = Vec::new();
    let mut open: Option<usize> = None;
    let mut report = |kind: TagIssueKind, tok: &TagToken<'_>, err: ParseError| {
        if lenient {
            issues.push(TagIssue {
                message,
                kind,
                tag: tok.tag.canonical(),
                offset: tok.start,
            });
            Ok(())
        } else {
            Err(err)
        }
    };
    for (i, tok) in tokens.iter().enumerate() {
        match (open, tok.close) {
            (None, false) => open = Some(i),
            (None, true) => report(
                TagIssueKind::StrayClose,
                tok,
                ParseError::MismatchedTag {
                    message,
                    expected: None,
                    found: tok.tag.canonical(),
                    offset: tok.start,
                },
            )?,
            (Some(o), true) if tokens[o].tag == tok.tag => {
                pairs.push((o, i));
                open = None;
            }
            (Some(o), true) => report(
                TagIssueKind::Mismatched,
                tok,
                ParseError::MismatchedTag {
                    message,
                    expected: Some(tokens[o].tag.canonical()),
                    found: tok.tag.canonical(),
                    offset: tok.start,
                },
            )?,
            (Some(o), false) => {
                // the earlier open is abandoned in lenient mode
                let outer = &tokens[o];
                report(
                    TagIssueKind::Nested,
                    outer,
                    ParseError::NestedTag {
                        message,
                        outer: outer.tag.canonical(),
                        inner: tok.tag.canonical(),
                        offset: tok.start,
                    },
                )?;
                open = Some(i);
            }
        }
    }
    if let Some(o) = open {
        let tok = &tokens[o];
        report(
            TagIssueKind::Unclosed,
            tok,
            ParseError::UnclosedTag {
                message,
                tag: tok.tag.canonical(),
                offset: tok.start,
            },
        )?;
    }
    Ok(pairs)
}

fn build_message(role: &Role, text: &str, tokens: &[TagToken<'_>], pairs: &[(usize, usize)]) -> AnnotatedMessage {
    if pairs.is_empty() {
        return AnnotatedMessage::plain(role.clone(), text);
    }
    let first_open = tokens[pairs[0].0].start;
    let mut msg = AnnotatedMessage {
        role: role.clone(),
        leading_text: text[..first_open].to_owned(),
        trailing_text: String::new(),
        components: Vec::with_capacity(pairs.len()),
        tag_order: (0..pairs.len()).collect(),
    };
    for (n, &(o, c)) in pairs.iter().enumerate() {
        let (open, close) = (&tokens[o], &tokens[c]);
        let delimiter_after = pairs
            .get(n + 1)
            .map(|&(next, _)| text[close.end..tokens[next].start].to_owned());
        msg.components.push(Component {
            tag: open.tag.clone(),
            content: text[open.end..close.start].to_owned(),
            index: ComponentIndex {
                role: role.clone(),
                order: n,
            },
            span: Span { start: 0, end: 0 },
            delimiter_after,
            metadata: ComponentMetadata::default(),
        });
    }
    let last_close = tokens[pairs[pairs.len() - 1].1].end;
    msg.trailing_text = text[last_close..].to_owned();
    msg.refresh();
    msg
}

fn parse_impl(prompt: &Prompt, registry: &TagRegistry, lenient: bool) -> Result<AnnotatedPrompt, ParseError> {
    let mut diagnostics = ParseDiagnostics::default();
    let mut messages = Vec::with_capacity(prompt.messages.len());
    for (m, message) in prompt.messages.iter().enumerate() {
        if !registry.has_role(&message.role) {
            return Err(ParseError::UnknownRole {
                message: m,
                role: message.role.name().to_owned(),
            });
        }
        let tokens = scan_tags(&message.content, registry, &mut diagnostics.unknown_tags);
        let pairs = pair_tokens(m, &tokens, lenient, &mut diagnostics.issues)?;
        messages.push(build_message(&message.role, &message.content, &tokens, &pairs));
    }
    Ok(AnnotatedPrompt {
        source: prompt.clone(),
        messages,
        diagnostics,
    })
}

/// Parses tag-annotated content. Registered tags must be flat and balanced.
pub fn parse_annotated(prompt: &Prompt, registry: &TagRegistry) -> Result<AnnotatedPrompt, ParseError> {
    parse_impl(prompt, registry, false)
}

/// Like [`parse_annotated`] but malformed markup is kept as plain text and
/// reported in `diagnostics.issues`. Only an unknown role fails.
pub fn parse_lenient(prompt: &Prompt, registry: &TagRegistry) -> Result<AnnotatedPrompt, ParseError> {
    parse_impl(prompt, registry, true)
}

/// Renders every message back to text in its current presentation order.
pub fn serialize(ap: &AnnotatedPrompt, remove_tags: bool) -> Prompt {
    Prompt {
        id: ap.source.id.clone(),
        messages: ap
            .messages
            .iter()
            .map(|m| Message::new(m.role.clone(), m.render(remove_tags)))
            .collect(),
    }
}

/// Splits a conversation at its last user message.
pub fn split_terminal(prompt: &Prompt) -> Result<(&[Message], &Message), ParseError> {
    let idx = prompt
        .messages
        .iter()
        .rposition(|m| m.role == Role::user())
        .ok_or(ParseError::NoUserMessage)?;
    Ok((&prompt.messages[..idx], &prompt.messages[idx]))
}

/// Reduces a conversation to its terminal user message. Earlier messages are
/// represented by an empty `historical_context` pointer component placed
/// before the user content.
pub fn terminal_user_view(prompt: &Prompt) -> Result<Prompt, ParseError> {
    let (history, target) = split_terminal(prompt)?;
    let content = if history.is_empty() {
        target.content.clone()
    } else {
        format!("<historical_context></historical_context>{}", target.content)
    };
    Ok(Prompt {
        id: prompt.id.clone(),
        messages: vec![Message::new(target.role.clone(), content)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(content: &str) -> Prompt {
        Prompt::single(Role::user(), content)
    }

    fn reg() -> TagRegistry {
        TagRegistry::builtin()
    }

    #[test]
    fn two_component_example() {
        let p = user("<instruction>Do X</instruction>\n\n<request_query>Q?</request_query>");
        let ap = parse_annotated(&p, &reg()).unwrap();
        let m = &ap.messages[0];
        assert_eq!(m.components.len(), 2);
        let (a, b) = (&m.components[0], &m.components[1]);
        assert_eq!(a.tag.canonical(), "instruction");
        assert_eq!(a.content, "Do X");
        assert_eq!(a.index.order, 0);
        assert_eq!(a.span, Span { start: 0, end: 4 });
        assert_eq!(a.delimiter_after.as_deref(), Some("\n\n"));
        assert_eq!(b.tag.canonical(), "request_query");
        assert_eq!(b.content, "Q?");
        assert_eq!(b.index.order, 1);
        assert_eq!(b.span, Span { start: 6, end: 8 });
        assert_eq!(b.delimiter_after, None);

        assert_eq!(serialize(&ap, false), p);
        assert_eq!(serialize(&ap, true).messages[0].content, "Do X\n\nQ?");
    }

    #[test]
    fn empty_content() {
        let ap = parse_annotated(&user(""), &reg()).unwrap();
        let m = &ap.messages[0];
        assert!(m.components.is_empty());
        assert_eq!(m.leading_text, "");
        assert_eq!(m.trailing_text, "");
    }

    #[test]
    fn mismatched_unclosed_nested() {
        assert!(matches!(
            parse_annotated(&user("<instruction>Do X</output_const>"), &reg()),
            Err(ParseError::MismatchedTag { .. })
        ));
        assert!(matches!(
            parse_annotated(&user("<instruction>Do X"), &reg()),
            Err(ParseError::UnclosedTag { .. })
        ));
        assert!(matches!(
            parse_annotated(
                &user("<instruction>a<request_query>b</request_query></instruction>"),
                &reg()
            ),
            Err(ParseError::NestedTag { .. })
        ));
        assert!(matches!(
            parse_annotated(&user("text</instruction>"), &reg()),
            Err(ParseError::MismatchedTag { expected: None, .. })
        ));
    }

    #[test]
    fn unknown_tags_are_inert() {
        let text = "<output_const:format>Use <tool_call>[\n{\"name\": \"f\"}\n]</tool_call></output_const:format>";
        let ap = parse_annotated(&user(text), &reg()).unwrap();
        let comp = &ap.messages[0].components[0];
        assert_eq!(comp.tag.canonical(), "output_const:format");
        assert!(comp.content.contains("<tool_call>[") && comp.content.contains("</tool_call>"));
        assert_eq!(ap.diagnostics.unknown_tags, 2);
        assert_eq!(serialize(&ap, false).messages[0].content, text);
    }

    #[test]
    fn uppercase_and_attribute_tags_are_not_components() {
        let ap = parse_annotated(&user("<Instruction>x</Instruction> <instruction a=1>y"), &reg()).unwrap();
        assert!(ap.messages[0].components.is_empty());
        assert_eq!(ap.diagnostics.unknown_tags, 2);
    }

    #[test]
    fn leading_trailing_and_interior_text() {
        let text = "Intro: <instruction>A</instruction> then --- <request_query>B</request_query> end";
        let ap = parse_annotated(&user(text), &reg()).unwrap();
        let m = &ap.messages[0];
        assert_eq!(m.leading_text, "Intro: ");
        assert_eq!(m.components[0].delimiter_after.as_deref(), Some(" then --- "));
        assert_eq!(m.trailing_text, " end");
        let detagged = m.render(true);
        for c in &m.components {
            assert_eq!(c.span.slice(&detagged), c.content);
        }
    }

    #[test]
    fn spans_count_characters_not_bytes() {
        let text = "<instruction>héllo ✓</instruction>→<request_query>日本</request_query>";
        let ap = parse_annotated(&user(text), &reg()).unwrap();
        let m = &ap.messages[0];
        assert_eq!(m.components[0].span, Span { start: 0, end: 7 });
        assert_eq!(m.components[1].span, Span { start: 8, end: 10 });
        assert_eq!(m.components[1].span.slice(&m.render(true)), "日本");
    }

    #[test]
    fn unknown_role_rejected() {
        let p = Prompt::single(Role::new("robot").unwrap(), "x");
        assert!(matches!(
            parse_annotated(&p, &reg()),
            Err(ParseError::UnknownRole { .. })
        ));
    }

    #[test]
    fn lenient_recovers_after_unclosed() {
        let text = "<instruction>Do X\n\n<request_query>Q?</request_query>";
        let ap = parse_lenient(&user(text), &reg()).unwrap();
        assert_eq!(ap.diagnostics.count(TagIssueKind::Nested), 1);
        let m = &ap.messages[0];
        assert_eq!(m.components.len(), 1);
        assert_eq!(m.components[0].tag.canonical(), "request_query");
        assert_eq!(m.leading_text, "<instruction>Do X\n\n");
        assert_eq!(serialize(&ap, false).messages[0].content, text);

        let trailing = "<instruction>A</instruction>\n<output_const>never closed";
        let ap = parse_lenient(&user(trailing), &reg()).unwrap();
        assert_eq!(ap.diagnostics.count(TagIssueKind::Unclosed), 1);
        assert_eq!(ap.messages[0].components.len(), 1);
        assert_eq!(ap.messages[0].trailing_text, "\n<output_const>never closed");
    }

    #[test]
    fn terminal_view_rules() {
        let sys_user = Prompt::new(vec![
            Message::new(Role::system(), "be nice"),
            Message::new(Role::user(), "<request_query>hi</request_query>"),
        ]);
        let (history, target) = split_terminal(&sys_user).unwrap();
        assert_eq!(history, &sys_user.messages[..1]);
        assert_eq!(target.content, "<request_query>hi</request_query>");
        let view = terminal_user_view(&sys_user).unwrap();
        assert_eq!(view.messages.len(), 1);
        let ap = parse_annotated(&view, &reg()).unwrap();
        let tags: Vec<String> = ap.components().map(|c| c.tag.canonical()).collect();
        assert_eq!(tags, ["historical_context", "request_query"]);

        let multi = Prompt::new(vec![
            Message::new(Role::user(), "a"),
            Message::new(Role::assistant(), "b"),
            Message::new(Role::user(), "c"),
        ]);
        let (history, target) = split_terminal(&multi).unwrap();
        assert_eq!(history.len(), 2);
        assert_eq!(target.content, "c");

        let none = Prompt::new(vec![
            Message::new(Role::system(), "a"),
            Message::new(Role::assistant(), "b"),
        ]);
        assert_eq!(terminal_user_view(&none), Err(ParseError::NoUserMessage));
    }

    #[test]
    fn consecutive_identical_tags_not_merged() {
        let ap = parse_annotated(
            &user("<instruction>a</instruction><instruction>b</instruction>"),
            &reg(),
        )
        .unwrap();
        assert_eq!(ap.messages[0].components.len(), 2);
        assert_eq!(ap.messages[0].components[0].delimiter_after.as_deref(), Some(""));
    }

    #[test]
    fn span_slice_edges() {
        let s = Span { start: 2, end: 2 };
        assert_eq!(s.slice("abc"), "");
        assert_eq!(Span { start: 0, end: 3 }.slice("abc"), "abc");
        assert_eq!(Span { start: 1, end: 3 }.slice("aéc"), "éc");
    }
}
