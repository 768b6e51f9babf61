//! Delimiter classification and directive-marker detection.
//!
//! The prefix, suffix and special-token pattern lists are fixed; their order
//! decides ties. Patterns were written against Python `re`, so `$` is
//! translated to "end of text, optionally after one final newline".

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt_model::AnnotatedPrompt;

#[derive(Debug, Error)]
pub enum SyntaxError {
    #[error("failed to read pattern overlay {path}: {reason}")]
    Overlay { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterKind {
    DoubleNewline,
    SingleNewline,
    Tab,
    Whitespace,
    Mixed,
}

impl DelimiterKind {
    pub const ALL: [DelimiterKind; 5] = [
        DelimiterKind::DoubleNewline,
        DelimiterKind::SingleNewline,
        DelimiterKind::Tab,
        DelimiterKind::Whitespace,
        DelimiterKind::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DelimiterKind::DoubleNewline => "double_newline",
            DelimiterKind::SingleNewline => "single_newline",
            DelimiterKind::Tab => "tab",
            DelimiterKind::Whitespace => "whitespace",
            DelimiterKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for DelimiterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelimiterInfo {
    pub raw: String,
    /// Length in characters.
    pub length: usize,
    pub kind: DelimiterKind,
    pub pattern: String,
}

/// Python's `str.isspace` per character: Unicode White_Space plus the
/// information separators U+001C..U+001F.
pub fn is_py_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

/// Classifies the text between two components.
///
/// Whitespace-only text is checked for `"\n\n"`, then `"\n"`, then `"\t"`.
/// Anything else, including the empty string, is `mixed` and its pattern is
/// the escaped literal.
pub fn analyze_delimiter(raw: Option<&str>) -> Option<DelimiterInfo> {
    let raw = raw?;
    let all_space = !raw.is_empty() && raw.chars().all(is_py_space);
    let (kind, pattern) = if all_space {
        if raw.contains("\n\n") {
            (DelimiterKind::DoubleNewline, r"\n\n".to_owned())
        } else if raw.contains('\n') {
            (DelimiterKind::SingleNewline, r"\n".to_owned())
        } else if raw.contains('\t') {
            (DelimiterKind::Tab, r"\t".to_owned())
        } else {
            (DelimiterKind::Whitespace, r"\s+".to_owned())
        }
    } else {
        (DelimiterKind::Mixed, escape_literal(raw))
    };
    Some(DelimiterInfo {
        raw: raw.to_owned(),
        length: raw.chars().count(),
        kind,
        pattern,
    })
}

/// Python-`repr` style escaping without the surrounding quotes.
pub fn escape_literal(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => out.push_str(&format!("\\x{:02x}", c as u32)),
            c if c.is_control() || (c.is_whitespace() && c != ' ') => {
                let v = c as u32;
                if v <= 0xff {
                    out.push_str(&format!("\\x{v:02x}"));
                } else if v <= 0xffff {
                    out.push_str(&format!("\\u{v:04x}"));
                } else {
                    out.push_str(&format!("\\U{v:08x}"));
                }
            }
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixKind {
    HashComment,
    DoubleSlashComment,
    Blockquote,
    NumberedList,
    BulletPoint,
    None,
}

impl PrefixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrefixKind::HashComment => "hash_comment",
            PrefixKind::DoubleSlashComment => "double_slash_comment",
            PrefixKind::Blockquote => "blockquote",
            PrefixKind::NumberedList => "numbered_list",
            PrefixKind::BulletPoint => "bullet_point",
            PrefixKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffixKind {
    ColonEnd,
    SentenceEnd,
    SemicolonEnd,
    None,
}

impl SuffixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuffixKind::ColonEnd => "colon_end",
            SuffixKind::SentenceEnd => "sentence_end",
            SuffixKind::SemicolonEnd => "semicolon_end",
            SuffixKind::None => "none",
        }
    }
}

/// Names of the built-in special-token patterns, in scan order.
pub const SPECIAL_TOKEN_KINDS: [&str; 6] = [
    "html_tag",
    "markdown_link",
    "math_expression",
    "mention",
    "hashtag",
    "url",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerProfile {
    pub prefix: PrefixKind,
    pub suffix: SuffixKind,
    /// Match counts keyed by token kind; kinds with no match are absent.
    pub special_tokens: BTreeMap<String, usize>,
}

const PREFIX_PATTERNS: [(&str, PrefixKind); 5] = [
    (r"^\s*#[^#\n]+", PrefixKind::HashComment),
    (r"^\s*//[^\n]+", PrefixKind::DoubleSlashComment),
    (r"^\s*>[^\n]+", PrefixKind::Blockquote),
    (r"^\s*\d+\.\s", PrefixKind::NumberedList),
    (r"^\s*[-*+]\s", PrefixKind::BulletPoint),
];

// `$` rewritten as `\n?\z` to keep Python's end-of-string semantics.
const SUFFIX_PATTERNS: [(&str, SuffixKind); 3] = [
    (r"\s*:\s*\n?\z", SuffixKind::ColonEnd),
    (r"\s*[.!?]+\n?\z", SuffixKind::SentenceEnd),
    (r"\s*[;]\s*\n?\z", SuffixKind::SemicolonEnd),
];

const SPECIAL_PATTERNS: [&str; 6] = [r"<[^>]+>", r"\[.*?\]", r"\$.*?\$", r"@\w+", r"#\w+", r"https?://\S+"];

struct CompiledPatterns {
    prefix: Vec<(Regex, PrefixKind)>,
    suffix: Vec<(Regex, SuffixKind)>,
    special: Vec<(Regex, &'static str)>,
}

static PATTERNS: LazyLock<CompiledPatterns> = LazyLock::new(|| CompiledPatterns {
    prefix: PREFIX_PATTERNS
        .iter()
        .map(|(p, k)| (Regex::new(p).unwrap(), *k))
        .collect(),
    suffix: SUFFIX_PATTERNS
        .iter()
        .map(|(p, k)| (Regex::new(p).unwrap(), *k))
        .collect(),
    special: SPECIAL_PATTERNS
        .iter()
        .zip(SPECIAL_TOKEN_KINDS)
        .map(|(p, k)| (Regex::new(p).unwrap(), k))
        .collect(),
});

pub fn detect_prefix(content: &str) -> PrefixKind {
    PATTERNS
        .prefix
        .iter()
        .find(|(re, _)| re.is_match(content))
        .map_or(PrefixKind::None, |(_, k)| *k)
}

pub fn detect_suffix(content: &str) -> SuffixKind {
    PATTERNS
        .suffix
        .iter()
        .find(|(re, _)| re.is_match(content))
        .map_or(SuffixKind::None, |(_, k)| *k)
}

/// Counts non-overlapping matches of each built-in pattern, each pattern
/// scanned independently over the whole content.
pub fn detect_special_tokens(content: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for (re, kind) in &PATTERNS.special {
        let n = re.find_iter(content).count();
        if n > 0 {
            counts.insert((*kind).to_owned(), n);
        }
    }
    counts
}

/// Marker detector with optional model-specific literal tokens
/// (e.g. `<|begin_of_text|>`). Literal lists are off unless configured.
#[derive(Debug, Clone, Default)]
pub struct SyntaxAnalyzer {
    literals: Vec<(String, String)>,
}

impl SyntaxAnalyzer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_literal(mut self, label: &str, literal: &str) -> Self {
        if !literal.is_empty() {
            self.literals.push((label.to_owned(), literal.to_owned()));
        }
        self
    }

    /// Loads a TOML overlay of the form `label = ["literal", ...]`.
    pub fn load_overlay(mut self, path: &Path) -> Result<Self, SyntaxError> {
        let err = |reason: String| SyntaxError::Overlay {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let map: BTreeMap<String, Vec<String>> = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        for (label, literals) in map {
            for lit in literals {
                self = self.with_literal(&label, &lit);
            }
        }
        Ok(self)
    }

    pub fn markers(&self, content: &str) -> MarkerProfile {
        let mut special_tokens = detect_special_tokens(content);
        for (label, literal) in &self.literals {
            let n = content.matches(literal.as_str()).count();
            if n > 0 {
                *special_tokens.entry(label.clone()).or_insert(0) += n;
            }
        }
        MarkerProfile {
            prefix: detect_prefix(content),
            suffix: detect_suffix(content),
            special_tokens,
        }
    }

    /// Fills every component's marker profile and delimiter info.
    pub fn annotate(&self, ap: &mut AnnotatedPrompt) {
        for message in &mut ap.messages {
            for comp in &mut message.components {
                comp.metadata.markers = Some(self.markers(&comp.content));
                comp.metadata.delimiter = analyze_delimiter(comp.delimiter_after.as_deref());
            }
        }
    }
}

/// [`SyntaxAnalyzer::annotate`] with the default analyzer, returning the prompt.
pub fn annotate_markers(mut ap: AnnotatedPrompt) -> AnnotatedPrompt {
    SyntaxAnalyzer::default().annotate(&mut ap);
    ap
}
