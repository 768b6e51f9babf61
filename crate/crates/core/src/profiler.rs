//! Four-dimension dataset profiles (structural, semantic, syntactic,
//! metadata) built from mergeable per-record counters.
//!
//! Every statistic is stored as integer counters so that `merge` is exactly
//! associative and commutative; means and proportions are derived at render
//! time. Multi-turn records are analysed through their terminal user
//! message, with earlier turns standing in as a `historical_context` pointer
//! that counts semantically but carries no syntax.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::prompt_model::{AnnotatedPrompt, Component};
use crate::syntax::{analyze_delimiter, SyntaxAnalyzer};
use crate::taxonomy::{Role, TagPath};

pub const PROFILE_SCHEMA: &str = "promptprism_profile";
pub const PROFILE_VERSION: u32 = 1;

/// Bucket name for "no delimiter / no marker / no token".
pub const NONE_BUCKET: &str = "none";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("cannot merge profiles built against different registries ({left} vs {right})")]
    RegistryMismatch { left: String, right: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TreeMetrics {
    pub depth: usize,
    pub width: usize,
    pub node_count: usize,
}

/// Shape of the tag tree induced by `tags`: nodes are all distinct prefixes
/// (root excluded), depth is the longest path, width the largest number of
/// nodes on one level.
pub fn tree_metrics<'a>(tags: impl IntoIterator<Item = &'a TagPath>) -> TreeMetrics {
    let nodes: BTreeSet<TagPath> = tags
        .into_iter()
        .flat_map(|t| t.prefixes().collect::<Vec<_>>())
        .collect();
    let mut per_level: BTreeMap<usize, usize> = BTreeMap::new();
    for node in &nodes {
        *per_level.entry(node.depth()).or_default() += 1;
    }
    TreeMetrics {
        depth: per_level.keys().copied().max().unwrap_or(0),
        width: per_level.values().copied().max().unwrap_or(0),
        node_count: nodes.len(),
    }
}

fn bump(map: &mut BTreeMap<String, u64>, key: &str, n: u64) {
    *map.entry(key.to_owned()).or_default() += n;
}

fn add_all<K: Ord + Clone>(into: &mut BTreeMap<K, u64>, from: &BTreeMap<K, u64>) {
    for (k, v) in from {
        *into.entry(k.clone()).or_default() += v;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuralStats {
    pub turn_type: BTreeMap<String, u64>,
    pub role_sequence_pattern: BTreeMap<String, u64>,
    pub unique_roles: BTreeSet<String>,
    pub turns_total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticStats {
    pub tag_frequency: BTreeMap<TagPath, u64>,
    pub tree_depth_total: u64,
    pub tree_width_total: u64,
    pub node_count_total: u64,
}

impl SemanticStats {
    /// Three most frequent tags; ties go to the smaller canonical text.
    pub fn top3(&self) -> Vec<(TagPath, u64)> {
        let mut all: Vec<(TagPath, u64)> = self.tag_frequency.iter().map(|(k, v)| (k.clone(), *v)).collect();
        all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.canonical().cmp(&b.0.canonical())));
        all.truncate(3);
        all
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntacticStats {
    pub delimiter: BTreeMap<String, u64>,
    pub prefix: BTreeMap<String, u64>,
    pub suffix: BTreeMap<String, u64>,
    pub special_token: BTreeMap<String, u64>,
}

impl SyntacticStats {
    fn dimensions(&self) -> [(&'static str, &BTreeMap<String, u64>); 4] {
        [
            ("delimiter", &self.delimiter),
            ("prefix", &self.prefix),
            ("suffix", &self.suffix),
            ("special_token", &self.special_token),
        ]
    }
}

/// Proportions over a counter map; empty when there are no observations.
pub fn distribution(counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    counts
        .iter()
        .map(|(k, v)| (k.clone(), *v as f64 / total as f64))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataStats {
    pub task_type: BTreeMap<String, u64>,
    /// Histogram of per-record token lengths.
    pub token_length: BTreeMap<u64, u64>,
    pub language: BTreeMap<String, u64>,
}

impl MetadataStats {
    pub fn token_mean(&self) -> f64 {
        let n: u64 = self.token_length.values().sum();
        if n == 0 {
            return 0.0;
        }
        let total: u64 = self.token_length.iter().map(|(len, c)| len * c).sum();
        total as f64 / n as f64
    }

    /// Nearest-rank percentile (`q` in (0, 1]).
    pub fn token_percentile(&self, q: f64) -> u64 {
        let n: u64 = self.token_length.values().sum();
        if n == 0 {
            return 0;
        }
        let rank = ((q * n as f64).ceil() as u64).clamp(1, n);
        let mut seen = 0;
        for (len, count) in &self.token_length {
            seen += count;
            if seen >= rank {
                return *len;
            }
        }
        unreachable!("rank is bounded by the histogram total")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub registry_checksum: String,
    pub record_count: u64,
    pub structural: StructuralStats,
    pub semantic: SemanticStats,
    pub syntactic: SyntacticStats,
    pub metadata: MetadataStats,
    pub warning_counts: BTreeMap<String, u64>,
}

impl DatasetProfile {
    /// The merge identity for profiles built against `registry_checksum`.
    pub fn empty(registry_checksum: impl Into<String>) -> Self {
        DatasetProfile {
            registry_checksum: registry_checksum.into(),
            record_count: 0,
            structural: StructuralStats::default(),
            semantic: SemanticStats::default(),
            syntactic: SyntacticStats::default(),
            metadata: MetadataStats::default(),
            warning_counts: BTreeMap::new(),
        }
    }

    pub fn merge(mut self, other: &DatasetProfile) -> Result<DatasetProfile, ProfileError> {
        self.merge_in(other)?;
        Ok(self)
    }

    pub fn merge_in(&mut self, other: &DatasetProfile) -> Result<(), ProfileError> {
        if self.registry_checksum != other.registry_checksum {
            return Err(ProfileError::RegistryMismatch {
                left: self.registry_checksum.clone(),
                right: other.registry_checksum.clone(),
            });
        }
        self.record_count += other.record_count;

        let (s, o) = (&mut self.structural, &other.structural);
        add_all(&mut s.turn_type, &o.turn_type);
        add_all(&mut s.role_sequence_pattern, &o.role_sequence_pattern);
        s.unique_roles.extend(o.unique_roles.iter().cloned());
        s.turns_total += o.turns_total;

        let (s, o) = (&mut self.semantic, &other.semantic);
        add_all(&mut s.tag_frequency, &o.tag_frequency);
        s.tree_depth_total += o.tree_depth_total;
        s.tree_width_total += o.tree_width_total;
        s.node_count_total += o.node_count_total;

        let (s, o) = (&mut self.syntactic, &other.syntactic);
        add_all(&mut s.delimiter, &o.delimiter);
        add_all(&mut s.prefix, &o.prefix);
        add_all(&mut s.suffix, &o.suffix);
        add_all(&mut s.special_token, &o.special_token);

        let (s, o) = (&mut self.metadata, &other.metadata);
        add_all(&mut s.task_type, &o.task_type);
        add_all(&mut s.token_length, &o.token_length);
        add_all(&mut s.language, &o.language);

        add_all(&mut self.warning_counts, &other.warning_counts);
        Ok(())
    }

    pub fn add_warning(&mut self, name: &str, n: u64) {
        if n > 0 {
            bump(&mut self.warning_counts, name, n);
        }
    }

    fn mean(&self, total: u64) -> f64 {
        if self.record_count == 0 {
            0.0
        } else {
            total as f64 / self.record_count as f64
        }
    }

    pub fn mean_turns(&self) -> f64 {
        self.mean(self.structural.turns_total)
    }

    pub fn mean_tree_depth(&self) -> f64 {
        self.mean(self.semantic.tree_depth_total)
    }

    pub fn mean_tree_width(&self) -> f64 {
        self.mean(self.semantic.tree_width_total)
    }

    pub fn mean_node_count(&self) -> f64 {
        self.mean(self.semantic.node_count_total)
    }
}

pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub trait LanguageDetector: Send + Sync {
    fn detect(&self, text: &str) -> String;
}

/// Reports every text as `und` (undetermined).
#[derive(Debug, Clone, Copy, Default)]
pub struct Undetermined;

impl LanguageDetector for Undetermined {
    fn detect(&self, _text: &str) -> String {
        "und".to_owned()
    }
}

/// Per-record inputs the profiler cannot derive from the prompt itself.
#[derive(Debug, Clone, Default)]
pub struct RecordMeta {
    pub task_type: Option<String>,
}

pub struct Profiler {
    registry_checksum: String,
    analyzer: SyntaxAnalyzer,
    tokenizer: Box<dyn Tokenizer>,
    language: Box<dyn LanguageDetector>,
}

impl Profiler {
    pub fn new(registry_checksum: impl Into<String>) -> Self {
        Profiler {
            registry_checksum: registry_checksum.into(),
            analyzer: SyntaxAnalyzer::default(),
            tokenizer: Box::new(WhitespaceTokenizer),
            language: Box::new(Undetermined),
        }
    }

    pub fn with_analyzer(mut self, analyzer: SyntaxAnalyzer) -> Self {
        self.analyzer = analyzer;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: impl Tokenizer + 'static) -> Self {
        self.tokenizer = Box::new(tokenizer);
        self
    }

    pub fn with_language_detector(mut self, detector: impl LanguageDetector + 'static) -> Self {
        self.language = Box::new(detector);
        self
    }

    pub fn empty(&self) -> DatasetProfile {
        DatasetProfile::empty(self.registry_checksum.clone())
    }

    pub fn profile_record(&self, ap: &AnnotatedPrompt) -> DatasetProfile {
        self.profile_record_with(ap, &RecordMeta::default())
    }

    pub fn profile_record_with(&self, ap: &AnnotatedPrompt, meta: &RecordMeta) -> DatasetProfile {
        let mut p = self.empty();
        p.record_count = 1;

        let roles: Vec<&Role> = ap.source.roles().collect();
        let users = roles.iter().filter(|r| **r == &Role::user()).count();
        let multi = users >= 2;
        let st = &mut p.structural;
        bump(&mut st.turn_type, if multi { "multi" } else { "single" }, 1);
        let pattern = roles.iter().map(|r| r.name()).collect::<Vec<_>>().join("→");
        bump(&mut st.role_sequence_pattern, &pattern, 1);
        st.unique_roles.extend(roles.iter().map(|r| r.name().to_owned()));
        st.turns_total = users as u64;

        // multi-turn: analyse only the terminal user message
        let analysed: Vec<usize> = if multi {
            ap.messages
                .iter()
                .rposition(|m| m.role == Role::user())
                .into_iter()
                .collect()
        } else {
            (0..ap.messages.len()).collect()
        };
        let components: Vec<&Component> = analysed
            .iter()
            .flat_map(|&i| ap.messages[i].components.iter())
            .collect();

        let mut tags: Vec<TagPath> = components.iter().map(|c| c.tag.clone()).collect();
        if multi && analysed.first().is_some_and(|&i| i > 0) {
            tags.push(TagPath::parse("historical_context").expect("valid tag"));
        }
        for tag in &tags {
            *p.semantic.tag_frequency.entry(tag.clone()).or_default() += 1;
        }
        let tree = tree_metrics(&tags);
        p.semantic.tree_depth_total = tree.depth as u64;
        p.semantic.tree_width_total = tree.width as u64;
        p.semantic.node_count_total = tree.node_count as u64;

        for comp in &components {
            self.count_syntax(&mut p.syntactic, comp);
        }

        let text: String = analysed
            .iter()
            .map(|&i| ap.messages[i].render(true))
            .collect::<Vec<_>>()
            .join("\n");
        let md = &mut p.metadata;
        *md.token_length
            .entry(self.tokenizer.count_tokens(&text) as u64)
            .or_default() += 1;
        bump(&mut md.language, &self.language.detect(&text), 1);
        if let Some(task) = &meta.task_type {
            bump(&mut md.task_type, task, 1);
        }

        p.add_warning("unknown_tags", ap.diagnostics.unknown_tags as u64);
        p.add_warning("markup_issues", ap.diagnostics.issues.len() as u64);
        p
    }

    fn count_syntax(&self, stats: &mut SyntacticStats, comp: &Component) {
        let delimiter = match &comp.metadata.delimiter {
            Some(info) => Some(info.kind),
            None => analyze_delimiter(comp.delimiter_after.as_deref()).map(|d| d.kind),
        };
        bump(&mut stats.delimiter, delimiter.map_or(NONE_BUCKET, |k| k.as_str()), 1);

        let computed;
        let markers = match &comp.metadata.markers {
            Some(m) => m,
            None => {
                computed = self.analyzer.markers(&comp.content);
                &computed
            }
        };
        bump(&mut stats.prefix, markers.prefix.as_str(), 1);
        bump(&mut stats.suffix, markers.suffix.as_str(), 1);
        if markers.special_tokens.is_empty() {
            bump(&mut stats.special_token, NONE_BUCKET, 1);
        }
        for (kind, n) in &markers.special_tokens {
            bump(&mut stats.special_token, kind, *n as u64);
        }
    }

    /// Profiles a batch in parallel; the result is independent of scheduling.
    pub fn profile_all(&self, records: &[AnnotatedPrompt]) -> DatasetProfile {
        records.par_iter().map(|ap| self.profile_record(ap)).reduce(
            || self.empty(),
            |a, b| a.merge(&b).expect("same profiler, same registry"),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn top3_kinds(counts: &BTreeMap<String, u64>) -> Vec<(String, f64)> {
    let mut dist: Vec<(String, f64)> = distribution(counts).into_iter().collect();
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    dist.truncate(3);
    dist.into_iter().map(|(k, p)| (k, round3(p))).collect()
}

/// The versioned JSON form of a profile.
pub fn report_json(p: &DatasetProfile) -> Value {
    let mut syntactic = Map::new();
    for (name, counts) in p.syntactic.dimensions() {
        syntactic.insert(
            name.to_owned(),
            json!({
                "counts": counts,
                "distribution": distribution(counts),
                "top3": top3_kinds(counts)
                    .into_iter()
                    .map(|(kind, proportion)| json!({"kind": kind, "proportion": proportion}))
                    .collect::<Vec<_>>(),
            }),
        );
    }
    let md = &p.metadata;
    json!({
        "schema": PROFILE_SCHEMA,
        "version": PROFILE_VERSION,
        "registry_checksum": p.registry_checksum,
        "record_count": p.record_count,
        "structural": {
            "turn_type": p.structural.turn_type,
            "role_sequence_pattern": p.structural.role_sequence_pattern,
            "unique_roles": p.structural.unique_roles,
            "mean_turns": p.mean_turns(),
        },
        "semantic": {
            "tag_frequency": p.semantic.tag_frequency.iter().map(|(k, v)| (k.canonical(), *v)).collect::<BTreeMap<_, _>>(),
            "top3": p.semantic.top3().into_iter().map(|(t, n)| json!({"tag": t.canonical(), "count": n})).collect::<Vec<_>>(),
            "mean_tree_width": p.mean_tree_width(),
            "mean_tree_depth": p.mean_tree_depth(),
            "mean_node_count": p.mean_node_count(),
        },
        "syntactic": syntactic,
        "metadata": {
            "task_type": md.task_type,
            "token_length": {
                "mean": md.token_mean(),
                "p50": md.token_percentile(0.5),
                "p95": md.token_percentile(0.95),
            },
            "language": md.language,
            "modality": "text",
        },
        "warnings": p.warning_counts,
    })
}

fn md_counts(out: &mut String, title: &str, counts: &BTreeMap<String, u64>) {
    out.push_str(&format!("\n### {title}\n\n"));
    if counts.is_empty() {
        out.push_str("_none_\n");
        return;
    }
    out.push_str("| value | count |\n|---|---|\n");
    for (k, v) in counts {
        out.push_str(&format!("| {k} | {v} |\n"));
    }
}

pub fn render_report(p: &DatasetProfile, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report_json(p)).expect("profile json");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => render_markdown(p),
    }
}

fn render_markdown(p: &DatasetProfile) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Dataset profile ({PROFILE_SCHEMA} v{PROFILE_VERSION})\n\n"));
    out.push_str(&format!(
        "- records: {}\n- registry: `{}`\n",
        p.record_count, p.registry_checksum
    ));

    out.push_str("\n## Structural\n");
    out.push_str(&format!("\nmean turns: {:.3}\n", p.mean_turns()));
    md_counts(&mut out, "Turn type", &p.structural.turn_type);
    md_counts(&mut out, "Role sequence", &p.structural.role_sequence_pattern);
    let roles: Vec<&str> = p.structural.unique_roles.iter().map(String::as_str).collect();
    out.push_str(&format!("\nunique roles: {}\n", roles.join(", ")));

    out.push_str("\n## Semantic\n\n");
    out.push_str(&format!(
        "mean tree width: {:.3}, mean tree depth: {:.3}, mean node count: {:.3}\n",
        p.mean_tree_width(),
        p.mean_tree_depth(),
        p.mean_node_count()
    ));
    let top: Vec<String> = p.semantic.top3().iter().map(|(t, n)| format!("{t} ({n})")).collect();
    out.push_str(&format!(
        "\ntop components: {}\n",
        if top.is_empty() {
            "_none_".into()
        } else {
            top.join(", ")
        }
    ));
    let freq: BTreeMap<String, u64> = p
        .semantic
        .tag_frequency
        .iter()
        .map(|(k, v)| (k.canonical(), *v))
        .collect();
    md_counts(&mut out, "Tag frequency", &freq);

    out.push_str("\n## Syntactic\n\n| dimension | 1st | 2nd | 3rd |\n|---|---|---|---|\n");
    for (name, counts) in p.syntactic.dimensions() {
        let mut cells: Vec<String> = top3_kinds(counts)
            .into_iter()
            .map(|(k, v)| format!("{k} {v:.3}"))
            .collect();
        cells.resize(3, "-".into());
        out.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    }

    out.push_str("\n## Metadata\n");
    let md = &p.metadata;
    out.push_str(&format!(
        "\ntoken length: mean {:.3}, p50 {}, p95 {}\n\nmodality: text\n",
        md.token_mean(),
        md.token_percentile(0.5),
        md.token_percentile(0.95)
    ));
    md_counts(&mut out, "Task type", &md.task_type);
    md_counts(&mut out, "Language", &md.language);
    md_counts(&mut out, "Warnings", &p.warning_counts);
    out
}
