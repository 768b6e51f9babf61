//! ROUGE-L scoring, summary statistics, one-way ANOVA and the sensitivity
//! and refinement experiment runners.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm_gateway::{
    cot_instruction, fill_template, generate_refinements, ChatRequest, Gateway, GatewayError, RefineRequest, Strategy,
};
use crate::perturb::{target_text, DelimiterPosition, PerturbError, PerturbationSpec, ReorderPosition};
use crate::prompt_model::AnnotatedPrompt;
use crate::taxonomy::TagRegistry;

pub const REPORT_SCHEMA: &str = "promptprism_experiment";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sample")]
    EmptySample,
    #[error("baseline is zero")]
    ZeroBaseline,
    #[error("ANOVA needs at least 2 groups, got {0}")]
    InsufficientGroups(usize),
    #[error("ANOVA group {group} has {len} samples, need at least 2")]
    InsufficientSamples { group: usize, len: usize },
    #[error("task has no instances")]
    NoInstances,
    #[error("prompt has no {{input}} placeholder")]
    MissingPlaceholder,
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RougeConfig {
    pub beta: f64,
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for RougeConfig {
    fn default() -> Self {
        RougeConfig {
            beta: 1.0,
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl RougeConfig {
    pub fn describe(&self) -> String {
        format!(
            "ROUGE-L F(beta={}), lowercase={}, strip_punctuation={}, whitespace tokens",
            self.beta, self.lowercase, self.strip_punctuation
        )
    }
}

pub fn tokenize(text: &str, cfg: &RougeConfig) -> Vec<String> {
    let text = if cfg.lowercase {
        text.to_lowercase()
    } else {
        text.to_owned()
    };
    let text: String = if cfg.strip_punctuation {
        text.chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect()
    } else {
        text
    };
    text.split_whitespace().map(str::to_owned).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure over token sequences.
pub fn rouge_l_tokens<T: PartialEq>(reference: &[T], candidate: &[T], beta: f64) -> f64 {
    match (reference.is_empty(), candidate.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(reference, candidate) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_with(reference: &str, candidate: &str, cfg: &RougeConfig) -> f64 {
    rouge_l_tokens(&tokenize(reference, cfg), &tokenize(candidate, cfg), cfg.beta)
}

pub fn rouge_l(reference: &str, candidate: &str) -> f64 {
    rouge_l_with(reference, candidate, &RougeConfig::default())
}

/// Best score over several references; 0 when there are none.
pub fn rouge_l_multi<S: AsRef<str>>(references: &[S], candidate: &str, cfg: &RougeConfig) -> f64 {
    let cand = tokenize(candidate, cfg);
    references
        .iter()
        .map(|r| rouge_l_tokens(&tokenize(r.as_ref(), cfg), &cand, cfg.beta))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub n: usize,
    pub mean: f64,
    /// Sample (n-1) standard deviation; absent for a single value.
    pub std: Option<f64>,
}

pub fn descriptive(scores: &[f64]) -> Result<Descriptive, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        let ss: f64 = scores.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Descriptive { n, mean, std })
}

/// Fractional change `(variant - baseline) / baseline`.
pub fn relative_change(baseline: f64, variant: f64) -> Result<f64, EvalError> {
    if baseline == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok((variant - baseline) / baseline)
}

/// Signed integer percent, e.g. `+12%`, `-3%`, `0%`.
pub fn format_percent(change: f64) -> String {
    let pct = (change * 100.0).round();
    if pct == 0.0 {
        "0%".to_owned()
    } else {
        format!("{pct:+}%")
    }
}

mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad F statistic {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    #[serde(with = "maybe_infinite")]
    pub f_stat: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
    pub significant: bool,
    pub alpha: f64,
}

/// Between- and within-group sums of squares.
pub fn anova_sums(groups: &[Vec<f64>]) -> (f64, f64) {
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    (ssb, ssw)
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult, EvalError> {
    one_way_anova_at(groups, 0.05)
}

pub fn one_way_anova_at(groups: &[Vec<f64>], alpha: f64) -> Result<AnovaResult, EvalError> {
    if groups.len() < 2 {
        return Err(EvalError::InsufficientGroups(groups.len()));
    }
    if let Some((group, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(EvalError::InsufficientSamples { group, len: g.len() });
    }
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    let (df_b, df_w) = (k - 1, n - k);
    let (ssb, ssw) = anova_sums(groups);
    // relative tolerance so that float noise in identical groups reads as zero
    let scale = groups.iter().flatten().map(|x| x * x).sum::<f64>().max(1.0);
    let eps = 1e-12 * scale;
    let (f_stat, p_value) = if ssb <= eps {
        (0.0, 1.0)
    } else if ssw <= eps {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ssb / df_b as f64) / (ssw / df_w as f64);
        let x = df_w as f64 / (df_w as f64 + df_b as f64 * f);
        let p = statrs::function::beta::beta_reg(df_w as f64 / 2.0, df_b as f64 / 2.0, x);
        (f, p.clamp(0.0, 1.0))
    };
    Ok(AnovaResult {
        f_stat,
        df_between: df_b,
        df_within: df_w,
        p_value,
        significant: p_value < alpha,
        alpha,
    })
}

/// Super-NI style task layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBundle {
    #[serde(default)]
    pub name: Option<String>,
    pub definition: String,
    pub instances: Vec<Instance>,
    #[serde(default)]
    pub positive_examples: Vec<Exemplar>,
    #[serde(default)]
    pub negative_examples: Vec<Exemplar>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(default)]
    pub id: Option<String>,
    pub input: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

pub fn format_exemplars(examples: &[Exemplar]) -> String {
    examples
        .iter()
        .map(|e| format!("Input: {}\nOutput: {}", e.input, e.output))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    /// Fraction relative to the baseline row; absent for a zero baseline.
    pub relative_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    /// SHA-256 over the ordered request digests of every scored run.
    pub transcript_digest: String,
    pub calls: usize,
    /// Digest of the resolved command-line configuration, when run from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub version: u32,
    pub kind: String,
    pub metric: String,
    pub baseline: String,
    pub rows: Vec<ReportRow>,
    /// Absent when some group has fewer than two runs.
    pub anova: Option<AnovaResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anova_skipped: Option<String>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} report\n", self.kind);
        let _ = writeln!(out, "Metric: {}\n", self.metric);
        let _ = writeln!(out, "| Variant | Score (std) | Change vs {} |", self.baseline);
        out.push_str("|---|---|---|\n");
        for row in &self.rows {
            let std = row.std.map_or("n/a".to_owned(), |s| format!("{s:.2}"));
            let change = if row.label == self.baseline {
                "-".to_owned()
            } else {
                row.relative_change.map_or("n/a".to_owned(), format_percent)
            };
            let _ = writeln!(out, "| {} | {:.2} ({}) | {} |", row.label, row.mean, std, change);
        }
        match (&self.anova, &self.anova_skipped) {
            (Some(a), _) => {
                let f = if a.f_stat.is_infinite() {
                    "inf".to_owned()
                } else {
                    format!("{:.3}", a.f_stat)
                };
                let _ = writeln!(
                    out,
                    "\nANOVA: F({}, {}) = {}, p = {:.4}{}",
                    a.df_between,
                    a.df_within,
                    f,
                    a.p_value,
                    if a.significant { " ***" } else { "" }
                );
            }
            (None, reason) => {
                let _ = writeln!(
                    out,
                    "\nANOVA: not computed ({})",
                    reason.as_deref().unwrap_or("no groups")
                );
            }
        }
        let _ = writeln!(out, "\nconfig digest: {}", self.provenance.config_digest);
        let _ = writeln!(out, "transcript digest: {}", self.provenance.transcript_digest);
        if let Some(d) = &self.provenance.run_config_digest {
            let _ = writeln!(out, "run config digest: {d}");
        }
        out
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("config serializes")))
}

fn digest_lines(digests: &[String]) -> String {
    let mut h = Sha256::new();
    for d in digests {
        h.update(d.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Scores `groups[i]` into rows, relative changes against `baseline` and
/// an ANOVA across all groups.
fn assemble(
    kind: &str,
    labels: &[String],
    groups: Vec<Vec<f64>>,
    baseline: &str,
    rouge: &RougeConfig,
    alpha: f64,
    provenance: Provenance,
) -> Result<ExperimentReport, EvalError> {
    let stats: Vec<Descriptive> = groups.iter().map(|g| descriptive(g)).collect::<Result<_, _>>()?;
    let base_mean = labels
        .iter()
        .zip(&stats)
        .find(|(l, _)| *l == baseline)
        .map(|(_, d)| d.mean)
        .unwrap_or(f64::NAN);
    let rows = labels
        .iter()
        .zip(&stats)
        .map(|(label, d)| ReportRow {
            label: label.clone(),
            n: d.n,
            mean: d.mean,
            std: d.std,
            relative_change: relative_change(base_mean, d.mean).ok().filter(|c| c.is_finite()),
        })
        .collect();
    let (anova, anova_skipped) = match one_way_anova_at(&groups, alpha) {
        Ok(a) => (Some(a), None),
        Err(e @ (EvalError::InsufficientGroups(_) | EvalError::InsufficientSamples { .. })) => {
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    Ok(ExperimentReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        kind: kind.into(),
        metric: rouge.describe(),
        baseline: baseline.into(),
        rows,
        anova,
        anova_skipped,
        provenance,
    })
}

/// Runs one inference per job and returns ×100 scores plus request digests,
/// in job order.
fn score_jobs(
    gateway: &Gateway,
    jobs: Vec<(ChatRequest, &[String])>,
    rouge: &RougeConfig,
) -> Result<(Vec<f64>, Vec<String>), EvalError> {
    let results: Vec<(f64, String)> = jobs
        .into_par_iter()
        .map(|(req, gold)| {
            let out = gateway.chat(&req)?;
            Ok((100.0 * rouge_l_multi(gold, &out, rouge), req.digest()))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(results.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub backend: String,
    pub runs_per_variant: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Send the prompt with taxonomy tags stripped.
    pub remove_tags: bool,
    pub rouge: RougeConfig,
    pub alpha: f64,
}

impl SensitivityConfig {
    pub fn new(backend: impl Into<String>) -> Self {
        SensitivityConfig {
            backend: backend.into(),
            runs_per_variant: 50,
            seed: 0,
            temperature: 0.0,
            max_output_tokens: 512,
            remove_tags: true,
            rouge: RougeConfig::default(),
            alpha: 0.05,
        }
    }
}

pub const BASELINE_LABEL: &str = "baseline";

/// The four delimiter patterns compared in the delimiter suite.
pub const DELIMITER_SUITE: [&str; 4] = ["\n\n", "\n#####\n", "\t", "   "];

/// Inverse of [`crate::perturb::parse_escaped`], used in variant labels.
pub fn escape_delimiter(d: &str) -> String {
    let mut out = String::with_capacity(d.len());
    for c in d.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

/// Every category × position reorder, labelled `category/position`.
///
/// With no explicit categories, uses the top-level categories of the target
/// message in order of first appearance.
pub fn ordering_variants(baseline: &AnnotatedPrompt, categories: &[String]) -> Vec<(String, PerturbationSpec)> {
    let cats: Vec<String> = if categories.is_empty() {
        let mut seen: Vec<String> = Vec::new();
        if let Some(t) = baseline.target_message() {
            for c in baseline.messages[t].ordered() {
                let cat = c.tag.category().canonical();
                if !seen.contains(&cat) {
                    seen.push(cat);
                }
            }
        }
        seen
    } else {
        categories.to_vec()
    };
    cats.iter()
        .flat_map(|cat| {
            ReorderPosition::ALL.into_iter().map(move |position| {
                (
                    format!("{cat}/{}", position.as_str()),
                    PerturbationSpec::Reorder {
                        component: cat.clone(),
                        position,
                    },
                )
            })
        })
        .collect()
}

/// One variant per [`DELIMITER_SUITE`] entry, applied to every slot.
pub fn delimiter_variants() -> Vec<(String, PerturbationSpec)> {
    DELIMITER_SUITE
        .iter()
        .map(|d| {
            (
                format!("delimiter {}", escape_delimiter(d)),
                PerturbationSpec::Delimiter {
                    new: (*d).to_owned(),
                    position: DelimiterPosition::All,
                },
            )
        })
        .collect()
}

/// Scores the baseline prompt and each perturbed variant.
///
/// The target message must contain an `{input}` placeholder; run `r` fills it
/// with instance `r mod n` and uses seed `seed + r`.
pub fn run_sensitivity(
    gateway: &Gateway,
    registry: &TagRegistry,
    baseline: &AnnotatedPrompt,
    variants: &[(String, PerturbationSpec)],
    instances: &[Instance],
    cfg: &SensitivityConfig,
) -> Result<ExperimentReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    let mut labels = vec![BASELINE_LABEL.to_owned()];
    let mut texts = vec![target_text(baseline, cfg.remove_tags)];
    for (label, spec) in variants {
        let mut ap = baseline.clone();
        spec.apply(&mut ap, registry)?;
        labels.push(label.clone());
        texts.push(target_text(&ap, cfg.remove_tags));
    }
    if !texts[0].contains("{input}") {
        return Err(EvalError::MissingPlaceholder);
    }

    let runs = cfg.runs_per_variant;
    let mut jobs = Vec::with_capacity(texts.len() * runs);
    for text in &texts {
        for r in 0..runs {
            let inst = &instances[r % instances.len()];
            let prompt = fill_template(text, &[("input", &inst.input)]);
            let req = ChatRequest::user(cfg.backend.clone(), prompt)
                .with_temperature(cfg.temperature)
                .with_max_output_tokens(cfg.max_output_tokens)
                .with_seed(Some(cfg.seed.wrapping_add(r as u64)));
            jobs.push((req, inst.outputs.as_slice()));
        }
    }
    let (scores, digests) = score_jobs(gateway, jobs, &cfg.rouge)?;
    let groups: Vec<Vec<f64>> = if runs == 0 {
        vec![Vec::new(); texts.len()]
    } else {
        scores.chunks(runs).map(<[f64]>::to_vec).collect()
    };

    #[derive(Serialize)]
    struct Digestible<'a> {
        cfg: &'a SensitivityConfig,
        prompt: &'a crate::prompt_model::Prompt,
        variants: &'a [(String, PerturbationSpec)],
        instances: &'a [Instance],
    }
    let config_digest = sha256_json(&Digestible {
        cfg,
        prompt: &baseline.source,
        variants,
        instances,
    });
    let provenance = Provenance {
        config_digest,
        transcript_digest: digest_lines(&digests),
        calls: digests.len(),
        run_config_digest: None,
    };
    assemble(
        "sensitivity",
        &labels,
        groups,
        BASELINE_LABEL,
        &cfg.rouge,
        cfg.alpha,
        provenance,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub backend: String,
    pub strategies: Vec<Strategy>,
    pub shots: usize,
    /// Number of refined prompts sampled for the taxonomy strategy.
    pub variants: usize,
    pub refine_temperature: f64,
    pub instances: usize,
    pub seed: u64,
    pub max_output_tokens: u32,
    pub rouge: RougeConfig,
    pub alpha: f64,
}

impl RefinementConfig {
    pub fn new(backend: impl Into<String>) -> Self {
        RefinementConfig {
            backend: backend.into(),
            strategies: Strategy::ALL.to_vec(),
            shots: 2,
            variants: 5,
            refine_temperature: 0.7,
            instances: 10,
            seed: 0,
            max_output_tokens: 512,
            rouge: RougeConfig::default(),
            alpha: 0.05,
        }
    }
}

/// Inference prompt for one instance; exemplars appear only when `shots > 0`.
pub fn assemble_prompt(instruction: &str, task: &TaskBundle, shots: usize, input: &str) -> String {
    let mut out = instruction.trim_end().to_owned();
    let take = shots.min(task.positive_examples.len());
    if take > 0 {
        out.push_str("\n\n### Examples ###\n");
        out.push_str(&format_exemplars(&task.positive_examples[..take]));
    }
    out.push_str("\n\nInput: ");
    out.push_str(input);
    out.push_str("\nOutput:");
    out
}

/// Seeded sample of instance indices (without replacement).
pub fn sample_instances(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx
}

/// Compares default, chain-of-thought and taxonomy-refined instructions on a
/// task. Every strategy gets `variants × instances` runs at temperature 0;
/// changes are reported against the chain-of-thought row.
pub fn run_refinement(
    gateway: &Gateway,
    registry: &TagRegistry,
    task: &TaskBundle,
    cfg: &RefinementConfig,
) -> Result<ExperimentReport, EvalError> {
    if task.instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    let picked = sample_instances(task.instances.len(), cfg.instances, cfg.seed);
    let per_strategy = cfg.variants.max(1);

    let mut labels = Vec::new();
    let mut instruction_sets: Vec<Vec<String>> = Vec::new();
    for &strategy in &cfg.strategies {
        let set = match strategy {
            Strategy::Default => vec![task.definition.clone(); per_strategy],
            Strategy::Cot => vec![cot_instruction(&task.definition); per_strategy],
            Strategy::Taxonomy => {
                let take = cfg.shots;
                let req = RefineRequest {
                    base_instruction: task.definition.clone(),
                    positive_examples: format_exemplars(
                        &task.positive_examples[..take.min(task.positive_examples.len())],
                    ),
                    negative_examples: format_exemplars(
                        &task.negative_examples[..take.min(task.negative_examples.len())],
                    ),
                    k: per_strategy,
                    temperature: cfg.refine_temperature,
                    seed: cfg.seed,
                };
                generate_refinements(gateway, &cfg.backend, registry, &req)?
            }
        };
        labels.push(strategy.as_str().to_owned());
        instruction_sets.push(set);
    }

    let mut jobs = Vec::new();
    for set in &instruction_sets {
        for (v, instruction) in set.iter().enumerate() {
            for &i in &picked {
                let inst = &task.instances[i];
                let req = ChatRequest::user(
                    cfg.backend.clone(),
                    assemble_prompt(instruction, task, cfg.shots, &inst.input),
                )
                .with_temperature(0.0)
                .with_max_output_tokens(cfg.max_output_tokens)
                .with_seed(Some(cfg.seed.wrapping_add(v as u64)));
                jobs.push((req, inst.outputs.as_slice()));
            }
        }
    }
    let (scores, digests) = score_jobs(gateway, jobs, &cfg.rouge)?;
    let runs = per_strategy * picked.len();
    let groups: Vec<Vec<f64>> = if runs == 0 {
        vec![Vec::new(); labels.len()]
    } else {
        scores.chunks(runs).map(<[f64]>::to_vec).collect()
    };

    #[derive(Serialize)]
    struct Digestible<'a> {
        cfg: &'a RefinementConfig,
        task: &'a TaskBundle,
    }
    let provenance = Provenance {
        config_digest: sha256_json(&Digestible { cfg, task }),
        transcript_digest: digest_lines(&digests),
        calls: digests.len(),
        run_config_digest: None,
    };
    assemble(
        "refinement",
        &labels,
        groups,
        Strategy::Cot.as_str(),
        &cfg.rouge,
        cfg.alpha,
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert!((rouge_l("the cat sat", "the cat") - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l("a b c", "d e f"), 0.0);
        assert_eq!(rouge_l("", ""), 1.0);
        assert_eq!(rouge_l("", "x"), 0.0);
        assert_eq!(rouge_l("The Cat, sat!", "the cat sat"), 1.0);
    }

    #[test]
    fn rouge_beta_weights_recall() {
        let cfg = RougeConfig {
            beta: 2.0,
            ..Default::default()
        };
        // P = 1, R = 2/3
        let want = 5.0 * (2.0 / 3.0) / (2.0 / 3.0 + 4.0);
        assert!((rouge_l_with("the cat sat", "the cat", &cfg) - want).abs() < 1e-12);
    }

    #[test]
    fn multi_reference_takes_max() {
        let cfg = RougeConfig::default();
        assert_eq!(rouge_l_multi(&["nope", "yes indeed"], "yes indeed", &cfg), 1.0);
        assert_eq!(rouge_l_multi::<&str>(&[], "x", &cfg), 0.0);
    }

    #[test]
    fn descriptive_examples() {
        let d = descriptive(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((d.mean, d.std), (5.0, Some(0.0)));
        let d = descriptive(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.mean, 2.5);
        assert!((d.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(descriptive(&[7.0]).unwrap().std, None);
        assert!(matches!(descriptive(&[]), Err(EvalError::EmptySample)));
    }

    #[test]
    fn relative_change_display() {
        let c = relative_change(56.49, 63.37).unwrap();
        assert!((c - 0.12179).abs() < 1e-4);
        assert_eq!(format_percent(c), "+12%");
        assert_eq!(format_percent(relative_change(3.0, 3.0).unwrap()), "0%");
        assert_eq!(format_percent(-0.051), "-5%");
        assert_eq!(format_percent(-0.001), "0%");
        assert!(matches!(relative_change(0.0, 1.0), Err(EvalError::ZeroBaseline)));
    }

    #[test]
    fn anova_examples() {
        let r = one_way_anova(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!((r.f_stat - 8.0).abs() < 1e-12);
        assert_eq!((r.df_between, r.df_within), (1, 2));
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!((r.f_stat, r.p_value), (0.0, 1.0));
        assert!(!r.significant);
        let r = one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(r.f_stat.is_infinite() && r.p_value == 0.0);
        let r = one_way_anova(&[vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!((r.f_stat, r.p_value), (0.0, 1.0));
        assert!(matches!(
            one_way_anova(&[vec![1.0, 2.0]]),
            Err(EvalError::InsufficientGroups(1))
        ));
        assert!(matches!(
            one_way_anova(&[vec![1.0, 2.0], vec![3.0]]),
            Err(EvalError::InsufficientSamples { group: 1, len: 1 })
        ));
    }

    #[test]
    fn anova_p_for_f8() {
        // F(1, 2) = t(2)^2 and P(|T| > t) = 1 - t / sqrt(t^2 + 2)
        let r = one_way_anova(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!((r.p_value - (1.0 - 0.8f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn infinite_f_roundtrips() {
        let r = one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"f_stat\":\"inf\""));
        let back: AnovaResult = serde_json::from_str(&text).unwrap();
        assert!(back.f_stat.is_infinite());
    }

    #[test]
    fn prompt_assembly_respects_shots() {
        let task = TaskBundle {
            name: None,
            definition: "Answer.".into(),
            instances: vec![],
            positive_examples: vec![Exemplar {
                input: "1+1".into(),
                output: "2".into(),
                explanation: None,
            }],
            negative_examples: vec![],
        };
        let zero = assemble_prompt("Answer.", &task, 0, "2+2");
        let two = assemble_prompt("Answer.", &task, 2, "2+2");
        assert_eq!(zero, "Answer.\n\nInput: 2+2\nOutput:");
        assert!(two.contains("Input: 1+1\nOutput: 2"));
    }

    #[test]
    fn instance_sampling_is_seeded() {
        assert_eq!(sample_instances(20, 10, 3), sample_instances(20, 10, 3));
        assert_eq!(sample_instances(4, 10, 1).len(), 4);
        let mut s = sample_instances(20, 20, 9);
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn suites() {
        use crate::perturb::parse_escaped;
        use crate::prompt_model::{parse_annotated, Prompt};
        use crate::taxonomy::Role;
        for d in DELIMITER_SUITE {
            assert_eq!(parse_escaped(&escape_delimiter(d)).unwrap(), d);
        }
        let labels: Vec<String> = delimiter_variants().into_iter().map(|v| v.0).collect();
        assert_eq!(labels[3], "delimiter \\s\\s\\s");

        let reg = TagRegistry::builtin();
        let text =
            "<instruction:task>a</instruction:task> <request_query>b</request_query> <instruction>c</instruction>";
        let ap = parse_annotated(&Prompt::single(Role::user(), text), &reg).unwrap();
        let labels: Vec<String> = ordering_variants(&ap, &[]).into_iter().map(|v| v.0).collect();
        assert_eq!(
            labels,
            [
                "instruction/first",
                "instruction/middle",
                "instruction/last",
                "request_query/first",
                "request_query/middle",
                "request_query/last"
            ]
        );
        assert_eq!(ordering_variants(&ap, &["tools".into()]).len(), 3);
    }
}
