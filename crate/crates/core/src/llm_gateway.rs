//! Chat backends and the meta-prompt workflows built on them: annotation,
//! task-type classification and taxonomy-guided refinement.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt_model::{parse_lenient, AnnotatedPrompt, Message, ParseDiagnostics, ParseError, Prompt};
use crate::taxonomy::{Role, TagRegistry};

pub const ANNOTATE_TEMPLATE: &str = include_str!("../templates/annotate.txt");
pub const CLASSIFY_TEMPLATE: &str = include_str!("../templates/classify_task.txt");
pub const REFINE_TEMPLATE: &str = include_str!("../templates/refine.txt");

/// Appended to the base instruction for the chain-of-thought baseline.
pub const COT_SUFFIX: &str = "Please think step by step and then solve the task.";

// Hand-written few-shot pair for the annotation template.
const ANNOTATE_EXAMPLE_INPUT: &str =
    "You are a helpful travel assistant. Suggest three weekend trips from Boston. Answer in a bulleted list.";
const ANNOTATE_EXAMPLE_OUTPUT: &str = "<instruction:guideline:role>You are a helpful travel assistant.</instruction:guideline:role> <request_query>Suggest three weekend trips from Boston.</request_query> <output_const:format>Answer in a bulleted list.</output_const:format>";
const CLASSIFY_EXAMPLE_INPUT: &str = "Decide whether the following movie review is positive or negative.";
const CLASSIFY_EXAMPLE_OUTPUT: &str = "Classification:Sentiment Analysis";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend {0:?} is not registered")]
    BackendUnavailable(String),
    #[error("environment variable {0} is not set")]
    AuthMissing(String),
    #[error("call budget of {cap} exhausted")]
    BudgetExceeded { cap: u64 },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("transport failure: {message}")]
    Transport { message: String, transient: bool },
    #[error("no fixture for request digest {0}")]
    FixtureMissing(String),
    #[error("annotation output contained no recoverable components ({0} diagnostics)")]
    AnnotationUnparseable(usize),
    #[error("only {got} of {wanted} refinements parsed within the retry budget")]
    InsufficientVariants { wanted: usize, got: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transport { transient: true, .. })
    }
}

fn load_err(path: &Path, reason: impl fmt::Display) -> GatewayError {
    GatewayError::Load {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub backend: String,
}

#[derive(Serialize)]
struct DigestView<'a> {
    messages: &'a [Message],
    temperature: f64,
    max_output_tokens: u32,
    seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(backend: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            messages,
            temperature: 0.0,
            max_output_tokens: 1024,
            seed: None,
            backend: backend.into(),
        }
    }

    pub fn user(backend: impl Into<String>, content: impl Into<String>) -> Self {
        ChatRequest::new(backend, vec![Message::new(Role::user(), content)])
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except the backend name,
    /// so a transcript recorded live replays through the mock.
    pub fn digest(&self) -> String {
        let view = DigestView {
            messages: &self.messages,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&view).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub request_digest: String,
    pub backend: String,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
    pub retries: u32,
    pub timestamp_ms: u64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

type Fallback = Box<dyn Fn(&ChatRequest) -> String + Send + Sync>;

/// Deterministic backend keyed by request digest.
#[derive(Default)]
pub struct MockBackend {
    fixtures: HashMap<String, String>,
    fallback: Option<Fallback>,
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend::default()
    }

    pub fn from_map(fixtures: HashMap<String, String>) -> Self {
        MockBackend {
            fixtures,
            fallback: None,
        }
    }

    /// Response function consulted when no fixture matches.
    pub fn with_fallback(mut self, f: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Self {
        self.fallback = Some(Box::new(f));
        self
    }

    pub fn insert(&mut self, request: &ChatRequest, response: impl Into<String>) {
        self.fixtures.insert(request.digest(), response.into());
    }

    /// JSON object mapping request digest to response text.
    pub fn from_fixture_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| load_err(path, e))?;
        let fixtures = serde_json::from_str(&text).map_err(|e| load_err(path, e))?;
        Ok(MockBackend::from_map(fixtures))
    }

    /// Replays the successful calls of a JSON Lines transcript.
    pub fn from_transcript(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path).map_err(|e| load_err(path, e))?;
        let mut fixtures = HashMap::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: BackendRecord =
                serde_json::from_str(&line).map_err(|e| load_err(path, format!("line {}: {e}", n + 1)))?;
            if let Some(resp) = rec.response {
                fixtures.insert(rec.request_digest, resp);
            }
        }
        Ok(MockBackend::from_map(fixtures))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let digest = request.digest();
        if let Some(text) = self.fixtures.get(&digest) {
            return Ok(text.clone());
        }
        match &self.fallback {
            Some(f) => Ok(f(request)),
            None => Err(GatewayError::FixtureMissing(digest)),
        }
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        HttpBackend { config, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

fn transport(e: ureq::Error) -> GatewayError {
    let transient = match &e {
        ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled => true,
        _ => false,
    };
    GatewayError::Transport {
        message: e.to_string(),
        transient,
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let key = std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::AuthMissing(self.config.api_key_env.clone()))?;
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role.name(), "content": m.content}))
            .collect();
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = seed.into();
        }
        let mut resp = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", format!("Bearer {key}"))
            .send_json(&body)
            .map_err(transport)?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(transport)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::Transport {
                message: "response has no choices[0].message.content".into(),
                transient: false,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub call_cap: Option<u64>,
    pub max_in_flight: usize,
    /// Requests per second; `None` disables rate limiting.
    pub rate_per_sec: Option<f64>,
    pub burst: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_retries: 3,
            base_backoff_ms: 500,
            call_cap: None,
            max_in_flight: 4,
            rate_per_sec: None,
            burst: 1,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = lock(&self.free);
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *lock(&self.0.free) += 1;
        self.0.cv.notify_one();
    }
}

struct TokenBucket {
    tokens: f64,
    last: Instant,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Routes requests to named backends with retry, call budget, bounded
/// concurrency, rate limiting and a transcript log.
pub struct Gateway {
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    config: GatewayConfig,
    calls: AtomicU64,
    slots: Semaphore,
    bucket: Mutex<TokenBucket>,
    transcript: Mutex<Vec<BackendRecord>>,
    sink: Mutex<Option<Box<dyn Write + Send>>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Gateway {
            backends: BTreeMap::new(),
            slots: Semaphore {
                free: Mutex::new(config.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            bucket: Mutex::new(TokenBucket {
                tokens: config.burst.max(1) as f64,
                last: Instant::now(),
            }),
            config,
            calls: AtomicU64::new(0),
            transcript: Mutex::new(Vec::new()),
            sink: Mutex::new(None),
        }
    }

    pub fn with_backend(mut self, name: impl Into<String>, backend: impl ChatBackend + 'static) -> Self {
        self.register(name, backend);
        self
    }

    pub fn register(&mut self, name: impl Into<String>, backend: impl ChatBackend + 'static) {
        self.backends.insert(name.into(), Arc::new(backend));
    }

    /// Streams every transcript record as a JSON line to `sink`.
    pub fn with_transcript_sink(self, sink: impl Write + Send + 'static) -> Self {
        *lock(&self.sink) = Some(Box::new(sink));
        self
    }

    pub fn backend_names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn transcript(&self) -> Vec<BackendRecord> {
        lock(&self.transcript).clone()
    }

    fn throttle(&self) {
        let Some(rate) = self.config.rate_per_sec.filter(|r| *r > 0.0) else {
            return;
        };
        let burst = self.config.burst.max(1) as f64;
        loop {
            let wait = {
                let mut b = lock(&self.bucket);
                let now = Instant::now();
                b.tokens = (b.tokens + now.duration_since(b.last).as_secs_f64() * rate).min(burst);
                b.last = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return;
                }
                (1.0 - b.tokens) / rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    fn log(&self, record: BackendRecord) {
        let mut transcript = lock(&self.transcript);
        if let Some(sink) = lock(&self.sink).as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            // a broken sink must not fail the call; the in-memory log keeps it
            let _ = writeln!(sink, "{line}").and_then(|_| sink.flush());
        }
        transcript.push(record);
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let backend = self
            .backends
            .get(&request.backend)
            .ok_or_else(|| GatewayError::BackendUnavailable(request.backend.clone()))?;
        if let Some(cap) = self.config.call_cap {
            if self.calls.fetch_add(1, Ordering::SeqCst) >= cap {
                return Err(GatewayError::BudgetExceeded { cap });
            }
        } else {
            self.calls.fetch_add(1, Ordering::SeqCst);
        }

        let _permit = self.slots.acquire();
        let start = Instant::now();
        let mut retries = 0;
        let result = loop {
            self.throttle();
            match backend.complete(request) {
                Err(e) if e.is_transient() && retries < self.config.max_retries => {
                    let backoff = self.config.base_backoff_ms.saturating_mul(1 << retries.min(16));
                    std::thread::sleep(Duration::from_millis(backoff));
                    retries += 1;
                }
                other => break other,
            }
        };
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.log(BackendRecord {
            request_digest: request.digest(),
            backend: request.backend.clone(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
            latency_ms: start.elapsed().as_millis() as u64,
            retries,
            timestamp_ms,
        });
        result
    }
}

/// Single pass `{slot}` substitution; unknown slots and substituted text are
/// left untouched.
pub fn fill_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            slots.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn template_checksums() -> Vec<(&'static str, String)> {
    [
        ("annotate", ANNOTATE_TEMPLATE),
        ("classify_task", CLASSIFY_TEMPLATE),
        ("refine", REFINE_TEMPLATE),
    ]
    .into_iter()
    .map(|(name, body)| (name, hex::encode(Sha256::digest(body.as_bytes()))))
    .collect()
}

/// Result of annotating one prompt.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub tagged: Prompt,
    pub parsed: AnnotatedPrompt,
}

impl Annotation {
    pub fn diagnostics(&self) -> &ParseDiagnostics {
        &self.parsed.diagnostics
    }
}

/// Annotates every message of `raw` with one chat call each.
pub fn annotate_prompt(
    gateway: &Gateway,
    backend: &str,
    registry: &TagRegistry,
    raw: &Prompt,
) -> Result<Annotation, GatewayError> {
    let listing = registry.render_listing();
    let mut messages = Vec::with_capacity(raw.messages.len());
    for msg in &raw.messages {
        let meta = fill_template(
            ANNOTATE_TEMPLATE,
            &[
                ("prompt_taxonomy", listing.trim_end()),
                ("example_input_prompt", ANNOTATE_EXAMPLE_INPUT),
                ("example_output", ANNOTATE_EXAMPLE_OUTPUT),
                ("input_prompt_to_be_annotated", &msg.content),
            ],
        );
        let tagged = gateway.chat(&ChatRequest::user(backend, meta))?;
        messages.push(Message::new(msg.role.clone(), tagged));
    }
    let tagged = Prompt {
        id: raw.id.clone(),
        messages,
    };
    let parsed = parse_lenient(&tagged, registry)?;
    if parsed.component_count() == 0 {
        return Err(GatewayError::AnnotationUnparseable(parsed.diagnostics.count_all()));
    }
    Ok(Annotation { tagged, parsed })
}

/// The closed task-type vocabulary, with parenthetical examples removed.
pub fn task_vocabulary() -> &'static [String] {
    static VOCAB: std::sync::LazyLock<Vec<String>> = std::sync::LazyLock::new(|| {
        let paren = Regex::new(r"\s*\(.*\)\s*$").expect("valid regex");
        CLASSIFY_TEMPLATE
            .lines()
            .skip_while(|l| !l.starts_with("### Prompt Task Type Options"))
            .skip(1)
            .take_while(|l| l.starts_with("* "))
            .map(|l| paren.replace(l[2..].trim_end(), "").into_owned())
            .collect()
    });
    &VOCAB
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTypeLabel {
    pub value: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Maps raw classifier output to a vocabulary member.
pub fn normalize_task_label(output: &str) -> TaskTypeLabel {
    let vocab = task_vocabulary();
    let lines: Vec<&str> = output
        .lines()
        .map(|l| l.trim().trim_matches('"').trim())
        .filter(|l| !l.is_empty())
        .collect();
    let mut warnings = Vec::new();
    if lines.len() > 1 {
        warnings.push(format!(
            "classifier returned {} lines; using the first vocabulary match",
            lines.len()
        ));
    }
    if let Some(hit) = lines.iter().find(|l| vocab.iter().any(|v| v == *l)) {
        return TaskTypeLabel {
            value: (*hit).to_owned(),
            warnings,
        };
    }
    for line in &lines {
        if let Some(v) = vocab.iter().find(|v| v.eq_ignore_ascii_case(line)) {
            warnings.push(format!("{line:?} differs from {v:?} only by case"));
            break;
        }
    }
    warnings.push(format!("output {:?} is not a vocabulary label", output.trim()));
    TaskTypeLabel {
        value: "Others".to_owned(),
        warnings,
    }
}

fn prompt_as_text(prompt: &Prompt) -> String {
    if let [only] = prompt.messages.as_slice() {
        return only.content.clone();
    }
    prompt
        .messages
        .iter()
        .map(|m| format!("{}: {}", m.role.name(), m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn classify_task(gateway: &Gateway, backend: &str, prompt: &Prompt) -> Result<TaskTypeLabel, GatewayError> {
    let meta = fill_template(
        CLASSIFY_TEMPLATE,
        &[
            ("example task instruction", CLASSIFY_EXAMPLE_INPUT),
            ("task type", CLASSIFY_EXAMPLE_OUTPUT),
            ("input_prompt_to_be_annotated", &prompt_as_text(prompt)),
        ],
    );
    let out = gateway.chat(&ChatRequest::user(backend, meta))?;
    Ok(normalize_task_label(&out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub base_instruction: String,
    pub positive_examples: String,
    pub negative_examples: String,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

pub fn refinement_meta_prompt(base: &str, positive: &str, negative: &str) -> String {
    fill_template(
        REFINE_TEMPLATE,
        &[
            ("definition", base),
            ("positive_examples", positive),
            ("negative_examples", negative),
        ],
    )
}

/// Samples `k` tagged rewrites of the base instruction; output that yields no
/// component is dropped and re-sampled, up to `2k` calls in total.
pub fn generate_refinements(
    gateway: &Gateway,
    backend: &str,
    registry: &TagRegistry,
    req: &RefineRequest,
) -> Result<Vec<String>, GatewayError> {
    if req.k == 0 {
        return Err(GatewayError::InvalidRequest("k must be at least 1".into()));
    }
    let meta = refinement_meta_prompt(&req.base_instruction, &req.positive_examples, &req.negative_examples);
    let mut variants = Vec::with_capacity(req.k);
    for attempt in 0..2 * req.k as u64 {
        if variants.len() == req.k {
            break;
        }
        let chat = ChatRequest::user(backend, meta.clone())
            .with_temperature(req.temperature)
            .with_seed(Some(req.seed.wrapping_add(attempt)));
        let text = gateway.chat(&chat)?;
        let parsed = parse_lenient(&Prompt::single(Role::user(), text.clone()), registry)?;
        if parsed.component_count() > 0 {
            variants.push(text);
        }
    }
    if variants.len() < req.k {
        return Err(GatewayError::InsufficientVariants {
            wanted: req.k,
            got: variants.len(),
        });
    }
    Ok(variants)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Default,
    Cot,
    Taxonomy,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Default, Strategy::Cot, Strategy::Taxonomy];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Default => "default",
            Strategy::Cot => "cot",
            Strategy::Taxonomy => "taxonomy",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

pub fn cot_instruction(base: &str) -> String {
    format!("{base} {COT_SUFFIX}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatCorrectness {
    pub ratio: f64,
    pub matched_pairs: usize,
    pub intended_pairs: usize,
    /// Set when the text has no tags and the ratio is 1.0 by convention.
    pub no_tags: bool,
}

static TAG_TOKEN: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"<(/?)([a-z_][a-z0-9_]*(?::[a-z0-9_]+)*)>").expect("valid regex"));

/// Share of registered-tag pairs that are properly opened and closed.
pub fn format_correctness(tagged: &str, registry: &TagRegistry) -> FormatCorrectness {
    let mut stack: Vec<&str> = Vec::new();
    let (mut matched, mut broken) = (0usize, 0usize);
    for cap in TAG_TOKEN.captures_iter(tagged) {
        let name = cap.get(2).map_or("", |m| m.as_str());
        if registry.lookup_canonical(name).is_none() {
            continue;
        }
        if cap[1].is_empty() {
            stack.push(name);
        } else if let Some(pos) = stack.iter().rposition(|n| *n == name) {
            broken += stack.len() - pos - 1;
            stack.truncate(pos);
            matched += 1;
        } else {
            broken += 1;
        }
    }
    broken += stack.len();
    let intended = matched + broken;
    FormatCorrectness {
        ratio: if intended == 0 {
            1.0
        } else {
            matched as f64 / intended as f64
        },
        matched_pairs: matched,
        intended_pairs: intended,
        no_tags: intended == 0,
    }
}

/// Writes a CSV review sheet (prompt id, role, order, tag, content) for
/// human scoring of tag correctness and coverage.
pub fn write_review_sheet<W: Write>(out: W, prompts: &[AnnotatedPrompt]) -> Result<(), GatewayError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| GatewayError::Io(std::io::Error::other(e));
    w.write_record(["prompt_id", "role", "order", "tag", "content"])
        .map_err(io)?;
    for (n, ap) in prompts.iter().enumerate() {
        let id = ap.source.id.clone().unwrap_or_else(|| n.to_string());
        for c in ap.components() {
            w.write_record([
                id.as_str(),
                c.index.role.name(),
                &c.index.order.to_string(),
                &c.tag.canonical(),
                &c.content,
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn mock_gateway(f: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Gateway {
        Gateway::new(GatewayConfig::default()).with_backend("mock", MockBackend::new().with_fallback(f))
    }

    #[test]
    fn digest_ignores_backend_name() {
        let a = ChatRequest::user("a", "hi");
        let b = ChatRequest::user("b", "hi");
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), a.clone().with_seed(Some(1)).digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn request_validation() {
        assert!(ChatRequest::user("m", "x").with_temperature(2.5).validate().is_err());
        assert!(ChatRequest::new("m", vec![]).validate().is_err());
        assert!(ChatRequest::user("m", "x").with_temperature(0.7).validate().is_ok());
    }

    #[test]
    fn fixture_lookup() {
        let req = ChatRequest::user("mock", "ping");
        let mut mock = MockBackend::new();
        mock.insert(&req, "pong");
        let gw = Gateway::new(GatewayConfig::default()).with_backend("mock", mock);
        assert_eq!(gw.chat(&req).unwrap(), "pong");
        assert!(matches!(
            gw.chat(&ChatRequest::user("mock", "other")),
            Err(GatewayError::FixtureMissing(_))
        ));
        assert!(matches!(
            gw.chat(&ChatRequest::user("nope", "ping")),
            Err(GatewayError::BackendUnavailable(_))
        ));
        assert_eq!(gw.transcript().len(), 2);
    }

    #[test]
    fn call_cap() {
        let gw = Gateway::new(GatewayConfig {
            call_cap: Some(10),
            ..Default::default()
        })
        .with_backend("mock", MockBackend::new().with_fallback(|_| "ok".into()));
        for _ in 0..10 {
            gw.chat(&ChatRequest::user("mock", "x")).unwrap();
        }
        assert!(matches!(
            gw.chat(&ChatRequest::user("mock", "x")),
            Err(GatewayError::BudgetExceeded { cap: 10 })
        ));
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, GatewayError> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(GatewayError::Transport {
                    message: "reset".into(),
                    transient: true,
                })
            } else {
                Ok("fine".into())
            }
        }
    }

    #[test]
    fn transient_failures_are_retried() {
        let config = GatewayConfig {
            base_backoff_ms: 0,
            max_retries: 2,
            ..Default::default()
        };
        let gw = Gateway::new(config.clone()).with_backend(
            "f",
            Flaky {
                failures: AtomicUsize::new(2),
            },
        );
        assert_eq!(gw.chat(&ChatRequest::user("f", "x")).unwrap(), "fine");
        assert_eq!(gw.transcript()[0].retries, 2);

        let gw = Gateway::new(config).with_backend(
            "f",
            Flaky {
                failures: AtomicUsize::new(3),
            },
        );
        assert!(gw.chat(&ChatRequest::user("f", "x")).unwrap_err().is_transient());
        assert_eq!(gw.transcript().len(), 1);
    }

    #[test]
    fn auth_missing() {
        let backend = HttpBackend::new(HttpBackendConfig {
            base_url: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key_env: "PROMPTPRISM_TEST_KEY_THAT_IS_NEVER_SET".into(),
            timeout_secs: 1,
        });
        let gw = Gateway::new(GatewayConfig::default()).with_backend("live", backend);
        assert!(matches!(
            gw.chat(&ChatRequest::user("live", "x")),
            Err(GatewayError::AuthMissing(_))
        ));
    }

    #[test]
    fn concurrent_calls_all_logged() {
        let gw = Arc::new(
            Gateway::new(GatewayConfig {
                max_in_flight: 2,
                ..Default::default()
            })
            .with_backend(
                "mock",
                MockBackend::new().with_fallback(|r| r.messages[0].content.clone()),
            ),
        );
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let gw = Arc::clone(&gw);
                std::thread::spawn(move || gw.chat(&ChatRequest::user("mock", i.to_string())).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(gw.transcript().len(), 8);
    }

    #[test]
    fn fill_is_single_pass() {
        let out = fill_template("a {x} b {y} {unknown} {", &[("x", "{y}"), ("y", "Y")]);
        assert_eq!(out, "a {y} b Y {unknown} {");
    }

    #[test]
    fn vocabulary_shape() {
        let v = task_vocabulary();
        assert_eq!(v.len(), 33);
        assert!(v.contains(&"Function calling:Data Retrieval".to_string()));
        assert!(v.contains(&"Function calling:Multi-function Chain".to_string()));
        assert_eq!(v.last().unwrap(), "Others");
        assert!(v.iter().all(|l| !l.contains('(')));
    }

    #[test]
    fn label_normalization() {
        assert_eq!(
            normalize_task_label("Function calling:Data Retrieval").value,
            "Function calling:Data Retrieval"
        );
        let lower = normalize_task_label("function calling: data retrieval");
        assert_eq!(lower.value, "Others");
        assert!(!lower.warnings.is_empty());
        let two = normalize_task_label("Coding:Debugging\nReasoning:Others");
        assert_eq!(two.value, "Coding:Debugging");
        assert_eq!(two.warnings.len(), 1);
        assert_eq!(normalize_task_label("\"Others\"\n").value, "Others");
    }

    #[test]
    fn classify_through_gateway() {
        let gw = mock_gateway(|_| "Coding:Debugging".into());
        let label = classify_task(&gw, "mock", &Prompt::single(Role::user(), "fix my code")).unwrap();
        assert_eq!(label.value, "Coding:Debugging");
    }

    #[test]
    fn annotation_workflow() {
        let reg = TagRegistry::builtin();
        let gw = mock_gateway(|_| "<instruction>Do it</instruction>\n<request_query>What?</request_query>".into());
        let ann = annotate_prompt(&gw, "mock", &reg, &Prompt::single(Role::user(), "Do it\nWhat?")).unwrap();
        assert_eq!(ann.parsed.component_count(), 2);
        let meta = &gw.transcript()[0];
        assert!(meta.response.is_some());

        let gw = mock_gateway(|_| "<instruction>Do it</instruction> <request_query>What?".into());
        let ann = annotate_prompt(&gw, "mock", &reg, &Prompt::single(Role::user(), "Do it What?")).unwrap();
        assert_eq!(ann.parsed.component_count(), 1);
        assert_eq!(ann.diagnostics().count_all(), 1);

        let gw = mock_gateway(|_| String::new());
        assert!(matches!(
            annotate_prompt(&gw, "mock", &reg, &Prompt::single(Role::user(), "x")),
            Err(GatewayError::AnnotationUnparseable(_))
        ));
    }

    #[test]
    fn refinement_budget() {
        let reg = TagRegistry::builtin();
        let req = RefineRequest {
            base_instruction: "Classify.".into(),
            positive_examples: String::new(),
            negative_examples: String::new(),
            k: 3,
            temperature: 0.7,
            seed: 1,
        };
        let gw = mock_gateway(|r| format!("<instruction>v{}</instruction>", r.seed.unwrap()));
        assert_eq!(
            generate_refinements(&gw, "mock", &reg, &req).unwrap(),
            [
                "<instruction>v1</instruction>",
                "<instruction>v2</instruction>",
                "<instruction>v3</instruction>"
            ]
        );

        let gw = mock_gateway(|_| "just prose".into());
        assert!(matches!(
            generate_refinements(&gw, "mock", &reg, &req),
            Err(GatewayError::InsufficientVariants { wanted: 3, got: 0 })
        ));
        assert_eq!(gw.calls_made(), 6);
    }

    #[test]
    fn format_ratios() {
        let reg = TagRegistry::builtin();
        let ok = "<instruction>a</instruction><request_query>b</request_query>";
        assert_eq!(format_correctness(ok, &reg).ratio, 1.0);
        let fc = format_correctness("plain", &reg);
        assert!(fc.no_tags && fc.ratio == 1.0);
        let one_unclosed = "<instruction>a</instruction><other>b</other><tools>c</tools><request_query>d";
        assert_eq!(format_correctness(one_unclosed, &reg).ratio, 0.75);
        let stray = "<instruction>a</instruction></other>";
        assert_eq!(format_correctness(stray, &reg).ratio, 0.5);
        // unknown markup is ignored
        assert_eq!(
            format_correctness("<b>x</b><instruction>a</instruction>", &reg).ratio,
            1.0
        );
    }

    #[test]
    fn cot_suffix() {
        assert_eq!(
            cot_instruction("Answer the question."),
            "Answer the question. Please think step by step and then solve the task."
        );
    }

    #[test]
    fn review_sheet_rows() {
        let reg = TagRegistry::builtin();
        let ap = crate::prompt_model::parse_annotated(
            &Prompt::single(Role::user(), "<instruction>a, \"b\"</instruction>"),
            &reg,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_review_sheet(&mut buf, &[ap]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "prompt_id,role,order,tag,content\n0,user,0,instruction,\"a, \"\"b\"\"\"\n"
        );
    }
}
