//! Config file loading and the resolved per-invocation run config.
//!
//! The config file is TOML. Every key is optional and command-line flags win
//! over it:
//!
//! ```toml
//! backend = "gpt"
//! overlay = "extra_tags.toml"
//! jobs = 4
//! lenient = false
//! seed = 7
//! format = "json"                # or "markdown"
//! transcript = "calls.jsonl"
//!
//! [gateway]
//! max_retries = 3
//! base_backoff_ms = 500
//! call_cap = 2000
//! max_in_flight = 4
//! rate_per_sec = 2.0
//! burst = 4
//!
//! [backends.gpt]
//! kind = "http"
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-4o"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [backends.replay]
//! kind = "mock"
//! transcript = "calls.jsonl"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! API keys are only ever read from the environment variable named by
//! `api_key_env`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use promptprism::llm_gateway::{GatewayConfig, HttpBackend, HttpBackendConfig};
use promptprism::{Gateway, MockBackend, TagRegistry};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Markdown,
}

impl From<Format> for promptprism::ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => promptprism::ReportFormat::Json,
            Format::Markdown => promptprism::ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        transcript: Option<PathBuf>,
        /// Answer for requests that match no fixture.
        #[serde(default)]
        default_response: Option<String>,
    },
    Http {
        base_url: String,
        model: String,
        api_key_env: String,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub overlay: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub lenient: Option<bool>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub transcript: Option<PathBuf>,
    pub gateway: Option<GatewayConfig>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
}

const SECRET_KEYS: &[&str] = &["api_key", "apikey", "token", "secret", "password", "authorization"];

fn find_secret(value: &toml::Value, path: &str) -> Option<String> {
    match value {
        toml::Value::Table(t) => t.iter().find_map(|(k, v)| {
            let here = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            if SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
                Some(here)
            } else {
                find_secret(v, &here)
            }
        }),
        _ => None,
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let raw: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(key) = find_secret(&raw, "") {
            bail!(
                "config {} sets `{key}`; credentials are read from the environment only (use api_key_env)",
                path.display()
            );
        }
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.overlay.iter_mut().for_each(fix);
        self.transcript.iter_mut().for_each(fix);
        for spec in self.backends.values_mut() {
            if let BackendSpec::Mock {
                fixture, transcript, ..
            } = spec
            {
                fixture.iter_mut().for_each(fix);
                transcript.iter_mut().for_each(fix);
            }
        }
    }
}

/// Streams a file through SHA-256.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRef {
    pub role: &'static str,
    pub path: PathBuf,
    pub sha256: String,
}

/// Fully resolved settings for one invocation.
///
/// Only settings that can change an artifact's bytes enter the digest;
/// worker count, output locations and the transcript sink do not.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub inputs: Vec<InputRef>,
    pub backend: Option<String>,
    pub backend_spec: Option<BackendSpec>,
    pub overlay: Option<PathBuf>,
    pub registry_checksum: String,
    pub lenient: bool,
    pub seed: u64,
    pub format: Format,
    pub params: serde_json::Value,
    #[serde(skip)]
    pub jobs: usize,
    #[serde(skip)]
    pub transcript: Option<PathBuf>,
    #[serde(skip)]
    pub gateway: GatewayConfig,
    #[serde(skip)]
    pub backends: BTreeMap<String, BackendSpec>,
}

impl RunConfig {
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn add_input(&mut self, role: &'static str, path: &Path) -> Result<()> {
        let sha256 = if path == Path::new("-") {
            "stdin".to_owned()
        } else {
            file_digest(path)?
        };
        self.inputs.push(InputRef {
            role,
            path: path.to_owned(),
            sha256,
        });
        Ok(())
    }

    /// Selected backend name, or a usage error naming what is configured.
    pub fn require_backend(&self) -> Result<&str> {
        match &self.backend {
            Some(name) if self.backends.contains_key(name) => Ok(name),
            Some(name) => {
                let known: Vec<&str> = self.backends.keys().map(String::as_str).collect();
                bail!(
                    "backend `{name}` is not configured (configured: {})",
                    if known.is_empty() {
                        "none".to_owned()
                    } else {
                        known.join(", ")
                    }
                )
            }
            None => bail!("no backend selected; pass --backend or set `backend` in the config file"),
        }
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let mut gw = Gateway::new(self.gateway.clone());
        for (name, spec) in &self.backends {
            match spec {
                BackendSpec::Mock {
                    fixture,
                    transcript,
                    default_response,
                } => {
                    let mut mock = match (fixture, transcript) {
                        (Some(_), Some(_)) => bail!("mock backend `{name}` sets both fixture and transcript"),
                        (Some(f), None) => MockBackend::from_fixture_file(f)?,
                        (None, Some(t)) => MockBackend::from_transcript(t)?,
                        (None, None) => MockBackend::new(),
                    };
                    if let Some(text) = default_response.clone() {
                        mock = mock.with_fallback(move |_| text.clone());
                    }
                    gw.register(name.clone(), mock);
                }
                BackendSpec::Http {
                    base_url,
                    model,
                    api_key_env,
                    timeout_secs,
                } => {
                    if self.backend.as_deref() == Some(name) && std::env::var_os(api_key_env).is_none() {
                        bail!("backend `{name}` needs the environment variable {api_key_env}");
                    }
                    let mut cfg = HttpBackendConfig {
                        base_url: base_url.clone(),
                        model: model.clone(),
                        api_key_env: api_key_env.clone(),
                        timeout_secs: 120,
                    };
                    if let Some(t) = timeout_secs {
                        cfg.timeout_secs = *t;
                    }
                    gw.register(name.clone(), HttpBackend::new(cfg));
                }
            }
        }
        if let Some(path) = &self.transcript {
            let sink = File::create(path).with_context(|| format!("creating transcript {}", path.display()))?;
            gw = gw.with_transcript_sink(std::io::BufWriter::new(sink));
        }
        Ok(gw)
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

pub fn load_registry(overlay: Option<&Path>) -> Result<TagRegistry> {
    let mut registry = TagRegistry::builtin();
    if let Some(path) = overlay {
        registry.load_overlay(path)?;
    }
    Ok(registry)
}
