//! Text-generation backends.
//!
//! Everything the engine needs from a model goes through [`Backend::complete`].
//! Three implementations ship: an HTTP client for chat-completions servers, a
//! scripted queue for tests, and a transcript store that records and replays
//! responses keyed by a digest of the canonicalized request.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {cause}")]
    Unavailable {
        cause: String,
        /// Seconds from a `Retry-After` header, when the server sent one.
        retry_after: Option<u64>,
    },
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned an empty response")]
    ResponseEmpty,
}

impl BackendError {
    pub fn unavailable(cause: impl Into<String>) -> Self {
        BackendError::Unavailable {
            cause: cause.into(),
            retry_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { path: PathBuf, label: usize },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Message { role: Role::User, parts }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            parts: vec![Part::text(text)],
        }
    }

    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, Part::Image { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn check(&self) -> Result<(), String> {
        let last = self.messages.last().ok_or("request has no messages")?;
        if last.role != Role::User {
            return Err("last message must come from the user".into());
        }
        if self.messages.iter().any(|m| m.parts.is_empty()) {
            return Err("message with no parts".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be non-negative".into());
        }
        Ok(())
    }

    pub fn image_paths(&self) -> impl Iterator<Item = &Path> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                Part::Image { path, .. } => Some(path.as_path()),
                Part::Text { .. } => None,
            })
        })
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(Message::image_count).sum()
    }

    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        digest_value(&value)
    }
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

pub fn digest_value(value: &Value) -> String {
    let bytes = Sha256::digest(canonical_json(value).as_bytes());
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of an already-serialized request; key order in `json` is irrelevant.
pub fn digest_json(json: &str) -> Result<String, serde_json::Error> {
    Ok(digest_value(&serde_json::from_str(json)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub request_digest: String,
    pub response_text: String,
    pub latency_ms: u64,
    pub backend_id: String,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Cheap reachability check run once before a batch starts.
    fn preflight(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
    fn preflight(&self) -> Result<(), BackendError> {
        (**self).preflight()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
    fn preflight(&self) -> Result<(), BackendError> {
        (**self).preflight()
    }
}

/// Returns queued responses in order; errors once the queue is exhausted.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Result<String, BackendError>>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            queue: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
        }
    }

    pub fn push(&self, response: impl Into<String>) {
        self.queue.lock().unwrap().push_back(Ok(response.into()));
    }

    pub fn push_error(&self, err: BackendError) {
        self.queue.lock().unwrap().push_back(Err(err));
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    /// Loads a script file: one JSON string per line.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut responses = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: String = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("script line {}: {e}", i + 1),
                )
            })?;
            responses.push(s);
        }
        Ok(Self::new(responses))
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, _request: &GenerationRequest) -> Result<String, BackendError> {
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::unavailable("script exhausted")))
    }
}

/// Backend driven by a closure over the request, for responders that depend on
/// prompt content.
pub struct FnBackend<F> {
    id: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnBackend { id: id.into(), f }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (self.f)(request)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("transcript store write failed: {0}")]
    StoreWriteFailed(#[source] std::io::Error),
    #[error("transcript store {path} line {line_no}: {reason}")]
    Corrupt {
        path: PathBuf,
        line_no: usize,
        reason: String,
    },
    #[error("cannot open transcript store {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Append-only transcript file with an in-memory index by request digest.
/// The newest record for a digest wins.
#[derive(Debug)]
pub struct TranscriptStore {
    index: RwLock<HashMap<String, Transcript>>,
    file: Mutex<Option<fs::File>>,
    path: Option<PathBuf>,
}

impl TranscriptStore {
    pub fn in_memory() -> Self {
        TranscriptStore {
            index: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
            path: None,
        }
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut index = HashMap::new();
        if path.exists() {
            let f = fs::File::open(path).map_err(|source| StoreError::Open {
                path: path.into(),
                source,
            })?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|source| StoreError::Open {
                    path: path.into(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let t: Transcript =
                    serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                        path: path.into(),
                        line_no: i + 1,
                        reason: e.to_string(),
                    })?;
                index.insert(t.request_digest.clone(), t);
            }
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| StoreError::Open {
                path: path.into(),
                source,
            })?;
        Ok(TranscriptStore {
            index: RwLock::new(index),
            file: Mutex::new(Some(file)),
            path: Some(path.into()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, digest: &str) -> Option<Transcript> {
        self.index.read().unwrap().get(digest).cloned()
    }

    pub fn record(
        &self,
        request: &GenerationRequest,
        response: &str,
        latency_ms: u64,
        backend_id: &str,
    ) -> Result<Transcript, StoreError> {
        let t = Transcript {
            request_digest: request.digest(),
            response_text: response.into(),
            latency_ms,
            backend_id: backend_id.into(),
        };
        if let Some(file) = self.file.lock().unwrap().as_mut() {
            let line = serde_json::to_string(&t).expect("transcript serializes");
            writeln!(file, "{line}").map_err(StoreError::StoreWriteFailed)?;
            file.flush().map_err(StoreError::StoreWriteFailed)?;
        }
        self.index
            .write()
            .unwrap()
            .insert(t.request_digest.clone(), t.clone());
        Ok(t)
    }
}

/// Serves responses from a [`TranscriptStore`]. On a miss it either forwards to
/// an inner backend and records the result, or (strict, no inner) fails.
pub struct ReplayBackend {
    store: TranscriptStore,
    inner: Option<Box<dyn Backend>>,
}

impl ReplayBackend {
    pub fn strict(store: TranscriptStore) -> Self {
        ReplayBackend { store, inner: None }
    }

    pub fn recording(store: TranscriptStore, inner: Box<dyn Backend>) -> Self {
        ReplayBackend {
            store,
            inner: Some(inner),
        }
    }

    pub fn store(&self) -> &TranscriptStore {
        &self.store
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        match &self.inner {
            Some(inner) => inner.id(),
            None => "replay",
        }
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        if let Some(t) = self.store.lookup(&digest) {
            return Ok(t.response_text);
        }
        let Some(inner) = &self.inner else {
            return Err(BackendError::unavailable("cache miss"));
        };
        let started = Instant::now();
        let text = inner.complete(request)?;
        let latency = started.elapsed().as_millis() as u64;
        self.store
            .record(request, &text, latency, inner.id())
            .map_err(|e| BackendError::unavailable(e.to_string()))?;
        Ok(text)
    }

    fn preflight(&self) -> Result<(), BackendError> {
        match &self.inner {
            Some(inner) => inner.preflight(),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageMode {
    #[default]
    DataUri,
    FileUrl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub image_mode: ImageMode,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            image_mode: ImageMode::DataUri,
        }
    }

    pub fn endpoint_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    }
}

fn image_url(path: &Path, mode: ImageMode) -> Result<String, BackendError> {
    match mode {
        ImageMode::FileUrl => {
            let abs = if path.is_absolute() {
                path.to_path_buf()
            } else {
                std::env::current_dir()
                    .map_err(|e| BackendError::unavailable(e.to_string()))?
                    .join(path)
            };
            Ok(format!("file://{}", abs.display()))
        }
        ImageMode::DataUri => {
            let bytes = fs::read(path).map_err(|e| {
                BackendError::unavailable(format!("cannot read image {}: {e}", path.display()))
            })?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(format!("data:{};base64,{b64}", mime_for(path)))
        }
    }
}

/// Builds the chat-completions request body.
pub fn wire_payload(config: &EndpointConfig, request: &GenerationRequest) -> Result<Value, BackendError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let mut content = Vec::with_capacity(m.parts.len());
        for p in &m.parts {
            content.push(match p {
                Part::Text { text } => json!({"type": "text", "text": text}),
                Part::Image { path, .. } => json!({
                    "type": "image_url",
                    "image_url": {"url": image_url(path, config.image_mode)?},
                }),
            });
        }
        messages.push(json!({"role": m.role, "content": content}));
    }
    let mut body = json!({
        "model": config.model,
        "messages": messages,
        "max_tokens": request.max_new_tokens,
        "temperature": request.temperature,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

/// Reads `choices[0].message.content`, accepting either a string or an array
/// of text parts.
pub fn extract_content(response: &Value) -> Result<String, BackendError> {
    let choice = response
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or(BackendError::ResponseEmpty)?;
    let content = &choice["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    };
    if text.trim().is_empty() {
        return Err(BackendError::ResponseEmpty);
    }
    Ok(text)
}

/// Single POST to the chat-completions endpoint. Never retries.
pub fn http_complete(
    agent: &ureq::Agent,
    config: &EndpointConfig,
    request: &GenerationRequest,
) -> Result<String, BackendError> {
    let body = wire_payload(config, request)?;
    let mut req = agent
        .post(config.endpoint_url())
        .header("Content-Type", "application/json");
    if let Some(key) = &config.api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = match req.send(body.to_string()) {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
        Err(e) => return Err(BackendError::unavailable(e.to_string())),
    };
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok());
        let detail = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(BackendError::Unavailable {
            cause: format!("HTTP {status}: {}", detail.chars().take(200).collect::<String>()),
            retry_after,
        });
    }
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
        Err(e) => return Err(BackendError::unavailable(e.to_string())),
    };
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| BackendError::unavailable(format!("invalid JSON response: {e}")))?;
    extract_content(&value)
}

pub struct HttpBackend {
    config: EndpointConfig,
    agent: ureq::Agent,
    id: String,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let id = format!("http:{}", config.model);
        HttpBackend { config, agent, id }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        http_complete(&self.agent, &self.config, request)
    }

    fn preflight(&self) -> Result<(), BackendError> {
        let url = &self.config.base_url;
        let rest = url
            .split_once("://")
            .map(|(_, r)| r)
            .ok_or_else(|| BackendError::unavailable(format!("bad base url {url}")))?;
        let authority = rest.split('/').next().unwrap_or(rest);
        let addr = if authority.contains(':') {
            authority.to_string()
        } else if url.starts_with("https") {
            format!("{authority}:443")
        } else {
            format!("{authority}:80")
        };
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::unavailable(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| BackendError::unavailable(format!("{addr}: no address")))?;
        TcpStream::connect_timeout(&sock, Duration::from_secs(5))
            .map(|_| ())
            .map_err(|e| BackendError::unavailable(format!("{addr}: {e}")))
    }
}
