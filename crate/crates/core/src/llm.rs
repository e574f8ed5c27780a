//! Chat-completion access with greedy and temperature-sampled decoding.
//!
//! [`LlmGateway`] owns retries, the context budget check, the in-flight cap and the
//! call log. Backends perform single attempts: [`OpenAiBackend`] for a live
//! OpenAI-compatible endpoint, [`ScriptedBackend`] for byte-deterministic playbooks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::RetryPolicy;
use crate::prompt::PromptKind;
use crate::transport::{with_retry, AttemptError};

pub const ENV_ENDPOINT: &str = "DUAT_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "DUAT_LLM_API_KEY";
pub const ENV_MODEL: &str = "DUAT_LLM_MODEL";
pub const DRY_RUN_REPLY: &str = "[dry-run]";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, draw: usize },
}

impl Decode {
    fn mode_tag(&self) -> &'static str {
        match self {
            Decode::Greedy => "greedy",
            Decode::Sample { .. } => "sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub kind: PromptKind,
    pub prompt: String,
    pub decode: Decode,
    pub max_output_tokens: usize,
}

impl LlmRequest {
    pub fn greedy(kind: PromptKind, prompt: impl Into<String>) -> Self {
        LlmRequest {
            kind,
            prompt: prompt.into(),
            decode: Decode::Greedy,
            max_output_tokens: crate::model::DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn sample(
        kind: PromptKind,
        prompt: impl Into<String>,
        temperature: f64,
        draw: usize,
    ) -> Result<Self, LlmError> {
        if !(temperature > 0.0 && temperature <= 2.0) {
            return Err(LlmError::Temperature(temperature));
        }
        Ok(LlmRequest { decode: Decode::Sample { temperature, draw }, ..Self::greedy(kind, prompt) })
    }

    fn with_decode(&self, decode: Decode) -> Self {
        LlmRequest { decode, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capabilities {
    pub supports_sampling: bool,
    pub max_context_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<usize>,
    pub completion_tokens: Option<usize>,
    pub truncated: bool,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion { text: text.into(), ..Default::default() }
    }
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    /// One attempt; the gateway decides about retries.
    fn complete(&self, req: &LlmRequest) -> Result<Completion, AttemptError>;
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LlmError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("prompt needs ~{estimated} tokens plus {reserved} for output, context is {limit}")]
    ContextOverflow { estimated: usize, reserved: usize, limit: usize },
    #[error("sample temperature {0} outside (0, 2]")]
    Temperature(f64),
    #[error("backend {0} does not support sampling")]
    SamplingUnsupported(String),
    #[error("sample count must be ≥ 1")]
    ZeroSamples,
    #[error("LLM call failed after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },
    #[error("sampled draws {failed:?} failed: {message}")]
    Draws { failed: Vec<usize>, message: String },
}

/// Rough token estimate: four ASCII characters per token, one token per other character.
pub fn estimate_tokens(text: &str) -> usize {
    let ascii = text.chars().filter(char::is_ascii).count();
    let other = text.chars().count() - ascii;
    ascii.div_ceil(4) + other
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub kind: PromptKind,
    pub decode: Decode,
    pub attempt: u32,
    pub latency_ms: u64,
    pub prompt_tokens: usize,
    pub completion_tokens: Option<usize>,
    pub ok: bool,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { free: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmGateway {
    backend: Arc<dyn LlmBackend>,
    retry: RetryPolicy,
    max_output_tokens: usize,
    in_flight: Semaphore,
    log: Mutex<Vec<CallLogEntry>>,
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway").field("backend", &self.backend.id()).field("retry", &self.retry).finish()
    }
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn LlmBackend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        LlmGateway {
            backend,
            retry,
            max_output_tokens: crate::model::DEFAULT_MAX_OUTPUT_TOKENS,
            in_flight: Semaphore::new(max_in_flight),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_max_output_tokens(mut self, tokens: usize) -> Self {
        self.max_output_tokens = tokens;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn call_log(&self) -> Vec<CallLogEntry> {
        self.log.lock().expect("call log poisoned").clone()
    }

    /// Number of network attempts made for prompts of `kind`.
    pub fn attempts_for(&self, kind: PromptKind) -> usize {
        self.log.lock().expect("call log poisoned").iter().filter(|e| e.kind == kind).count()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("call log poisoned").clear();
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let req = LlmRequest { max_output_tokens: self.max_output_tokens, ..req.clone() };
        if req.prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let caps = self.backend.capabilities();
        if matches!(req.decode, Decode::Sample { .. }) && !caps.supports_sampling {
            return Err(LlmError::SamplingUnsupported(self.backend.id().to_string()));
        }
        let estimated = estimate_tokens(&req.prompt);
        if estimated + req.max_output_tokens > caps.max_context_tokens {
            return Err(LlmError::ContextOverflow {
                estimated,
                reserved: req.max_output_tokens,
                limit: caps.max_context_tokens,
            });
        }
        let _permit = self.in_flight.acquire();
        let completion = with_retry(&self.retry, |attempt| {
            let start = Instant::now();
            let res = self.backend.complete(&req);
            let entry = CallLogEntry {
                kind: req.kind,
                decode: req.decode,
                attempt,
                latency_ms: start.elapsed().as_millis() as u64,
                prompt_tokens: res.as_ref().ok().and_then(|c| c.prompt_tokens).unwrap_or(estimated),
                completion_tokens: res.as_ref().ok().and_then(|c| c.completion_tokens),
                ok: res.is_ok(),
            };
            self.log.lock().expect("call log poisoned").push(entry);
            res
        })
        .map_err(|e| LlmError::Backend { attempts: e.attempts, message: e.last.message })?;
        if completion.truncated {
            log::warn!("{} reply truncated at {} output tokens", req.kind, req.max_output_tokens);
        }
        Ok(completion.text)
    }

    pub fn greedy(&self, kind: PromptKind, prompt: &str) -> Result<String, LlmError> {
        self.complete(&LlmRequest::greedy(kind, prompt))
    }

    /// `k` temperature-sampled replies in draw order. Temperature 0 is greedy decoding:
    /// one greedy call whose reply fills all `k` slots.
    pub fn sample_k(
        &self,
        kind: PromptKind,
        prompt: &str,
        k: usize,
        temperature: f64,
    ) -> Result<Vec<String>, LlmError> {
        if k == 0 {
            return Err(LlmError::ZeroSamples);
        }
        if temperature == 0.0 {
            let reply = self.greedy(kind, prompt)?;
            return Ok(vec![reply; k]);
        }
        let base = LlmRequest::sample(kind, prompt, temperature, 0)?;
        let mut out = Vec::with_capacity(k);
        let mut failed = Vec::new();
        let mut last_error = String::new();
        for draw in 0..k {
            match self.complete(&base.with_decode(Decode::Sample { temperature, draw })) {
                Ok(text) => out.push(text),
                Err(e) => {
                    failed.push(draw);
                    last_error = e.to_string();
                }
            }
        }
        if !failed.is_empty() {
            return Err(LlmError::Draws { failed, message: last_error });
        }
        Ok(out)
    }
}

/// Stable playbook key for a prompt under a decode mode (temperature and draw excluded).
pub fn digest(prompt: &str, decode: &Decode) -> String {
    let mut h = Sha256::new();
    h.update(decode.mode_tag().as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookEntry {
    pub digest: String,
    pub k: usize,
    pub reply: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PlaybookError {
    #[error("cannot access playbook {path}: {message}")]
    Io { path: String, message: String },
    #[error("playbook line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Replies keyed by [`digest`]. Greedy requests use variant 0; sampled draw `k`
/// uses variant `k mod n` over the `n` variants in index order.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    replies: HashMap<String, BTreeMap<usize, String>>,
    capabilities: Capabilities,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        ScriptedBackend {
            replies: HashMap::new(),
            capabilities: Capabilities { supports_sampling: true, max_context_tokens: 128_000 },
        }
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_max_context(mut self, tokens: usize) -> Self {
        self.capabilities.max_context_tokens = tokens;
        self
    }

    pub fn from_entries(entries: impl IntoIterator<Item = PlaybookEntry>) -> Self {
        let mut backend = Self::new();
        for e in entries {
            backend.replies.entry(e.digest).or_default().insert(e.k, e.reply);
        }
        backend
    }

    pub fn load(path: &Path) -> Result<Self, PlaybookError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PlaybookError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: PlaybookEntry = serde_json::from_str(line)
                .map_err(|e| PlaybookError::Malformed { line: i + 1, message: e.to_string() })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn insert_greedy(&mut self, prompt: &str, reply: impl Into<String>) {
        self.replies.entry(digest(prompt, &Decode::Greedy)).or_default().insert(0, reply.into());
    }

    pub fn insert_samples(&mut self, prompt: &str, replies: impl IntoIterator<Item = String>) {
        let key = digest(prompt, &Decode::Sample { temperature: 1.0, draw: 0 });
        let slot = self.replies.entry(key).or_default();
        slot.clear();
        slot.extend(replies.into_iter().enumerate());
    }

    /// Entries sorted by digest then index, for a byte-stable playbook file.
    pub fn entries(&self) -> Vec<PlaybookEntry> {
        let mut out: Vec<PlaybookEntry> = self
            .replies
            .iter()
            .flat_map(|(d, variants)| {
                variants.iter().map(|(k, r)| PlaybookEntry { digest: d.clone(), k: *k, reply: r.clone() })
            })
            .collect();
        out.sort_by(|a, b| (&a.digest, a.k).cmp(&(&b.digest, b.k)));
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PlaybookError> {
        write_playbook(path, &self.entries())
    }
}

pub fn write_playbook(path: &Path, entries: &[PlaybookEntry]) -> Result<(), PlaybookError> {
    let io = |e: std::io::Error| PlaybookError::Io { path: path.display().to_string(), message: e.to_string() };
    let mut file = fs::File::create(path).map_err(io)?;
    for e in entries {
        let line = serde_json::to_string(e).expect("playbook entry serializes");
        writeln!(file, "{line}").map_err(io)?;
    }
    Ok(())
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, AttemptError> {
        let key = digest(&req.prompt, &req.decode);
        let missing = || AttemptError::fatal(format!("no scripted reply for {} prompt (digest {key})", req.kind));
        let variants = self.replies.get(&key).filter(|v| !v.is_empty()).ok_or_else(missing)?;
        let reply = match req.decode {
            Decode::Greedy => variants.get(&0).or_else(|| variants.values().next()),
            Decode::Sample { draw, .. } => variants.values().nth(draw % variants.len()),
        };
        reply.map(Completion::text).ok_or_else(missing)
    }
}

/// Wraps another backend and records every successful reply as a playbook entry.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    recorded: Mutex<BTreeMap<(String, usize), String>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>) -> Self {
        RecordingBackend { inner, recorded: Mutex::new(BTreeMap::new()) }
    }

    pub fn entries(&self) -> Vec<PlaybookEntry> {
        self.recorded
            .lock()
            .expect("recorder poisoned")
            .iter()
            .map(|((digest, k), reply)| PlaybookEntry { digest: digest.clone(), k: *k, reply: reply.clone() })
            .collect()
    }
}

impl LlmBackend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, AttemptError> {
        let completion = self.inner.complete(req)?;
        let k = match req.decode {
            Decode::Greedy => 0,
            Decode::Sample { draw, .. } => draw,
        };
        self.recorded
            .lock()
            .expect("recorder poisoned")
            .insert((digest(&req.prompt, &req.decode), k), completion.text.clone());
        Ok(completion)
    }
}

/// Backend computing replies with a closure; convenient for programmatic scripts.
pub struct FnBackend<F> {
    respond: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, AttemptError> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        FnBackend { respond }
    }
}

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, AttemptError> + Send + Sync,
{
    fn id(&self) -> &str {
        "fn"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_sampling: true, max_context_tokens: 128_000 }
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, AttemptError> {
        (self.respond)(req).map(Completion::text)
    }
}

/// OpenAI-compatible chat completion request body.
pub fn openai_body(model: &str, req: &LlmRequest) -> serde_json::Value {
    let mut body = serde_json::json!({
        "model": model,
        "messages": [{"role": "user", "content": req.prompt}],
        "max_tokens": req.max_output_tokens,
        "n": 1,
    });
    match req.decode {
        Decode::Greedy => body["temperature"] = serde_json::json!(0.0),
        Decode::Sample { temperature, draw } => {
            body["temperature"] = serde_json::json!(temperature);
            body["seed"] = serde_json::json!(draw);
        }
    }
    body
}

/// Records request bodies instead of sending them and answers [`DRY_RUN_REPLY`].
pub struct DryRunBackend {
    model: String,
    requests: Mutex<Vec<serde_json::Value>>,
}

impl DryRunBackend {
    pub fn new(model: &str) -> Self {
        DryRunBackend { model: model.to_string(), requests: Mutex::new(Vec::new()) }
    }

    pub fn take_requests(&self) -> Vec<serde_json::Value> {
        std::mem::take(&mut *self.requests.lock().expect("dry-run log poisoned"))
    }
}

impl LlmBackend for DryRunBackend {
    fn id(&self) -> &str {
        "dry-run"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_sampling: true, max_context_tokens: usize::MAX / 2 }
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, AttemptError> {
        self.requests.lock().expect("dry-run log poisoned").push(serde_json::json!({
            "kind": req.kind,
            "body": openai_body(&self.model, req),
        }));
        Ok(Completion::text(DRY_RUN_REPLY))
    }
}

/// Live backend speaking the OpenAI chat-completions wire format.
pub struct OpenAiBackend {
    url: String,
    api_key: Option<String>,
    model: String,
    max_context_tokens: usize,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    /// `endpoint` is the API base, e.g. `https://host/v1`; `/chat/completions` is appended.
    pub fn new(endpoint: &str, api_key: Option<String>, model: &str, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Backend { attempts: 0, message: e.to_string() })?;
        Ok(OpenAiBackend {
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
            model: model.to_string(),
            max_context_tokens: 16_385,
            client,
        })
    }

    /// Endpoint, key and model from `DUAT_LLM_ENDPOINT`, `DUAT_LLM_API_KEY`, `DUAT_LLM_MODEL`.
    pub fn from_env(timeout: Duration) -> Option<Result<Self, LlmError>> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok()?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-3.5-turbo".to_string());
        Some(Self::new(&endpoint, std::env::var(ENV_API_KEY).ok(), &model, timeout))
    }

    pub fn with_max_context(mut self, tokens: usize) -> Self {
        self.max_context_tokens = tokens;
        self
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<usize>,
    completion_tokens: Option<usize>,
}

impl LlmBackend for OpenAiBackend {
    fn id(&self) -> &str {
        "openai-compatible"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_sampling: true, max_context_tokens: self.max_context_tokens }
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, AttemptError> {
        let mut call = self.client.post(&self.url).json(&openai_body(&self.model, req));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| AttemptError::from_reqwest(&e))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| AttemptError::from_reqwest(&e))?;
        if !(200..300).contains(&status) {
            return Err(AttemptError::from_status(status, &text));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| AttemptError::fatal(format!("unexpected chat response ({e}): {text}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| AttemptError::fatal(format!("chat response without choices: {text}")))?;
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}
