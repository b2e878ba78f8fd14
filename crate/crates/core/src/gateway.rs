//! Access to chat-completion endpoints.
//!
//! Every prompt in the pipeline is a single zero-shot user message. Two
//! backends implement [`CompletionBackend`]: [`HttpBackend`] speaks the
//! OpenAI-compatible `/chat/completions` JSON protocol, and [`ScriptedBackend`]
//! replays canned responses keyed by the SHA-256 fingerprint of the prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const GENERATION_TEMPERATURE: f64 = 1.0;
pub const GENERATION_MAX_TOKENS: u32 = 4000;
pub const QUIZ_TEMPERATURE: f64 = 0.0;
pub const QUIZ_MAX_TOKENS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider refused to generate: {0}")]
    Filtered(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Filtered,
    Error,
}

impl FinishReason {
    /// Maps an OpenAI-style `finish_reason` string.
    pub fn from_wire(s: Option<&str>) -> FinishReason {
        match s {
            Some("stop") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some("content_filter") => FinishReason::Filtered,
            Some(_) => FinishReason::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64, max_new_tokens: u32) -> Result<Self, GatewayError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(GatewayError::Config(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        if max_new_tokens == 0 {
            return Err(GatewayError::Config("max_new_tokens must be positive".into()));
        }
        Ok(CompletionRequest {
            prompt: prompt.into(),
            temperature,
            max_new_tokens,
        })
    }

    /// Perturbation generation: temperature 1.0, up to 4000 new tokens.
    pub fn generation(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: GENERATION_TEMPERATURE,
            max_new_tokens: GENERATION_MAX_TOKENS,
        }
    }

    /// Quiz taking: greedy decoding, up to 5 new tokens.
    pub fn quiz(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: QUIZ_TEMPERATURE,
            max_new_tokens: QUIZ_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

/// Anything that can answer a single-message completion request.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;

    fn model_id(&self) -> &str;

    /// Upper bound on concurrent requests callers should issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Number of `complete` calls served so far.
    fn requests_sent(&self) -> u64;
}

/// Hex SHA-256 of the exact prompt string.
pub fn prompt_fingerprint(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

/// Serializes the chat-completion body for `req`. Byte-stable for equal inputs.
pub fn wire_body(model_id: &str, req: &CompletionRequest) -> String {
    let body = WireRequest {
        model: model_id,
        messages: [WireMessage {
            role: "user",
            content: &req.prompt,
        }],
        temperature: req.temperature,
        max_tokens: req.max_new_tokens,
    };
    serde_json::to_string(&body).expect("request body serializes")
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    message: Option<WireChoiceMessage>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Extracts text and finish reason from a successful response body.
pub fn parse_wire_response(body: &str) -> Result<(String, FinishReason), String> {
    let parsed: WireResponse = serde_json::from_str(body).map_err(|e| format!("malformed response body: {e}"))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| "response has no choices".to_string())?;
    let text = choice.message.and_then(|m| m.content).unwrap_or_default();
    Ok((text, FinishReason::from_wire(choice.finish_reason.as_deref())))
}

/// Exponential backoff schedule: `base * 2^k`, capped at `max_delay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.base_delay
            .checked_mul(factor)
            .map_or(self.max_delay, |d| d.min(self.max_delay))
    }
}

/// Outcome of one attempt inside [`retry_with`].
#[derive(Debug)]
pub enum Attempt<T> {
    Done(T),
    Transient(String),
    Fatal(GatewayError),
}

/// Runs `op` until it succeeds, fails fatally, or `max_retries` retries are spent.
pub fn retry_with<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut() -> Attempt<T>,
) -> Result<T, GatewayError> {
    let mut retries = 0;
    loop {
        match op() {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transient(message) => {
                if retries >= policy.max_retries {
                    return Err(GatewayError::Transport {
                        message,
                        attempts: retries + 1,
                    });
                }
                log::debug!("transient failure (retry {}): {message}", retries + 1);
                sleep(policy.delay(retries));
                retries += 1;
            }
        }
    }
}

fn default_timeout() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    4
}

/// Connection settings for a live chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub endpoint_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_ref: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn is_env_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.endpoint_url.trim().is_empty() {
            return Err(GatewayError::Config("endpoint_url is empty".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::Config("model_id is empty".into()));
        }
        if !is_env_var_name(&self.api_key_ref) || self.api_key_ref.starts_with("sk") {
            return Err(GatewayError::Config(format!(
                "api_key_ref must name an environment variable, got {:?}",
                self.api_key_ref
            )));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.endpoint_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Blocking HTTP client for an OpenAI-compatible endpoint.
pub struct HttpBackend {
    endpoint: ModelEndpoint,
    api_key: String,
    agent: ureq::Agent,
    policy: RetryPolicy,
    sent: AtomicU64,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Reads the API key from the environment variable named by `api_key_ref`.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let api_key = std::env::var(&endpoint.api_key_ref)
            .map_err(|_| GatewayError::Auth(format!("environment variable {} is not set", endpoint.api_key_ref)))?;
        Ok(Self::with_key(endpoint, api_key))
    }

    pub fn with_key(endpoint: ModelEndpoint, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let policy = RetryPolicy::new(endpoint.max_retries);
        HttpBackend {
            endpoint,
            api_key,
            agent,
            policy,
            sent: AtomicU64::new(0),
        }
    }

    pub fn with_retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn attempt(&self, url: &str, body: &str) -> Attempt<(String, FinishReason)> {
        let result = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut response = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(format!("reading body: {e}")),
        };
        classify_http(status, &text)
    }
}

/// Maps an HTTP status and body onto an [`Attempt`].
pub fn classify_http(status: u16, body: &str) -> Attempt<(String, FinishReason)> {
    match status {
        200..=299 => match parse_wire_response(body) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(GatewayError::Transport {
                message: e,
                attempts: 1,
            }),
        },
        401 | 403 => Attempt::Fatal(GatewayError::Auth(format!("HTTP {status}: {}", snippet(body)))),
        _ if body.contains("content_filter") => {
            Attempt::Fatal(GatewayError::Filtered(format!("HTTP {status}: {}", snippet(body))))
        }
        408 | 409 | 429 | 500..=599 => Attempt::Transient(format!("HTTP {status}: {}", snippet(body))),
        _ => Attempt::Fatal(GatewayError::Transport {
            message: format!("HTTP {status}: {}", snippet(body)),
            attempts: 1,
        }),
    }
}

fn snippet(body: &str) -> &str {
    match body.char_indices().nth(200) {
        Some((idx, _)) => &body[..idx],
        None => body,
    }
}

fn finish(text: String, finish_reason: FinishReason, started: Instant) -> Result<CompletionResponse, GatewayError> {
    if finish_reason == FinishReason::Filtered {
        return Err(GatewayError::Filtered("finish_reason = content_filter".into()));
    }
    Ok(CompletionResponse {
        text,
        finish_reason,
        latency_ms: started.elapsed().as_millis() as u64,
    })
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.sent.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let url = self.endpoint.completions_url();
        let body = wire_body(&self.endpoint.model_id, req);
        let (text, finish_reason) = retry_with(&self.policy, std::thread::sleep, || self.attempt(&url, &body))?;
        finish(text, finish_reason, started)
    }

    fn model_id(&self) -> &str {
        &self.endpoint.model_id
    }

    fn max_in_flight(&self) -> usize {
        self.endpoint.max_in_flight
    }

    fn requests_sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedReply {
    pub text: String,
    #[serde(default = "stop")]
    pub finish_reason: FinishReason,
}

fn stop() -> FinishReason {
    FinishReason::Stop
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedReply {
            text: text.into(),
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn filtered() -> Self {
        ScriptedReply {
            text: String::new(),
            finish_reason: FinishReason::Filtered,
        }
    }
}

/// What the scripted backend answers for an unknown fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptDefault {
    Reply(ScriptedReply),
    Error,
}

/// One script entry as stored on disk. Either the fingerprint or the raw prompt is given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(flatten)]
    pub reply: ScriptedReply,
}

/// Replay file for [`ScriptedBackend`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub default: ScriptDefault,
    pub responses: Vec<ScriptEntry>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| GatewayError::Config(format!("parsing {}: {e}", path.display())))
    }
}

/// Deterministic offline backend keyed by prompt fingerprint.
#[derive(Debug)]
pub struct ScriptedBackend {
    model_id: String,
    script: BTreeMap<String, ScriptedReply>,
    default: ScriptDefault,
    max_in_flight: usize,
    sent: AtomicU64,
}

fn check_reply(reply: &ScriptedReply) -> Result<(), GatewayError> {
    if reply.text.is_empty() && reply.finish_reason == FinishReason::Stop {
        return Err(GatewayError::Config(
            "scripted reply with finish_reason=stop must have non-empty text".into(),
        ));
    }
    Ok(())
}

impl ScriptedBackend {
    pub fn new(
        model_id: impl Into<String>,
        script: BTreeMap<String, ScriptedReply>,
        default: ScriptDefault,
    ) -> Result<Self, GatewayError> {
        if script.is_empty() {
            return Err(GatewayError::Config("script is empty".into()));
        }
        for reply in script.values() {
            check_reply(reply)?;
        }
        if let ScriptDefault::Reply(reply) = &default {
            check_reply(reply)?;
        }
        Ok(ScriptedBackend {
            model_id: model_id.into(),
            script,
            default,
            max_in_flight: 4,
            sent: AtomicU64::new(0),
        })
    }

    /// Builds a script from `(prompt, reply)` pairs.
    pub fn from_prompts<I, P>(
        model_id: impl Into<String>,
        pairs: I,
        default: ScriptDefault,
    ) -> Result<Self, GatewayError>
    where
        I: IntoIterator<Item = (P, ScriptedReply)>,
        P: AsRef<str>,
    {
        let script = pairs
            .into_iter()
            .map(|(p, r)| (prompt_fingerprint(p.as_ref()), r))
            .collect();
        Self::new(model_id, script, default)
    }

    pub fn from_file(model_id: impl Into<String>, file: ScriptFile) -> Result<Self, GatewayError> {
        let mut script = BTreeMap::new();
        for entry in file.responses {
            let key = match (entry.fingerprint, entry.prompt) {
                (Some(fp), _) => fp,
                (None, Some(prompt)) => prompt_fingerprint(&prompt),
                (None, None) => {
                    return Err(GatewayError::Config(
                        "script entry needs a fingerprint or a prompt".into(),
                    ))
                }
            };
            script.insert(key, entry.reply);
        }
        Self::new(model_id, script, file.default)
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.sent.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let fingerprint = prompt_fingerprint(&req.prompt);
        let reply = match self.script.get(&fingerprint) {
            Some(r) => r,
            None => match &self.default {
                ScriptDefault::Reply(r) => r,
                ScriptDefault::Error => {
                    return Err(GatewayError::Transport {
                        message: format!("no scripted response for prompt {fingerprint}"),
                        attempts: 1,
                    })
                }
            },
        };
        let mut resp = finish(reply.text.clone(), reply.finish_reason, started)?;
        // replay must not depend on wall-clock time
        resp.latency_ms = 0;
        Ok(resp)
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn requests_sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

/// Endpoint configuration as written in TOML or JSON files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EndpointConfig {
    Http(ModelEndpoint),
    Scripted {
        model_id: String,
        /// Script file; relative paths resolve against the config file's directory.
        script: PathBuf,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

impl EndpointConfig {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        let mut config: EndpointConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&raw).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let EndpointConfig::Scripted { script, .. } = self {
            if script.is_relative() {
                *script = base.join(&*script);
            }
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            EndpointConfig::Http(e) => &e.model_id,
            EndpointConfig::Scripted { model_id, .. } => model_id,
        }
    }

    pub fn connect(&self) -> Result<Arc<dyn CompletionBackend>, GatewayError> {
        match self {
            EndpointConfig::Http(endpoint) => Ok(Arc::new(HttpBackend::new(endpoint.clone())?)),
            EndpointConfig::Scripted {
                model_id,
                script,
                max_in_flight,
            } => {
                let file = ScriptFile::load(script)?;
                Ok(Arc::new(
                    ScriptedBackend::from_file(model_id.clone(), file)?.with_max_in_flight(*max_in_flight),
                ))
            }
        }
    }
}
