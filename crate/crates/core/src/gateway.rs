//! Chat-completion backends behind one interface.
//!
//! [`Gateway`] wraps a backend with retry on transient failures, optional
//! rate limiting and usage accounting. Two backends ship: [`RemoteBackend`]
//! speaks the common chat-completions HTTP shapes, [`ScriptedBackend`] answers
//! from a lookup table so whole runs can be replayed offline.

use std::env;
use std::fs;
use std::num::NonZeroU32;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_KEY_ENV: &str = "PSEUDOSCOPE_API_KEY";
pub const API_BASE_ENV: &str = "PSEUDOSCOPE_API_BASE";

/// Approximate tokens per whitespace-separated word.
const TOKENS_PER_WORD: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },
    #[error("credential environment variable {0} is not set")]
    AuthMissing(String),
    #[error("no script entry for agent={agent} step={step} attempt={attempt}")]
    ScriptMiss { agent: String, step: u32, attempt: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl GatewayError {
    fn transient(message: impl Into<String>) -> Self {
        GatewayError::Transport {
            message: message.into(),
            transient: true,
        }
    }

    fn fatal(message: impl Into<String>) -> Self {
        GatewayError::Transport {
            message: message.into(),
            transient: false,
        }
    }

    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transport { transient: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Identifies which agent issued a request and where in the run it sits.
/// Scripted backends key their answers on it; remote backends ignore it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTag {
    pub agent: String,
    pub user: String,
    pub step: u32,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    /// `None` leaves the provider's default in place.
    pub temperature: Option<f64>,
    pub max_output_tokens: u32,
    pub tag: RequestTag,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user: impl Into<String>, tag: RequestTag) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            messages: vec![ChatMessage::user(user)],
            temperature: Some(0.0),
            max_output_tokens: 2048,
            tag,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => return Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role == ChatRole::Assistant => {
                return Err(GatewayError::InvalidRequest(
                    "first message must be system or user".into(),
                ))
            }
            _ => {}
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(GatewayError::InvalidRequest(format!("temperature {t}")));
            }
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens is 0".into()));
        }
        Ok(())
    }

    /// Everything the model would read, used for token estimates and
    /// scripted matching.
    pub fn full_text(&self) -> String {
        let mut out = self.system_prompt.clone();
        for m in &self.messages {
            out.push('\n');
            out.push_str(&m.content);
        }
        out
    }
}

/// What a backend returns for one call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub approximate: bool,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;

    fn name(&self) -> &str;
}

/// Cost per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

impl PriceTable {
    /// GPT-4 Turbo list price: 10 in / 30 out per million tokens.
    pub const GPT4_TURBO: PriceTable = PriceTable {
        input_per_million: 10.0,
        output_per_million: 30.0,
    };

    /// 5 in / 15 out per million, the mid-2024 GPT-4o list price.
    pub const GPT4O_2024: PriceTable = PriceTable {
        input_per_million: 5.0,
        output_per_million: 15.0,
    };

    pub fn preset(name: &str) -> Option<PriceTable> {
        match name {
            "gpt-4-turbo" => Some(Self::GPT4_TURBO),
            "gpt-4o-2024" => Some(Self::GPT4O_2024),
            _ => None,
        }
    }

    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        (input_tokens as f64 * self.input_per_million + output_tokens as f64 * self.output_per_million)
            / 1_000_000.0
    }
}

impl Default for PriceTable {
    fn default() -> Self {
        Self::GPT4_TURBO
    }
}

/// Token and cost accounting for one call or a sum of calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(with = "duration_millis")]
    pub wall_time: Duration,
    pub cost_estimate: f64,
    /// Token counts came from the word-count heuristic.
    pub approximate: bool,
}

impl UsageRecord {
    pub fn add(&mut self, other: &UsageRecord) {
        self.calls += other.calls;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.wall_time += other.wall_time;
        self.cost_estimate += other.cost_estimate;
        self.approximate |= other.approximate;
    }
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Per-call usage entries for one run. Internally synchronized.
#[derive(Debug, Default)]
pub struct UsageLedger {
    entries: Mutex<Vec<(String, UsageRecord)>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, agent: &str, usage: UsageRecord) {
        self.entries.lock().unwrap().push((agent.to_string(), usage));
    }

    pub fn entries(&self) -> Vec<(String, UsageRecord)> {
        self.entries.lock().unwrap().clone()
    }

    pub fn calls(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn calls_for(&self, agent: &str) -> usize {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|(a, _)| a == agent)
            .count()
    }

    pub fn total(&self) -> UsageRecord {
        let mut total = UsageRecord::default();
        for (_, u) in self.entries.lock().unwrap().iter() {
            total.add(u);
        }
        total
    }
}

/// Estimated token count: whitespace words times 1.3, rounded up.
pub fn approximate_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as f64;
    (words * TOKENS_PER_WORD).ceil() as u64
}

pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// A clock that only moves when someone sleeps on it.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
    slept: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, duration: Duration) {
        *self.now.lock().unwrap() += duration;
        self.slept.lock().unwrap().push(duration);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatePolicy {
    #[default]
    Unlimited,
    PerInterval { requests: NonZeroU32, interval: Duration },
}

/// Spaces requests evenly so that no interval ever sees more than the
/// policy allows. Slots are handed out in arrival order.
pub struct RateLimiter {
    policy: RatePolicy,
    clock: Arc<dyn Clock>,
    next_slot: Mutex<Option<Duration>>,
}

impl RateLimiter {
    pub fn new(policy: RatePolicy, clock: Arc<dyn Clock>) -> Self {
        Self {
            policy,
            clock,
            next_slot: Mutex::new(None),
        }
    }

    /// Blocks until the caller may issue a request. Returns the delay applied.
    pub fn acquire(&self) -> Duration {
        let RatePolicy::PerInterval { requests, interval } = self.policy else {
            return Duration::ZERO;
        };
        let spacing = interval / requests.get();
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = self.clock.now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + spacing);
            slot - now
        };
        if !wait.is_zero() {
            self.clock.sleep(wait);
        }
        wait
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(rename = "base_delay_ms", with = "duration_millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`.
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
    }
}

/// Shared entry point for all LLM calls of a process.
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    retry: RetryPolicy,
    prices: PriceTable,
    limiter: Option<Arc<RateLimiter>>,
    clock: Arc<dyn Clock>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            prices: PriceTable::default(),
            limiter: None,
            clock: Arc::new(SystemClock::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_prices(mut self, prices: PriceTable) -> Self {
        self.prices = prices;
        self
    }

    pub fn with_rate_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn prices(&self) -> PriceTable {
        self.prices
    }

    /// Sends one request, retrying transient transport failures with
    /// exponential backoff, and records the call in `ledger`.
    pub fn complete(
        &self,
        request: &ChatRequest,
        ledger: &UsageLedger,
    ) -> Result<(String, UsageRecord), GatewayError> {
        request.validate()?;
        let attempts = self.retry.max_attempts.max(1);
        let mut retry = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let started = Instant::now();
            match self.backend.complete(request) {
                Ok(done) => {
                    let usage = UsageRecord {
                        calls: 1,
                        input_tokens: done.input_tokens,
                        output_tokens: done.output_tokens,
                        wall_time: started.elapsed(),
                        cost_estimate: self.prices.cost(done.input_tokens, done.output_tokens),
                        approximate: done.approximate,
                    };
                    ledger.record(&request.tag.agent, usage);
                    return Ok((done.text, usage));
                }
                Err(e) if e.is_transient() && retry + 1 < attempts => {
                    self.clock.sleep(self.retry.delay(retry));
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// How a scripted entry is selected. Unset fields match anything; every
/// `contains` string must occur in the request text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMatch {
    pub agent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
}

impl ScriptMatch {
    fn matches(&self, request: &ChatRequest, text: &str) -> bool {
        let tag = &request.tag;
        self.agent == tag.agent
            && self.step.is_none_or(|s| s == tag.step)
            && self.attempt.is_none_or(|a| a == tag.attempt)
            && self.user.as_ref().is_none_or(|u| *u == tag.user)
            && self.contains.iter().all(|needle| text.contains(needle.as_str()))
    }
}

/// One line of a script file: `{"match": {...}, "response": "..."}`, or
/// `{"match": {...}, "echo": true}` to answer with the last JSON object
/// found in the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub echo: bool,
}

impl ScriptEntry {
    pub fn respond(matcher: ScriptMatch, response: impl Into<String>) -> Self {
        Self {
            matcher,
            response: Some(response.into()),
            echo: false,
        }
    }

    pub fn echo(matcher: ScriptMatch) -> Self {
        Self {
            matcher,
            response: None,
            echo: true,
        }
    }
}

/// Deterministic lookup-table backend. Entries are tried in file order and
/// the first match answers.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        for (i, e) in entries.iter().enumerate() {
            if e.echo == e.response.is_some() {
                return Err(GatewayError::Config(format!(
                    "script entry {} needs exactly one of response or echo",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, GatewayError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| GatewayError::Config(format!("script line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let text = request.full_text();
        let entry = self
            .entries
            .iter()
            .find(|e| e.matcher.matches(request, &text))
            .ok_or_else(|| GatewayError::ScriptMiss {
                agent: request.tag.agent.clone(),
                step: request.tag.step,
                attempt: request.tag.attempt,
            })?;
        let reply = match &entry.response {
            Some(r) => r.clone(),
            None => crate::protocol::last_json_object(&text)
                .map(str::to_string)
                .unwrap_or_default(),
        };
        Ok(Completion {
            input_tokens: approximate_tokens(&text),
            output_tokens: approximate_tokens(&reply),
            text: reply,
            approximate: true,
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// `POST {base}/chat/completions` with a bearer token. Also fits
    /// self-hosted servers exposing the same route.
    #[default]
    Openai,
    /// `POST {base}/v1/messages` with an `x-api-key` header.
    Anthropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    #[serde(default)]
    pub provider: Provider,
    pub model: String,
    /// Falls back to `PSEUDOSCOPE_API_BASE`, then to the provider default.
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

impl RemoteConfig {
    pub fn new(provider: Provider, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
            base_url: None,
            api_key_env: default_key_env(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// HTTP chat-completions client.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn base_url(&self) -> String {
        let base = self
            .config
            .base_url
            .clone()
            .or_else(|| env::var(API_BASE_ENV).ok().filter(|s| !s.is_empty()))
            .unwrap_or_else(|| match self.config.provider {
                Provider::Openai => "https://api.openai.com/v1".to_string(),
                Provider::Anthropic => "https://api.anthropic.com".to_string(),
            });
        base.trim_end_matches('/').to_string()
    }

    /// Request body in the provider's wire shape.
    pub fn body(&self, request: &ChatRequest) -> Value {
        let mut body = match self.config.provider {
            Provider::Openai => {
                let mut messages = vec![json!({"role": "system", "content": request.system_prompt})];
                messages.extend(request.messages.iter().map(|m| json!({"role": m.role, "content": m.content})));
                json!({
                    "model": self.config.model,
                    "messages": messages,
                    "max_tokens": request.max_output_tokens,
                })
            }
            Provider::Anthropic => {
                let messages: Vec<Value> = request
                    .messages
                    .iter()
                    .filter(|m| m.role != ChatRole::System)
                    .map(|m| json!({"role": m.role, "content": m.content}))
                    .collect();
                json!({
                    "model": self.config.model,
                    "system": request.system_prompt,
                    "messages": messages,
                    "max_tokens": request.max_output_tokens,
                })
            }
        };
        if let Some(t) = request.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    fn parse_response(&self, value: &Value) -> Result<Completion, GatewayError> {
        let (text, input, output) = match self.config.provider {
            Provider::Openai => (
                value.pointer("/choices/0/message/content").and_then(Value::as_str),
                value.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
                value.pointer("/usage/completion_tokens").and_then(Value::as_u64),
            ),
            Provider::Anthropic => (
                value.pointer("/content/0/text").and_then(Value::as_str),
                value.pointer("/usage/input_tokens").and_then(Value::as_u64),
                value.pointer("/usage/output_tokens").and_then(Value::as_u64),
            ),
        };
        let text = text.ok_or_else(|| GatewayError::fatal("response carries no message text"))?;
        let approximate = input.is_none() || output.is_none();
        Ok(Completion {
            text: text.to_string(),
            input_tokens: input.unwrap_or(0),
            output_tokens: output.unwrap_or_else(|| approximate_tokens(text)),
            approximate,
        })
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let key = env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::AuthMissing(self.config.api_key_env.clone()))?;
        let body = self.body(request);
        let base = self.base_url();
        let call = match self.config.provider {
            Provider::Openai => self
                .agent
                .post(format!("{base}/chat/completions"))
                .header("authorization", format!("Bearer {key}")),
            Provider::Anthropic => self
                .agent
                .post(format!("{base}/v1/messages"))
                .header("x-api-key", key)
                .header("anthropic-version", "2023-06-01"),
        };
        let mut response = call
            .send_json(&body)
            .map_err(|e| GatewayError::transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(GatewayError::transient(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(GatewayError::fatal(format!("HTTP {status}: {text}")));
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::fatal(format!("bad response body: {e}")))?;
        self.parse_response(&value)
    }

    fn name(&self) -> &str {
        "remote"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimitConfig {
    pub requests: NonZeroU32,
    pub interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceSetting {
    Preset(String),
    Table(PriceTable),
}

impl Default for PriceSetting {
    fn default() -> Self {
        PriceSetting::Table(PriceTable::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Scripted,
}

/// Backend section of the run configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    #[serde(default)]
    pub price_table: PriceSetting,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub rate_limit: Option<RateLimitConfig>,
}

impl GatewayConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self {
            backend: BackendKind::Scripted,
            script_path: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn prices(&self) -> Result<PriceTable, GatewayError> {
        match &self.price_table {
            PriceSetting::Table(t) => Ok(*t),
            PriceSetting::Preset(name) => {
                PriceTable::preset(name).ok_or_else(|| GatewayError::Config(format!("unknown price preset {name}")))
            }
        }
    }

    /// Builds the gateway. Relative script paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Gateway, GatewayError> {
        let backend: Arc<dyn LlmBackend> = match self.backend {
            BackendKind::Scripted => {
                let path = self
                    .script_path
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("scripted backend needs script_path".into()))?;
                Arc::new(ScriptedBackend::from_path(&base_dir.join(path))?)
            }
            BackendKind::Remote => {
                let remote = self
                    .remote
                    .clone()
                    .ok_or_else(|| GatewayError::Config("remote backend needs a remote section".into()))?;
                Arc::new(RemoteBackend::new(remote))
            }
        };
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
        let mut gateway = Gateway::new(backend)
            .with_retry(self.retry)
            .with_prices(self.prices()?)
            .with_clock(clock.clone());
        if let Some(rl) = self.rate_limit {
            let policy = RatePolicy::PerInterval {
                requests: rl.requests,
                interval: Duration::from_millis(rl.interval_ms),
            };
            gateway = gateway.with_rate_limiter(Arc::new(RateLimiter::new(policy, clock)));
        }
        Ok(gateway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn tag(agent: &str, step: u32) -> RequestTag {
        RequestTag {
            agent: agent.into(),
            user: "u1".into(),
            step,
            attempt: 0,
        }
    }

    #[test]
    fn scripted_lookup_is_deterministic() {
        let backend = ScriptedBackend::parse_jsonl(
            r#"{"match":{"agent":"strategist","step":0},"response":"{\"action\":\"retrieve\"}"}
{"match":{"agent":"strategist"},"response":"fallback"}
"#,
        )
        .unwrap();
        let req0 = ChatRequest::new("sys", "go", tag("strategist", 0));
        let req5 = ChatRequest::new("sys", "go", tag("strategist", 5));
        let a = backend.complete(&req0).unwrap();
        let b = backend.complete(&req0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, r#"{"action":"retrieve"}"#);
        assert_eq!(backend.complete(&req5).unwrap().text, "fallback");
        let miss = backend.complete(&ChatRequest::new("s", "u", tag("extractor", 0)));
        assert!(matches!(miss, Err(GatewayError::ScriptMiss { .. })));
    }

    #[test]
    fn scripted_contains_and_echo() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::respond(
                ScriptMatch {
                    agent: "extractor".into(),
                    contains: vec!["Miata".into(), "fits".into()],
                    ..Default::default()
                },
                "tall",
            ),
            ScriptEntry::echo(ScriptMatch {
                agent: "extractor".into(),
                ..Default::default()
            }),
        ])
        .unwrap();
        let hit = ChatRequest::new("sys", "my Miata barely fits me", tag("extractor", 0));
        assert_eq!(backend.complete(&hit).unwrap().text, "tall");
        let echo = ChatRequest::new("schema {\"a\":1}", "data {\"b\": [1, {\"c\": 2}]} end", tag("extractor", 1));
        assert_eq!(backend.complete(&echo).unwrap().text, "{\"b\": [1, {\"c\": 2}]}");
    }

    #[test]
    fn script_entry_needs_one_answer_kind() {
        let entry = ScriptEntry {
            matcher: ScriptMatch::default(),
            response: None,
            echo: false,
        };
        assert!(ScriptedBackend::new(vec![entry]).is_err());
    }

    #[test]
    fn token_heuristic() {
        assert_eq!(approximate_tokens(""), 0);
        assert_eq!(approximate_tokens("one two three"), 4);
        assert_eq!(approximate_tokens("a b c d e f g h i j"), 13);
    }

    #[test]
    fn price_arithmetic() {
        let cost = PriceTable::GPT4_TURBO.cost(90_755, 9_003);
        assert!((cost - (0.90755 + 0.27009)).abs() < 1e-12);
        assert!((cost - 1.178).abs() < 1e-3);
        let alt = PriceTable::GPT4O_2024.cost(90_755, 9_003);
        assert!((alt - 0.59).abs() < 0.005);
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        transient: bool,
    }

    impl LlmBackend for Flaky {
        fn complete(&self, _request: &ChatRequest) -> Result<Completion, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                return Err(GatewayError::Transport {
                    message: "HTTP 503".into(),
                    transient: self.transient,
                });
            }
            Ok(Completion {
                text: "ok".into(),
                input_tokens: 3,
                output_tokens: 1,
                approximate: false,
            })
        }

        fn name(&self) -> &str {
            "flaky"
        }
    }

    #[test]
    fn retries_transient_errors_with_backoff() {
        let clock = Arc::new(VirtualClock::new());
        let backend = Arc::new(Flaky {
            failures: 2,
            calls: AtomicU32::new(0),
            transient: true,
        });
        let gateway = Gateway::new(backend.clone())
            .with_retry(RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(100),
            })
            .with_clock(clock.clone());
        let ledger = UsageLedger::new();
        let (text, usage) = gateway
            .complete(&ChatRequest::new("s", "u", tag("extractor", 0)), &ledger)
            .unwrap();
        assert_eq!(text, "ok");
        assert_eq!(usage.calls, 1);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        assert_eq!(clock.sleeps(), vec![Duration::from_millis(100), Duration::from_millis(200)]);
        assert_eq!(ledger.calls(), 1);
    }

    #[test]
    fn retries_are_bounded_and_fatal_errors_pass_through() {
        let clock = Arc::new(VirtualClock::new());
        let always = Arc::new(Flaky {
            failures: u32::MAX,
            calls: AtomicU32::new(0),
            transient: true,
        });
        let gateway = Gateway::new(always.clone())
            .with_retry(RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
            })
            .with_clock(clock);
        let ledger = UsageLedger::new();
        let err = gateway
            .complete(&ChatRequest::new("s", "u", tag("x", 0)), &ledger)
            .unwrap_err();
        assert!(err.is_transient());
        assert_eq!(always.calls.load(Ordering::SeqCst), 3);
        assert_eq!(ledger.calls(), 0);

        let fatal = Arc::new(Flaky {
            failures: 1,
            calls: AtomicU32::new(0),
            transient: false,
        });
        let gateway = Gateway::new(fatal.clone()).with_clock(Arc::new(VirtualClock::new()));
        assert!(gateway.complete(&ChatRequest::new("s", "u", tag("x", 0)), &ledger).is_err());
        assert_eq!(fatal.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn ledger_total_is_sum_of_calls() {
        let backend = Arc::new(ScriptedBackend::parse_jsonl(r#"{"match":{"agent":"a"},"response":"one two"}"#).unwrap());
        let gateway = Gateway::new(backend);
        let ledger = UsageLedger::new();
        let mut manual = UsageRecord::default();
        for step in 0..5 {
            let (_, u) = gateway
                .complete(&ChatRequest::new("system words", "user", tag("a", step)), &ledger)
                .unwrap();
            manual.add(&u);
        }
        let total = ledger.total();
        assert_eq!(total.calls, 5);
        assert_eq!(total.input_tokens, manual.input_tokens);
        assert_eq!(total.output_tokens, 5 * 3);
        assert!(total.approximate);
    }

    #[test]
    fn request_validation() {
        let mut req = ChatRequest::new("s", "u", tag("a", 0));
        assert!(req.validate().is_ok());
        req.messages.clear();
        assert!(req.validate().is_err());
        req.messages.push(ChatMessage::assistant("hi"));
        assert!(req.validate().is_err());
        let mut req = ChatRequest::new("s", "u", tag("a", 0));
        req.temperature = Some(-1.0);
        assert!(req.validate().is_err());
    }

    #[test]
    fn auth_missing_before_network() {
        let mut config = RemoteConfig::new(Provider::Openai, "gpt-4");
        config.api_key_env = "PSEUDOSCOPE_TEST_UNSET_KEY".into();
        config.base_url = Some("http://127.0.0.1:9".into());
        let backend = RemoteBackend::new(config);
        let err = backend
            .complete(&ChatRequest::new("s", "u", tag("a", 0)))
            .unwrap_err();
        assert_eq!(err, GatewayError::AuthMissing("PSEUDOSCOPE_TEST_UNSET_KEY".into()));
    }

    #[test]
    fn wire_bodies() {
        let mut req = ChatRequest::new("be brief", "hello", tag("a", 0));
        let openai = RemoteBackend::new(RemoteConfig::new(Provider::Openai, "m"));
        let body = openai.body(&req);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hello");
        assert_eq!(body["temperature"], 0.0);
        req.temperature = None;
        let anthropic = RemoteBackend::new(RemoteConfig::new(Provider::Anthropic, "m"));
        let body = anthropic.body(&req);
        assert_eq!(body["system"], "be brief");
        assert!(body.get("temperature").is_none());
    }

    #[test]
    fn rate_limit_spreads_requests() {
        let clock = Arc::new(VirtualClock::new());
        let limiter = RateLimiter::new(
            RatePolicy::PerInterval {
                requests: NonZeroU32::new(2).unwrap(),
                interval: Duration::from_secs(1),
            },
            clock.clone(),
        );
        let mut starts = Vec::new();
        for _ in 0..6 {
            limiter.acquire();
            starts.push(clock.now());
        }
        assert!(starts.last().unwrap().as_secs_f64() - starts[0].as_secs_f64() >= 2.0);
        // No one-second window holds more than two starts.
        for (i, s) in starts.iter().enumerate() {
            let in_window = starts[i..].iter().filter(|t| **t < *s + Duration::from_secs(1)).count();
            assert!(in_window <= 2);
        }
    }

    #[test]
    fn rate_limit_passthrough_cases() {
        let clock = Arc::new(VirtualClock::new());
        let unlimited = RateLimiter::new(RatePolicy::Unlimited, clock.clone());
        for _ in 0..100 {
            assert_eq!(unlimited.acquire(), Duration::ZERO);
        }
        let single = RateLimiter::new(
            RatePolicy::PerInterval {
                requests: NonZeroU32::new(1).unwrap(),
                interval: Duration::from_secs(60),
            },
            clock.clone(),
        );
        assert_eq!(single.acquire(), Duration::ZERO);
        assert!(clock.sleeps().is_empty());
    }

    #[test]
    fn rate_limit_holds_under_threads() {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
        let limiter = Arc::new(RateLimiter::new(
            RatePolicy::PerInterval {
                requests: NonZeroU32::new(50).unwrap(),
                interval: Duration::from_secs(1),
            },
            clock.clone(),
        ));
        let starts = Arc::new(Mutex::new(Vec::new()));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let limiter = limiter.clone();
                let starts = starts.clone();
                let clock = clock.clone();
                s.spawn(move || {
                    limiter.acquire();
                    starts.lock().unwrap().push(clock.now());
                });
            }
        });
        let mut starts = starts.lock().unwrap().clone();
        starts.sort();
        let spread = *starts.last().unwrap() - starts[0];
        // 8 requests at 20 ms spacing span at least 140 ms.
        assert!(spread >= Duration::from_millis(135), "spread {spread:?}");
    }
}
