//! Completion backends.
//!
//! [`HttpBackend`] talks to a chat/completion service over JSON; the other
//! backends are offline and deterministic so whole runs replay bit for bit.

use std::collections::VecDeque;
use std::fmt;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::codec::DiscretizationSpec;
use crate::error::{BackendFailure, Error, Result};
use crate::prompt::{scan_anchors, scan_raw_solutions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    /// Request sized for a proposal of `width` bins; stops at `;` or newline.
    pub fn for_proposal(prompt: String, width: usize, spec: &DiscretizationSpec, temperature: f64) -> Self {
        let floor = width * (spec.max_digits() + 1);
        Self {
            prompt,
            temperature,
            max_tokens: (2 * floor).max(16) as u32,
            stop_sequences: vec![";".into(), "\n".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Wall-clock time of the service call; offline backends report none.
    pub latency: Option<Duration>,
}

impl Completion {
    fn offline(text: String) -> Self {
        Self { text, latency: None }
    }
}

pub trait CompletionBackend: Send + Sync + fmt::Debug {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendFailure>;

    /// Whether block queries may be issued from several threads at once
    /// without changing results.
    fn concurrent(&self) -> bool {
        true
    }

    /// Fails fast when the backend cannot possibly serve requests.
    fn check_reachable(&self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
    Extrapolate,
    EchoBest,
}

/// Request body shape for the HTTP backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireFormat {
    /// `messages: [{role: "user", content}]`, reply in `choices[0].message.content`.
    Chat,
    /// `prompt`, reply in `choices[0].text`.
    Completion,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    pub timeout_secs: f64,
    pub temperature_range: (f64, f64),
    pub retry_limit: u32,
    pub backoff_base_ms: u64,
    pub wire_format: WireFormat,
    /// Completions served in order by the replay backend.
    pub replay_script: Vec<String>,
}

impl fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendConfig")
            .field("kind", &self.kind)
            .field("endpoint_url", &self.endpoint_url)
            .field("model_name", &self.model_name)
            .field("auth_token_env", &self.auth_token_env)
            .field("timeout_secs", &self.timeout_secs)
            .field("temperature_range", &self.temperature_range)
            .field("retry_limit", &self.retry_limit)
            .finish_non_exhaustive()
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Extrapolate,
            endpoint_url: String::new(),
            model_name: String::new(),
            auth_token_env: "EVOLLM_API_TOKEN".into(),
            timeout_secs: 30.0,
            temperature_range: (0.3, 1.0),
            retry_limit: 3,
            backoff_base_ms: 250,
            wire_format: WireFormat::Chat,
            replay_script: Vec::new(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.temperature_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("temperature_range ({lo}, {hi}) needs 0 <= low <= high")));
        }
        if self.kind == BackendKind::Http {
            if self.endpoint_url.is_empty() || self.model_name.is_empty() {
                return Err(Error::Config("http backend needs endpoint_url and model_name".into()));
            }
            url::Url::parse(&self.endpoint_url)
                .map_err(|e| Error::Config(format!("endpoint_url {:?}: {e}", self.endpoint_url)))?;
            if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
                return Err(Error::Config("timeout_secs must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn is_offline(&self) -> bool {
        self.kind != BackendKind::Http
    }
}

/// Builds the configured backend. `spec` bounds the oracles' outputs.
pub fn build_backend(config: &BackendConfig, spec: &DiscretizationSpec) -> Result<Arc<dyn CompletionBackend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Arc::new(HttpBackend::from_config(config)?),
        BackendKind::Replay => Arc::new(ReplayBackend::new(config.replay_script.clone())),
        BackendKind::Extrapolate => Arc::new(ExtrapolateOracle::new(spec.resolution())),
        BackendKind::EchoBest => Arc::new(EchoBestOracle::new(spec.resolution())),
    })
}

/// JSON-over-HTTP client with bounded retries.
///
/// Every call resolves within `timeout * (retry_limit + 1)`: attempts and
/// backoff sleeps share that deadline.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    token: Option<String>,
    timeout: Duration,
    retry_limit: u32,
    backoff_base: Duration,
    wire: WireFormat,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("retry_limit", &self.retry_limit)
            .finish()
    }
}

impl HttpBackend {
    /// Reads the token from the environment variable named in the config; a
    /// missing variable means unauthenticated requests.
    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let token = if config.auth_token_env.is_empty() {
            None
        } else {
            std::env::var(&config.auth_token_env).ok().filter(|t| !t.is_empty())
        };
        if token.is_none() {
            warn!(env = %config.auth_token_env, "no auth token found; sending unauthenticated requests");
        }
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Ok(Self {
            agent,
            url: config.endpoint_url.clone(),
            model: config.model_name.clone(),
            token,
            timeout: config.timeout(),
            retry_limit: config.retry_limit,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            wire: config.wire_format,
        })
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stop": request.stop_sequences,
        });
        match self.wire {
            WireFormat::Chat => body["messages"] = json!([{ "role": "user", "content": request.prompt }]),
            WireFormat::Completion => body["prompt"] = json!(request.prompt),
        }
        body
    }

    fn extract(&self, reply: &Value) -> Result<String, BackendFailure> {
        let choice = reply
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendFailure::Malformed("missing choices[0]".into()))?;
        choice
            .get("message")
            .and_then(|m| m.get("content"))
            .or_else(|| choice.get("text"))
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendFailure::Malformed("choice carries no text".into()))
    }
}

enum Attempt {
    Done(Result<String, BackendFailure>),
    Retry(String),
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendFailure> {
        let started = Instant::now();
        let deadline = started + self.timeout * (self.retry_limit + 1);
        let payload = self.body(request).to_string();
        let mut last = String::from("no attempt made");
        let mut attempts = 0;
        for attempt in 0..=self.retry_limit {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            let mut req = self
                .agent
                .post(&self.url)
                .config()
                .timeout_global(Some(self.timeout.min(remaining)))
                .build()
                .header("Content-Type", "application/json");
            if let Some(token) = &self.token {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            let outcome = match req.send(payload.as_bytes()) {
                Err(e) => Attempt::Retry(format!("transport: {e}")),
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        Attempt::Done(match resp.body_mut().read_json::<Value>() {
                            Ok(v) => self.extract(&v),
                            Err(e) => Err(BackendFailure::Malformed(format!("body: {e}"))),
                        })
                    } else if status == 429 || status >= 500 {
                        Attempt::Retry(format!("status {status}"))
                    } else {
                        Attempt::Done(Err(BackendFailure::Exhausted {
                            attempts,
                            last: format!("status {status} (not retried)"),
                        }))
                    }
                }
            };
            match outcome {
                Attempt::Done(Ok(text)) => {
                    debug!(attempt, "completion received");
                    return Ok(Completion { text, latency: Some(started.elapsed()) });
                }
                Attempt::Done(Err(e)) => return Err(e),
                Attempt::Retry(why) => {
                    warn!(attempt, url = %self.url, reason = %why, "completion attempt failed");
                    last = why;
                }
            }
            if attempt < self.retry_limit {
                let backoff = self.backoff_base.saturating_mul(1 << attempt.min(16));
                let remaining = deadline.saturating_duration_since(Instant::now());
                std::thread::sleep(backoff.min(remaining));
            }
        }
        if Instant::now() >= deadline && attempts <= self.retry_limit {
            return Err(BackendFailure::Timeout { millis: started.elapsed().as_millis() });
        }
        Err(BackendFailure::Exhausted { attempts, last })
    }

    /// Opens (and drops) a TCP connection to the endpoint's host.
    fn check_reachable(&self) -> Result<()> {
        let parsed = url::Url::parse(&self.url).map_err(|e| Error::Config(format!("endpoint_url: {e}")))?;
        let host = parsed.host_str().ok_or_else(|| Error::Config("endpoint_url has no host".into()))?;
        let port = parsed.port_or_known_default().ok_or_else(|| Error::Config("endpoint_url has no port".into()))?;
        let addrs: Vec<_> = (host, port)
            .to_socket_addrs()
            .map_err(|e| Error::Config(format!("cannot resolve {host}:{port}: {e}")))?
            .collect();
        let wait = self.timeout.min(Duration::from_secs(10));
        for addr in &addrs {
            if TcpStream::connect_timeout(addr, wait).is_ok() {
                return Ok(());
            }
        }
        Err(Error::Config(format!("endpoint {host}:{port} is unreachable")))
    }
}

/// Serves a fixed list of completions in order, then fails.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    script: Mutex<VecDeque<String>>,
}

impl ReplayBackend {
    pub fn new(script: impl IntoIterator<Item = String>) -> Self {
        Self { script: Mutex::new(script.into_iter().collect()) }
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, _request: &CompletionRequest) -> Result<Completion, BackendFailure> {
        let mut script = self.script.lock().unwrap_or_else(|p| p.into_inner());
        script.pop_front().map(Completion::offline).ok_or(BackendFailure::ScriptExhausted)
    }

    fn concurrent(&self) -> bool {
        false
    }
}

fn format_bins(bins: &[i64]) -> String {
    let parts: Vec<String> = bins.iter().map(i64::to_string).collect();
    format!("{};", parts.join(" "))
}

fn format_floats(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Repeats the anchor of the last (best) row.
#[derive(Debug, Clone)]
pub struct EchoBestOracle {
    resolution: u32,
}

impl EchoBestOracle {
    pub fn new(resolution: u32) -> Self {
        Self { resolution }
    }
}

impl CompletionBackend for EchoBestOracle {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendFailure> {
        if let Some(last) = scan_anchors(&request.prompt).pop() {
            let r = i64::from(self.resolution);
            let bins: Vec<i64> = last.into_iter().map(|b| b.clamp(0, r)).collect();
            return Ok(Completion::offline(format_bins(&bins)));
        }
        match scan_raw_solutions(&request.prompt).pop() {
            Some(x) => Ok(Completion::offline(format_floats(&x))),
            None => Err(BackendFailure::Unreadable("no anchors in prompt".into())),
        }
    }
}

/// Continues the anchor sequence linearly: `2 * last - previous`.
#[derive(Debug, Clone)]
pub struct ExtrapolateOracle {
    resolution: u32,
}

impl ExtrapolateOracle {
    pub fn new(resolution: u32) -> Self {
        Self { resolution }
    }
}

/// Per-dimension linear extrapolation of the last two anchors, clamped to
/// `0..=resolution`; a single anchor is echoed.
pub fn oracle_extrapolate(anchors: &[Vec<i64>], resolution: u32) -> Result<Vec<i64>, BackendFailure> {
    let r = i64::from(resolution);
    match anchors {
        [] => Err(BackendFailure::Unreadable("no parseable rows".into())),
        [only] => Ok(only.iter().map(|b| b.clamp(&0, &r)).copied().collect()),
        [.., prev, last] => {
            if prev.len() != last.len() {
                return Err(BackendFailure::Unreadable("anchors differ in width".into()));
            }
            Ok(prev.iter().zip(last).map(|(p, l)| (2 * l - p).clamp(0, r)).collect())
        }
    }
}

impl CompletionBackend for ExtrapolateOracle {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendFailure> {
        let anchors = scan_anchors(&request.prompt);
        if !anchors.is_empty() {
            return oracle_extrapolate(&anchors, self.resolution).map(|b| Completion::offline(format_bins(&b)));
        }
        let solutions = scan_raw_solutions(&request.prompt);
        match solutions.as_slice() {
            [] => Err(BackendFailure::Unreadable("no anchors in prompt".into())),
            [only] => Ok(Completion::offline(format_floats(only))),
            [.., prev, last] => {
                let next: Vec<f64> = prev.iter().zip(last).map(|(p, l)| 2.0 * l - p).collect();
                Ok(Completion::offline(format_floats(&next)))
            }
        }
    }
}
