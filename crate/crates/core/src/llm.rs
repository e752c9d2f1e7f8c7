//! Chat-completion transport for the LLM update operator.
//!
//! Speaks the OpenAI-compatible `/chat/completions` shape, so any compatible
//! backend is reachable by swapping the base URL. Requests go through a
//! [`ChatClient`] that retries transient failures with exponential backoff,
//! bounds request rate and concurrency, and records token usage per step.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(rename = "max_tokens")]
    pub max_output_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("authentication failed ({0})")]
    Auth(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("request timed out")]
    Timeout,
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("request rejected {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            TransportError::RateLimited { .. }
                | TransportError::Timeout
                | TransportError::Server { .. }
                | TransportError::Network(_)
        )
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: TransportError },
    #[error("request failed: {0}")]
    Fatal(TransportError),
    #[error("endpoint configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("base ledger has zero tokens")]
    ZeroBase,
}

/// Sends one request and returns one completion.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

/// Where and how to reach an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl EndpointConfig {
    /// Reads the base URL and key from the named environment variables.
    /// A missing URL falls back to `default_url`.
    pub fn from_env(url_var: &str, key_var: &str, default_url: &str, timeout: Duration) -> Self {
        Self {
            base_url: std::env::var(url_var).unwrap_or_else(|_| default_url.to_string()),
            api_key: std::env::var(key_var).ok().filter(|k| !k.is_empty()),
            timeout,
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Decodes a chat-completions JSON body.
pub fn decode_completion(body: &str) -> Result<ChatResponse, TransportError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let text = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| TransportError::Malformed("no completion text".into()))?;
    let usage = wire.usage.map_or_else(TokenUsage::default, |u| TokenUsage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    Ok(ChatResponse { text, usage })
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        Ok(Self { client, url, api_key: cfg.api_key.clone() })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let body = serde_json::to_string(request).map_err(|e| TransportError::Malformed(e.to_string()))?;
        let mut req = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        match status {
            200..=299 => decode_completion(&text),
            401 | 403 => Err(TransportError::Auth(format!("status {status}"))),
            408 => Err(TransportError::Timeout),
            429 => Err(TransportError::RateLimited { retry_after }),
            500..=599 => Err(TransportError::Server { status, body: text }),
            _ => Err(TransportError::Rejected { status, body: text }),
        }
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync;

/// In-process transport: a responder function produces the completion text
/// and token counts are whitespace word counts.
pub struct MockTransport {
    responder: Box<Responder>,
}

impl MockTransport {
    pub fn new(responder: impl Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync + 'static) -> Self {
        Self { responder: Box::new(responder) }
    }

    pub fn canned(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }
}

pub fn count_words(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let text = (self.responder)(request)?;
        let prompt_tokens = request.messages.iter().map(|m| count_words(&m.content)).sum();
        let completion_tokens = count_words(&text);
        Ok(ChatResponse { text, usage: TokenUsage { prompt_tokens, completion_tokens } })
    }
}

/// Replays a fixed sequence of outcomes, then repeats the last one.
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<ChatResponse, TransportError>>>,
    last: Mutex<Option<Result<ChatResponse, TransportError>>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<ChatResponse, TransportError>>) -> Self {
        Self { script: Mutex::new(script.into()), last: Mutex::new(None) }
    }
}

impl ChatTransport for ScriptedTransport {
    fn send(&self, _request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let next = self.script.lock().unwrap().pop_front();
        let mut last = self.last.lock().unwrap();
        match next {
            Some(r) => {
                *last = Some(r.clone());
                r
            }
            None => last.clone().unwrap_or(Err(TransportError::Network("empty script".into()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 4, base_backoff_ms: 500, max_backoff_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: usize) -> Duration {
        let factor = 1u64 << retry.min(20);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Concurrency cap plus a requests-per-minute token bucket.
pub struct RateLimiter {
    max_in_flight: usize,
    per_minute: Option<u32>,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

struct LimiterState {
    in_flight: usize,
    tokens: f64,
    refilled: Instant,
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().unwrap();
        st.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RateLimiter {
    pub fn new(max_in_flight: usize, per_minute: Option<u32>) -> Self {
        let burst = per_minute.map_or(0.0, f64::from);
        Self {
            max_in_flight: max_in_flight.max(1),
            per_minute: per_minute.filter(|&r| r > 0),
            state: Mutex::new(LimiterState { in_flight: 0, tokens: burst, refilled: Instant::now() }),
            freed: Condvar::new(),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX, None)
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.in_flight < self.max_in_flight {
                match self.per_minute {
                    None => break,
                    Some(rate) => {
                        let per_sec = f64::from(rate) / 60.0;
                        let now = Instant::now();
                        let elapsed = now.duration_since(st.refilled).as_secs_f64();
                        st.tokens = (st.tokens + elapsed * per_sec).min(f64::from(rate));
                        st.refilled = now;
                        if st.tokens >= 1.0 {
                            st.tokens -= 1.0;
                            break;
                        }
                        let wait = Duration::from_secs_f64((1.0 - st.tokens) / per_sec);
                        st = self.freed.wait_timeout(st, wait).unwrap().0;
                        continue;
                    }
                }
            }
            st = self.freed.wait(st).unwrap();
        }
        st.in_flight += 1;
        Permit { limiter: self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub step: usize,
    pub attempt: usize,
    pub outcome: Result<TokenUsage, TransportError>,
}

/// Per-step and cumulative token accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub steps: BTreeMap<usize, StepUsage>,
    pub by_mode: BTreeMap<String, StepUsage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepUsage {
    pub invocations: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl StepUsage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl TokenLedger {
    pub fn record(&mut self, step: usize, mode: &str, usage: TokenUsage) {
        for slot in [self.steps.entry(step).or_default(), self.by_mode.entry(mode.to_string()).or_default()] {
            slot.invocations += 1;
            slot.prompt_tokens += usage.prompt_tokens;
            slot.completion_tokens += usage.completion_tokens;
        }
    }

    pub fn cumulative(&self) -> StepUsage {
        self.steps.values().fold(StepUsage::default(), |mut acc, s| {
            acc.invocations += s.invocations;
            acc.prompt_tokens += s.prompt_tokens;
            acc.completion_tokens += s.completion_tokens;
            acc
        })
    }

    pub fn total_tokens(&self) -> u64 {
        self.cumulative().total_tokens()
    }

    pub fn merge(&mut self, other: &TokenLedger) {
        for (k, v) in &other.steps {
            let e = self.steps.entry(*k).or_default();
            e.invocations += v.invocations;
            e.prompt_tokens += v.prompt_tokens;
            e.completion_tokens += v.completion_tokens;
        }
        for (k, v) in &other.by_mode {
            let e = self.by_mode.entry(k.clone()).or_default();
            e.invocations += v.invocations;
            e.prompt_tokens += v.prompt_tokens;
            e.completion_tokens += v.completion_tokens;
        }
    }
}

/// `(base - coord) / base * 100`.
pub fn token_savings_totals(base_total: u64, coord_total: u64) -> Result<f64, LedgerError> {
    if base_total == 0 {
        return Err(LedgerError::ZeroBase);
    }
    Ok((base_total as f64 - coord_total as f64) / base_total as f64 * 100.0)
}

pub fn token_savings(base: &TokenLedger, coord: &TokenLedger) -> Result<f64, LedgerError> {
    token_savings_totals(base.total_tokens(), coord.total_tokens())
}

/// Shared client: retries, rate limiting and usage accounting around a transport.
pub struct ChatClient {
    transport: Box<dyn ChatTransport>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    ledger: Mutex<TokenLedger>,
    attempts: Mutex<Vec<AttemptRecord>>,
    mode_label: String,
}

impl ChatClient {
    pub fn new(transport: Box<dyn ChatTransport>, retry: RetryPolicy, limiter: RateLimiter) -> Self {
        Self {
            transport,
            retry,
            limiter,
            ledger: Mutex::new(TokenLedger::default()),
            attempts: Mutex::new(Vec::new()),
            mode_label: "default".into(),
        }
    }

    pub fn with_mode_label(mut self, label: impl Into<String>) -> Self {
        self.mode_label = label.into();
        self
    }

    /// One completion, retrying transient errors. `step` tags the ledger entry.
    pub fn chat_complete(&self, request: &ChatRequest, step: usize) -> Result<ChatResponse, LlmError> {
        let mut attempt = 0;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.send(request)
            };
            self.attempts.lock().unwrap().push(AttemptRecord {
                step,
                attempt,
                outcome: outcome.as_ref().map(|r| r.usage).map_err(Clone::clone),
            });
            match outcome {
                Ok(resp) => {
                    self.ledger.lock().unwrap().record(step, &self.mode_label, resp.usage);
                    return Ok(resp);
                }
                Err(TransportError::Auth(msg)) => {
                    log::error!("chat request rejected: authentication failure ({msg})");
                    return Err(LlmError::Auth(msg));
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    let wait = match &e {
                        TransportError::RateLimited { retry_after: Some(d) } => *d,
                        _ => self.retry.backoff(attempt),
                    };
                    log::warn!("chat attempt {} failed ({e}); retrying in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(LlmError::Exhausted { attempts: attempt + 1, last: e });
                }
                Err(e) => return Err(LlmError::Fatal(e)),
            }
        }
    }

    pub fn ledger(&self) -> TokenLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn attempts(&self) -> Vec<AttemptRecord> {
        self.attempts.lock().unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(text: &str, p: u64, c: u64) -> Result<ChatResponse, TransportError> {
        Ok(ChatResponse { text: text.into(), usage: TokenUsage { prompt_tokens: p, completion_tokens: c } })
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { max_retries: 3, base_backoff_ms: 0, max_backoff_ms: 0 }
    }

    fn request() -> ChatRequest {
        ChatRequest {
            model: "test".into(),
            messages: vec![ChatMessage::user("hello there")],
            temperature: 0.7,
            max_output_tokens: 64,
            seed: None,
        }
    }

    #[test]
    fn retry_after_rate_limit() {
        let t = ScriptedTransport::new(vec![Err(TransportError::RateLimited { retry_after: None }), ok("fine", 3, 1)]);
        let client = ChatClient::new(Box::new(t), fast_retry(), RateLimiter::unlimited());
        let resp = client.chat_complete(&request(), 1).unwrap();
        assert_eq!(resp.text, "fine");
        let attempts = client.attempts();
        assert_eq!(attempts.len(), 2);
        assert!(attempts[0].outcome.is_err());
        assert!(attempts[1].outcome.is_ok());
    }

    #[test]
    fn auth_is_fatal_and_exhaustion_is_reported() {
        let t = ScriptedTransport::new(vec![Err(TransportError::Auth("401".into()))]);
        let client = ChatClient::new(Box::new(t), fast_retry(), RateLimiter::unlimited());
        assert!(matches!(client.chat_complete(&request(), 0), Err(LlmError::Auth(_))));
        assert_eq!(client.attempts().len(), 1);

        let t = ScriptedTransport::new(vec![Err(TransportError::Timeout)]);
        let client = ChatClient::new(Box::new(t), fast_retry(), RateLimiter::unlimited());
        match client.chat_complete(&request(), 0) {
            Err(LlmError::Exhausted { attempts, last }) => {
                assert_eq!(attempts, 4);
                assert_eq!(last, TransportError::Timeout);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ledger_accounting() {
        let t = ScriptedTransport::new(vec![ok("a", 812, 95)]);
        let client = ChatClient::new(Box::new(t), fast_retry(), RateLimiter::unlimited());
        client.chat_complete(&request(), 2).unwrap();
        let ledger = client.ledger();
        assert_eq!(ledger.total_tokens(), 907);
        client.chat_complete(&request(), 3).unwrap();
        let ledger = client.ledger();
        let per_step: u64 = ledger.steps.values().map(StepUsage::total_tokens).sum();
        assert_eq!(ledger.total_tokens(), per_step);
        assert_eq!(ledger.cumulative().invocations, 2);
    }

    #[test]
    fn savings_arithmetic() {
        assert_eq!(token_savings_totals(100, 100).unwrap(), 0.0);
        assert_eq!(token_savings_totals(0, 5), Err(LedgerError::ZeroBase));
        let s = token_savings_totals(320_235, 185_556).unwrap();
        assert!((s - 42.056).abs() < 1e-3);
        let s = token_savings_totals(4_526_566, 376_677).unwrap();
        assert!((s - 91.68).abs() < 1e-2);
        let mut l = TokenLedger::default();
        l.record(1, "full", TokenUsage { prompt_tokens: 10, completion_tokens: 5 });
        assert_eq!(token_savings(&l, &l).unwrap(), 0.0);
    }

    #[test]
    fn decode_wire_format() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":7,"completion_tokens":2,"total_tokens":9}}"#;
        let r = decode_completion(body).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.usage.total(), 9);
        assert!(decode_completion(r#"{"choices":[]}"#).is_err());
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy { max_retries: 5, base_backoff_ms: 100, max_backoff_ms: 350 };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(350));
    }

    #[test]
    fn limiter_caps_in_flight() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let limiter = Arc::new(RateLimiter::new(2, None));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limiter, live, peak) = (limiter.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = limiter.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
