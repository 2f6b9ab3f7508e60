//! Uniform client for chat-completion endpoints.
//!
//! This is the only module that touches a network. Everything else talks to a
//! [`Gateway`], which wraps a backend (remote HTTP or the deterministic mock)
//! with per-endpoint concurrency bounding, a retry policy, and telemetry.

mod http;
mod mock;

pub use http::HttpBackend;
pub use mock::{MockBackend, MockRule, MockScript, RuleMatch};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport failure after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("request rejected with HTTP {status}: {body_excerpt}")]
    Request { status: u16, body_excerpt: String },
    #[error("failed to decode backend response: {0}")]
    Decode(String),
    #[error("mock script has no rule or fallback for request {digest}")]
    ScriptedGap { digest: String },
}

impl GatewayError {
    /// Errors worth retrying: transport faults and throttling/5xx rejections.
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Request { status, .. } => *status == 429 || *status >= 500,
            _ => false,
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
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Ordered role-tagged messages; the unit of every prompt chain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Conversation {
    pub messages: Vec<Message>,
}

impl Conversation {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages }
    }

    pub fn single_user(content: impl Into<String>) -> Self {
        Self { messages: vec![Message::user(content)] }
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn last_role(&self) -> Option<Role> {
        self.messages.last().map(|m| m.role)
    }

    /// Outbound invariant: roles alternate User/Assistant after any leading
    /// System message, and User/Assistant content is non-empty.
    pub fn validate_outbound(&self) -> Result<(), GatewayError> {
        let mut iter = self.messages.iter().peekable();
        while matches!(iter.peek(), Some(m) if m.role == Role::System) {
            iter.next();
        }
        let mut expected = Role::User;
        for message in iter {
            if message.role == Role::System {
                return Err(GatewayError::Precondition(
                    "system messages must lead the conversation".into(),
                ));
            }
            if message.role != expected {
                return Err(GatewayError::Precondition(format!(
                    "expected alternating roles, found consecutive {:?}",
                    message.role
                )));
            }
            if message.content.trim().is_empty() {
                return Err(GatewayError::Precondition(format!(
                    "{:?} message with empty content",
                    message.role
                )));
            }
            expected = if expected == Role::User { Role::Assistant } else { Role::User };
        }
        if self.messages.is_empty() {
            return Err(GatewayError::Precondition("empty conversation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
}

impl GenParams {
    pub fn new(temperature: f64, max_tokens: u32) -> Self {
        Self { temperature, max_tokens, seed: None, stop: None, logprobs: None }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Precondition(format!(
                "temperature must be a non-negative real, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Filtered,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<(String, f64)>>,
    pub usage: Usage,
}

/// Remote endpoint description. Auth tokens are read from the named
/// environment variable, never from config values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub auth_token_env_var: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_concurrency() -> usize {
    4
}
fn default_retry_base_ms() -> u64 {
    250
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrency < 1 {
            return Err(GatewayError::Precondition("max_concurrency must be >= 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::Precondition("base_url must be set".into()));
        }
        Ok(())
    }
}

/// A chat-completion provider. One call, one completion; retries live in the
/// gateway wrapper.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, conv: &Conversation, params: &GenParams) -> Result<Completion, GatewayError>;
    fn model_name(&self) -> &str;
}

/// Counters observable after a run; all monotone.
#[derive(Debug, Default)]
pub struct Telemetry {
    requests: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
    empty_completions: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TelemetrySnapshot {
    pub requests: u64,
    pub retries: u64,
    pub failures: u64,
    pub empty_completions: u64,
}

impl Telemetry {
    fn snapshot(&self) -> TelemetrySnapshot {
        TelemetrySnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            empty_completions: self.empty_completions.load(Ordering::Relaxed),
        }
    }
}

struct Limiter {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), available: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter wait");
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().expect("limiter lock");
        *permits += 1;
        self.limiter.available.notify_one();
    }
}

/// Backend plus concurrency bound, retry policy, and telemetry.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Limiter,
    max_retries: u32,
    retry_base: Duration,
    telemetry: Telemetry,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, max_concurrency: usize, max_retries: u32) -> Self {
        Self::with_retry_base(backend, max_concurrency, max_retries, Duration::from_millis(250))
    }

    pub fn with_retry_base(
        backend: Arc<dyn ChatBackend>,
        max_concurrency: usize,
        max_retries: u32,
        retry_base: Duration,
    ) -> Self {
        Self {
            backend,
            limiter: Limiter::new(max_concurrency.max(1)),
            max_retries,
            retry_base,
            telemetry: Telemetry::default(),
        }
    }

    pub fn for_endpoint(endpoint: &EndpointConfig) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let backend = HttpBackend::new(endpoint.clone())?;
        Ok(Self::with_retry_base(
            Arc::new(backend),
            endpoint.max_concurrency,
            endpoint.max_retries,
            Duration::from_millis(endpoint.retry_base_ms),
        ))
    }

    pub fn for_mock(script: MockScript, model_name: &str, max_concurrency: usize) -> Self {
        Self::new(Arc::new(MockBackend::new(script, model_name)), max_concurrency, 0)
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    pub fn telemetry(&self) -> TelemetrySnapshot {
        self.telemetry.snapshot()
    }

    /// Complete a conversation, retrying transient failures with exponential
    /// backoff and jitter. The request content is identical across attempts.
    pub fn complete_chat(
        &self,
        conv: &Conversation,
        params: &GenParams,
    ) -> Result<Completion, GatewayError> {
        conv.validate_outbound()?;
        params.validate()?;
        let _permit = self.limiter.acquire();
        self.telemetry.requests.fetch_add(1, Ordering::Relaxed);

        let mut attempt = 0u32;
        loop {
            match self.backend.complete(conv, params) {
                Ok(completion) => {
                    if completion.text.trim().is_empty() {
                        self.telemetry.empty_completions.fetch_add(1, Ordering::Relaxed);
                    }
                    return Ok(completion);
                }
                Err(err) if err.is_transient() && attempt < self.max_retries => {
                    attempt += 1;
                    self.telemetry.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(self.backoff(attempt));
                }
                Err(err) => {
                    self.telemetry.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(match err {
                        GatewayError::Transport { message, .. } => {
                            GatewayError::Transport { message, retries: attempt }
                        }
                        other => other,
                    });
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.retry_base.as_millis() as u64;
        let exp = base.saturating_mul(1u64 << attempt.min(10));
        let jitter = rand::rng().random_range(0..=base.max(1) / 2);
        Duration::from_millis(exp + jitter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternation_accepts_leading_system() {
        let conv = Conversation::new(vec![
            Message::system("be terse"),
            Message::user("hi"),
            Message::assistant("hello"),
            Message::user("more"),
        ]);
        assert!(conv.validate_outbound().is_ok());
    }

    #[test]
    fn alternation_rejects_double_user() {
        let conv = Conversation::new(vec![Message::user("a"), Message::user("b")]);
        assert!(conv.validate_outbound().is_err());
    }

    #[test]
    fn empty_user_content_rejected() {
        let conv = Conversation::new(vec![Message::user("  ")]);
        assert!(conv.validate_outbound().is_err());
    }

    #[test]
    fn misplaced_system_rejected() {
        let conv = Conversation::new(vec![Message::user("a"), Message::system("late")]);
        assert!(conv.validate_outbound().is_err());
    }

    #[test]
    fn params_validation() {
        assert!(GenParams::new(-0.1, 10).validate().is_err());
        assert!(GenParams::new(0.0, 0).validate().is_err());
        assert!(GenParams::new(1.0, 1).validate().is_ok());
    }

    #[test]
    fn transient_classification() {
        assert!(GatewayError::Transport { message: "x".into(), retries: 0 }.is_transient());
        assert!(GatewayError::Request { status: 429, body_excerpt: String::new() }.is_transient());
        assert!(GatewayError::Request { status: 503, body_excerpt: String::new() }.is_transient());
        assert!(!GatewayError::Request { status: 400, body_excerpt: String::new() }.is_transient());
        assert!(!GatewayError::Decode("x".into()).is_transient());
    }
}
