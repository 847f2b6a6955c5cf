//! Blocking chat-completions client with bounded retry and a cap on
//! concurrent in-flight requests.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the bearer token, if any.
pub const DEFAULT_API_KEY_ENV: &str = "ARCHEVO_API_KEY";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("server error HTTP {status} after {attempts} attempt(s)")]
    Server { status: u16, attempts: u32 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("client error HTTP {status}: {body}")]
    Client { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidRequest(m.into()));
        match self.messages.first() {
            None => return bad("messages must not be empty"),
            Some(m) if m.role == Role::Assistant => return bad("first message must be system or user"),
            _ => {}
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryClass {
    RateLimit,
    ServerError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
    pub retry_on: Vec<RetryClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            multiplier: 2.0,
            max_delay_ms: 30_000,
            retry_on: vec![RetryClass::RateLimit, RetryClass::ServerError, RetryClass::Timeout],
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(retry.saturating_sub(1) as i32);
        let ms = (self.base_delay_ms as f64 * factor).min(self.max_delay_ms as f64);
        Duration::from_millis(ms as u64)
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.max_attempts == 0 {
            return Err(LlmError::InvalidRequest("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempts: u32,
}

/// Anything that can answer a chat-completion request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Base URL, or a full URL ending in `/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub api_key_env: String,
    pub retry: RetryPolicy,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            model: "mixtral-8x7b-instruct".into(),
            temperature: 0.7,
            max_tokens: 2048,
            concurrency: 4,
            timeout_secs: 120,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            retry: RetryPolicy::default(),
        }
    }
}

impl LlmConfig {
    pub fn completions_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Outcome of a single HTTP attempt.
enum Attempt {
    Done(Completion),
    Retry(RetryClass, u16),
    Fail(LlmError),
}

pub struct LlmClient {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    permits: Semaphore,
}

impl LlmClient {
    /// Builds a client; the bearer token is read from `cfg.api_key_env`.
    pub fn new(cfg: &LlmConfig) -> Result<Self, LlmError> {
        cfg.retry.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        Ok(Self {
            agent,
            url: cfg.completions_url(),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
            policy: cfg.retry.clone(),
            permits: Semaphore::new(cfg.concurrency),
        })
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn attempt(&self, req: &CompletionRequest, n: u32) -> Attempt {
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match call.send_json(req) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(RetryClass::Timeout, 0),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Attempt::Retry(RetryClass::Timeout, 0)
            }
            Err(e) => return Attempt::Fail(LlmError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(RetryClass::Timeout, status),
            Err(e) => return Attempt::Fail(LlmError::Transport(e.to_string())),
        };
        match status {
            200..=299 => match parse_completion(&body) {
                Ok((text, usage)) => Attempt::Done(Completion {
                    text,
                    usage,
                    attempts: n,
                }),
                Err(e) => Attempt::Fail(e),
            },
            401 | 403 => Attempt::Fail(LlmError::Auth { status }),
            429 => Attempt::Retry(RetryClass::RateLimit, status),
            500..=599 => Attempt::Retry(RetryClass::ServerError, status),
            _ => Attempt::Fail(LlmError::Client { status, body }),
        }
    }
}

impl ChatBackend for LlmClient {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        let _permit = self.permits.acquire();
        let mut n = 0;
        loop {
            n += 1;
            let (class, status) = match self.attempt(req, n) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(class, status) => (class, status),
            };
            if n >= self.policy.max_attempts || !self.policy.retry_on.contains(&class) {
                return Err(match class {
                    RetryClass::RateLimit => LlmError::RateLimited { attempts: n },
                    RetryClass::ServerError => LlmError::Server { status, attempts: n },
                    RetryClass::Timeout => LlmError::Timeout { attempts: n },
                });
            }
            std::thread::sleep(self.policy.delay(n));
        }
    }
}

/// Pulls `choices[0].message.content` and optional usage out of a response.
pub fn parse_completion(body: &str) -> Result<(String, Option<Usage>), LlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?;
    let usage = v.get("usage").and_then(|u| serde_json::from_value(u.clone()).ok());
    Ok((text.to_string(), usage))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_non_decreasing_and_capped() {
        let p = RetryPolicy {
            base_delay_ms: 100,
            multiplier: 3.0,
            max_delay_ms: 1000,
            ..RetryPolicy::default()
        };
        let d: Vec<u64> = (1..6).map(|i| p.delay(i).as_millis() as u64).collect();
        assert_eq!(d, vec![100, 300, 900, 1000, 1000]);
    }

    #[test]
    fn request_validation() {
        let mut r = CompletionRequest {
            model: "m".into(),
            messages: vec![],
            temperature: 0.7,
            max_tokens: 10,
        };
        assert!(r.validate().is_err());
        r.messages.push(ChatMessage {
            role: Role::Assistant,
            content: "x".into(),
        });
        assert!(r.validate().is_err());
        r.messages[0] = ChatMessage::system("x");
        assert!(r.validate().is_ok());
    }

    #[test]
    fn url_forms() {
        let mut c = LlmConfig::default();
        c.endpoint = "http://h:1/".into();
        assert_eq!(c.completions_url(), "http://h:1/v1/chat/completions");
        c.endpoint = "http://h:1/v1".into();
        assert_eq!(c.completions_url(), "http://h:1/v1/chat/completions");
        c.endpoint = "http://h:1/api/chat/completions".into();
        assert_eq!(c.completions_url(), "http://h:1/api/chat/completions");
    }

    #[test]
    fn completion_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1,"total_tokens":4}}"#;
        let (text, usage) = parse_completion(body).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage.unwrap().total_tokens, 4);
        assert!(matches!(parse_completion("{}"), Err(LlmError::MalformedResponse(_))));
        assert!(matches!(parse_completion("nope"), Err(LlmError::MalformedResponse(_))));
    }
}
