//! Chat-completion client for OpenAI-compatible vision endpoints.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{estimate_tokens, Backend, BackendError, BackendResult, ImageRef, Query};

pub const DEFAULT_API_KEY_ENV: &str = "DCI_API_KEY";

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}
fn default_timeout_s() -> f64 {
    120.0
}
fn default_max_in_flight() -> usize {
    8
}
fn default_max_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. Unset means no auth header.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            timeout_s: default_timeout_s(),
            max_in_flight: default_max_in_flight(),
            max_attempts: default_max_attempts(),
            backoff_initial_ms: default_backoff_ms(),
            temperature: None,
            max_tokens: None,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

// Counting semaphore bounding concurrent requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    slots: Slots,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        if cfg.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if cfg.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        if !(cfg.timeout_s > 0.0) {
            return Err(BackendError::Config("timeout_s must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            debug!(var = %cfg.api_key_env, "no API key set, sending unauthenticated requests");
        }
        Ok(Self {
            slots: Slots::new(cfg.max_in_flight),
            cfg,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    /// Request body for one query.
    pub fn request_body(&self, q: &Query) -> Result<Value, BackendError> {
        let image_url = image_url(&q.image)?;
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{
                "role": "user",
                "content": [
                    { "type": "image_url", "image_url": { "url": image_url } },
                    { "type": "text", "text": q.prompt },
                ],
            }],
        });
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.cfg.max_tokens {
            body["max_tokens"] = json!(m);
        }
        Ok(body)
    }

    fn send_once(&self, body: &Value) -> Result<(String, Option<u64>), BackendError> {
        let _slot = self.slots.acquire();
        let mut req = self.client.post(self.cfg.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| self.classify(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.classify(e))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let content = first_choice_text(&value)
            .ok_or_else(|| BackendError::Malformed("no text in first choice".into()))?;
        let tokens = value
            .pointer("/usage/total_tokens")
            .and_then(Value::as_u64);
        Ok((content, tokens))
    }

    fn classify(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.cfg.timeout_s)
        } else {
            BackendError::Transport(e.to_string())
        }
    }
}

impl Backend for HttpBackend {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        let body = self.request_body(q)?;
        let mut backoff = Duration::from_millis(self.cfg.backoff_initial_ms);
        let mut last = None;
        for attempt in 1..=self.cfg.max_attempts {
            let start = Instant::now();
            match self.send_once(&body) {
                Ok((raw_text, tokens)) => {
                    return Ok(BackendResult {
                        latency_s: start.elapsed().as_secs_f64(),
                        token_estimate: tokens.unwrap_or_else(|| {
                            estimate_tokens(&q.prompt) + estimate_tokens(&raw_text)
                        }),
                        raw_text,
                        attempts: attempt,
                    });
                }
                Err(e) if e.is_retryable() => {
                    warn!(attempt, error = %e, "backend request failed");
                    last = Some(e);
                    if attempt < self.cfg.max_attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Exhausted {
            attempts: self.cfg.max_attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/png",
    }
}

fn data_url(mime: &str, data: &[u8]) -> String {
    format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(data)
    )
}

fn image_url(image: &ImageRef) -> Result<String, BackendError> {
    match image {
        ImageRef::Url(u) => Ok(u.clone()),
        ImageRef::Bytes { mime, data } => Ok(data_url(mime, data)),
        ImageRef::Path(p) => {
            let data = std::fs::read(p).map_err(|e| {
                BackendError::InvalidQuery(format!("cannot read image {}: {e}", p.display()))
            })?;
            Ok(data_url(mime_for(p), &data))
        }
    }
}

// `content` is either a plain string or an array of typed parts.
fn first_choice_text(reply: &Value) -> Option<String> {
    let content = reply.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let text: String = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            (!text.is_empty()).then_some(text)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::LabelSet;

    #[test]
    fn body_shape() {
        let backend = HttpBackend::new(HttpConfig {
            temperature: Some(0.0),
            ..HttpConfig::new("http://localhost:1/v1/", "m")
        })
        .unwrap();
        assert_eq!(backend.config().endpoint(), "http://localhost:1/v1/chat/completions");
        let q = Query::new(
            ImageRef::Bytes {
                mime: "image/png".into(),
                data: vec![1, 2, 3],
            },
            "pick one".into(),
            LabelSet::new(["a"]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let body = backend.request_body(&q).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["temperature"], 0.0);
        let content = &body["messages"][0]["content"];
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(content[0]["type"], "image_url");
        assert_eq!(content[0]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(content[1]["text"], "pick one");
    }

    #[test]
    fn reply_text_extraction() {
        let v = json!({"choices": [{"message": {"content": "None"}}]});
        assert_eq!(first_choice_text(&v).as_deref(), Some("None"));
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "cat"}]}}]});
        assert_eq!(first_choice_text(&v).as_deref(), Some("cat"));
        assert_eq!(first_choice_text(&json!({"choices": []})), None);
        assert_eq!(
            first_choice_text(&json!({"choices": [{"message": {"content": null}}]})),
            None
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = HttpConfig::new("http://x", "m");
        cfg.max_in_flight = 0;
        assert!(matches!(HttpBackend::new(cfg), Err(BackendError::Config(_))));
        let cfg: HttpConfig = toml::from_str("base_url = \"http://x\"\nmodel = \"m\"").unwrap();
        assert_eq!(cfg.timeout_s, 120.0);
        assert_eq!(cfg.api_key_env, DEFAULT_API_KEY_ENV);
    }

    #[test]
    fn mime_guessing() {
        assert_eq!(mime_for(Path::new("a.JPG")), "image/jpeg");
        assert_eq!(mime_for(Path::new("a.webp")), "image/webp");
        assert_eq!(mime_for(Path::new("a")), "image/png");
    }
}
