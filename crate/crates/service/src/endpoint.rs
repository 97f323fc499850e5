//! Chat-completions client for a hosted multi-modal model.

use std::fmt;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use rtgrasp_core::client::{ChatRequest, ClientError, ModelClient};

pub const ENV_ENDPOINT_URL: &str = "RTG_ENDPOINT_URL";
pub const ENV_API_KEY: &str = "RTG_API_KEY";
pub const ENV_MODEL_NAME: &str = "RTG_MODEL_NAME";
pub const ENV_IMAGE_ROOT: &str = "RTG_IMAGE_ROOT";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model_name: String,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: u32,
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model_name", &self.model_name)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("environment variable {0} is not set")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Result<Self, ConfigError> {
        let cfg = Self {
            base_url: base_url.into(),
            api_key: None,
            model_name: model_name.into(),
            timeout: DEFAULT_TIMEOUT,
            max_retries: DEFAULT_MAX_RETRIES,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.base_url.trim().is_empty() {
            return Err(ConfigError::Invalid("endpoint base URL is empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(ConfigError::Invalid("timeout must be positive".into()));
        }
        Ok(())
    }

    /// Reads the endpoint variables through `var`. The API key is optional.
    pub fn from_lookup(var: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let get = |name: &'static str| var(name).filter(|v| !v.is_empty()).ok_or(ConfigError::Missing(name));
        let mut cfg = Self::new(get(ENV_ENDPOINT_URL)?, get(ENV_MODEL_NAME)?)?;
        cfg.api_key = var(ENV_API_KEY).filter(|v| !v.is_empty());
        Ok(cfg)
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// JSON body sent for `req`. Identical requests give identical bytes.
pub fn request_body(model: &str, req: &ChatRequest) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD;
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| match &m.image {
            None => json!({"role": m.role, "content": m.text}),
            Some(img) => json!({
                "role": m.role,
                "content": [
                    {"type": "text", "text": m.text},
                    {"type": "image_url", "image_url": {
                        "url": format!("data:{};base64,{}", img.media_type, b64.encode(&img.data)),
                    }},
                ],
            }),
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": req.temperature,
    });
    if let Some(n) = req.max_tokens {
        body["max_tokens"] = json!(n);
    }
    body
}

fn reply_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

pub struct HttpModelClient {
    cfg: EndpointConfig,
    http: reqwest::blocking::Client,
    /// First retry delay; doubles on each further retry.
    backoff: Duration,
}

impl HttpModelClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ClientError> {
        cfg.validate().map_err(|e| ClientError::Contract(e.to_string()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ClientError::Contract(e.to_string()))?;
        Ok(Self {
            cfg,
            http,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn attempt(&self, body: &Value) -> Result<Value, (bool, ClientError)> {
        let mut rb = self.http.post(self.cfg.completions_url()).json(body);
        if let Some(key) = &self.cfg.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            (
                true,
                ClientError::Transport {
                    attempts: 0,
                    message: e.without_url().to_string(),
                },
            )
        })?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            let body = resp.text().unwrap_or_default();
            return Err((
                retry,
                ClientError::Status {
                    status: status.as_u16(),
                    attempts: 0,
                    body: body.chars().take(500).collect(),
                },
            ));
        }
        resp.json::<Value>()
            .map_err(|e| (false, ClientError::InvalidResponse(e.without_url().to_string())))
    }
}

fn with_attempts(e: ClientError, n: u32) -> ClientError {
    match e {
        ClientError::Transport { message, .. } => ClientError::Transport { attempts: n, message },
        ClientError::Status { status, body, .. } => ClientError::Status {
            status,
            attempts: n,
            body,
        },
        other => other,
    }
}

impl ModelClient for HttpModelClient {
    fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
        let body = request_body(&self.cfg.model_name, req);
        let mut delay = self.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(v) => {
                    return reply_text(&v).ok_or_else(|| ClientError::InvalidResponse("no choices[0].message.content".into()))
                }
                Err((true, e)) if attempts <= self.cfg.max_retries => {
                    log::warn!("attempt {attempts} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err((_, e)) => return Err(with_attempts(e, attempts)),
            }
        }
    }

    fn model_id(&self) -> String {
        self.cfg.model_name.clone()
    }
}
