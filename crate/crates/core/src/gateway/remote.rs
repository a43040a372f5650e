//! Chat-completion client over HTTP.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendIdentity, GatewayError, LlmBackend, LlmRequest};

pub const ENV_API_BASE: &str = "LLM_API_BASE";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL without the trailing `/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Total attempts per request, first try included.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub images: bool,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            images: true,
        }
    }

    /// Reads `LLM_API_BASE`, `LLM_API_KEY` and `LLM_MODEL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| GatewayError::Backend(format!("{ENV_API_BASE} is not set")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into());
        let mut cfg = RemoteConfig::new(base, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend { cfg, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    /// Request body in the chat-completion schema.
    pub fn request_body(&self, req: &LlmRequest) -> Value {
        let content = match &req.image_ref {
            Some(image) => json!([
                {"type": "text", "text": req.prompt},
                {"type": "image_url", "image_url": {"url": image}},
            ]),
            None => Value::String(req.prompt.clone()),
        };
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.decode.temperature,
            "max_tokens": req.decode.max_tokens,
        });
        if let Some(seed) = req.decode.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, GatewayError> {
        let url = format!("{}/chat/completions", self.cfg.base_url);
        let mut call = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send_json(body).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status { status, body: text });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(format!("reply is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
    }

    /// Queries `{base}/health` and returns the reported model identity.
    pub fn health(&self) -> Result<String, GatewayError> {
        let url = format!("{}/health", self.cfg.base_url);
        let mut resp = self.agent.get(&url).call().map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status { status, body: text });
        }
        match serde_json::from_str::<Value>(&text) {
            Ok(v) => match v.get("model").and_then(Value::as_str) {
                Some(m) => Ok(m.to_string()),
                None => Err(GatewayError::Protocol("health reply lacks `model`".into())),
            },
            Err(_) => Ok(text.trim().to_string()),
        }
    }
}

fn transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::StatusCode(status) => GatewayError::Status {
            status,
            body: String::new(),
        },
        other => GatewayError::Transport {
            attempts: 1,
            message: other.to_string(),
        },
    }
}

impl LlmBackend for RemoteBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "remote".into(),
            model: self.cfg.model.clone(),
        }
    }

    fn supports_images(&self) -> bool {
        self.cfg.images
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        let body = self.request_body(req);
        let attempts = self.cfg.max_attempts.max(1);
        let mut delay = self.cfg.backoff;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_transient() => {
                    tracing::warn!(attempt, error = %e, "transient backend failure");
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}
