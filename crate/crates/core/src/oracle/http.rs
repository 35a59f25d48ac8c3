//! Client for OpenAI-compatible chat-completion endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Oracle, OracleConfig, OracleRequest, OracleResponse, Usage};
use crate::error::{Error, Result};

/// Blocking chat-completion client with exponential backoff on transport
/// errors, rate limits and server errors. Holds no state besides the
/// connection pool, so independent runs may use separate clients freely.
pub struct HttpOracle {
    cfg: OracleConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    backoff: Duration,
}

impl HttpOracle {
    /// Reads the bearer token from `cfg.api_key_env`; a missing variable sends no token.
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout())
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            cfg,
            client,
            api_key,
            backoff: Duration::from_millis(500),
        })
    }

    /// Base delay before the first retry; doubles on each further retry.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn request_body(&self, request: &OracleRequest) -> Value {
        json!({
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": request.prompt.prefix},
                {"role": "user", "content": request.prompt.body},
            ],
        })
    }

    fn send_once(&self, body: &Value) -> std::result::Result<Value, (bool, String)> {
        let mut req = self.client.post(&self.cfg.endpoint_url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((retry, format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        serde_json::from_str(&text).map_err(|e| (false, format!("response is not JSON: {e}")))
    }
}

fn extract(value: &Value) -> Result<OracleResponse> {
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))?;
    let usage = value.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    Ok(OracleResponse {
        raw_text: content.to_owned(),
        usage,
    })
}

impl Oracle for HttpOracle {
    fn complete(&mut self, request: &OracleRequest) -> Result<OracleResponse> {
        let body = self.request_body(request);
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(value) => return extract(&value),
                Err((retry, msg)) => {
                    if !retry || attempt >= self.cfg.max_retries {
                        return Err(Error::Transport(format!("after {} attempts: {msg}", attempt + 1)));
                    }
                }
            }
            std::thread::sleep(delay);
            delay *= 2;
            attempt += 1;
        }
    }
}
