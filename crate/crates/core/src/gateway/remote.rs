use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, GatewayError, GenerationRequest, Limiter};

/// Connection settings for an OpenAI-compatible endpoint.
///
/// The key itself never appears in configuration; `api_key_env` names the
/// environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "default".into(),
            api_key_env: None,
            timeout_ms: 120_000,
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 8,
        }
    }
}

impl EndpointConfig {
    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff_ms(&self, retry: u32) -> u64 {
        let shift = retry.saturating_sub(1).min(20);
        self.backoff_base_ms.saturating_mul(1u64 << shift)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Connection-level failure: refused, reset, timed out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure(pub String);

pub trait Transport: Send + Sync {
    fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, TransportFailure>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build();
        Self { agent: ureq::Agent::new_with_config(config) }
    }
}

impl Transport for UreqTransport {
    fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, TransportFailure> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| TransportFailure(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| TransportFailure(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// Backoff slept before this attempt.
    pub delay_ms: u64,
    pub outcome: String,
}

pub struct RemoteBackend {
    config: EndpointConfig,
    api_key: Option<String>,
    transport: Box<dyn Transport>,
    limiter: Limiter,
}

impl RemoteBackend {
    /// Builds a backend over HTTP, reading the API key from the configured
    /// environment variable.
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        let transport = UreqTransport::new(Duration::from_millis(config.timeout_ms.max(1)));
        Self::with_transport(config, Box::new(transport))
    }

    pub fn with_transport(config: EndpointConfig, transport: Box<dyn Transport>) -> Result<Self, GatewayError> {
        if config.timeout_ms == 0 {
            return Err(GatewayError::InvalidRequest("timeout_ms must be > 0".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let limiter = Limiter::new(config.max_in_flight);
        Ok(Self { config, api_key, transport, limiter })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn request_body(&self, request: &GenerationRequest, n: u32, seed: Option<u64>) -> Value {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": request.messages,
            "n": n,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = seed {
            body["seed"] = json!(seed);
        }
        body
    }

    /// One logical call with retries, returning the attempt log alongside
    /// the outcome.
    pub fn send_logged(
        &self,
        request: &GenerationRequest,
        n: u32,
        seed: Option<u64>,
    ) -> (Result<Vec<String>, GatewayError>, Vec<AttemptRecord>) {
        let body = self.request_body(request, n, seed).to_string();
        let url = self.config.completions_url();
        let mut headers = Vec::new();
        if let Some(key) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let mut log = Vec::new();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            let delay_ms = if attempt == 0 { 0 } else { self.config.backoff_ms(attempt) };
            if delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(delay_ms));
            }
            let reply = {
                let _permit = self.limiter.acquire();
                self.transport.post(&url, &headers, &body)
            };
            match reply {
                Ok(HttpReply { status, body }) if (200..300).contains(&status) => {
                    log.push(AttemptRecord { attempt, delay_ms, outcome: format!("http {status}") });
                    return (decode_choices(&body), log);
                }
                Ok(HttpReply { status, body }) => {
                    last = format!("http {status}: {}", truncate(&body, 200));
                    log.push(AttemptRecord { attempt, delay_ms, outcome: last.clone() });
                    if !(status == 429 || status >= 500) {
                        return (Err(GatewayError::Transport { attempts: attempt + 1, message: last }), log);
                    }
                }
                Err(TransportFailure(msg)) => {
                    last = msg;
                    log.push(AttemptRecord { attempt, delay_ms, outcome: last.clone() });
                }
            }
        }
        let attempts = self.config.max_retries + 1;
        (Err(GatewayError::Transport { attempts, message: last }), log)
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        let want = request.n as usize;
        let mut out = Vec::with_capacity(want);
        // Some servers cap or ignore `n`; top up with follow-up calls.
        let mut round = 0u64;
        while out.len() < want {
            let remaining = (want - out.len()) as u32;
            let seed = request.seed.map(|s| s.wrapping_add(round));
            let (result, _) = self.send_logged(request, remaining, seed);
            let batch = result?;
            if batch.is_empty() {
                return Err(GatewayError::MalformedResponse("no choices returned".into()));
            }
            out.extend(batch);
            round += 1;
        }
        out.truncate(want);
        Ok(out)
    }
}

/// Extracts `choices[].message.content`, ordered by `choices[].index`.
pub(crate) fn decode_choices(body: &str) -> Result<Vec<String>, GatewayError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let choices = value
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices array".into()))?;
    let mut indexed = Vec::with_capacity(choices.len());
    for (pos, choice) in choices.iter().enumerate() {
        let index = choice.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
        let content = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::MalformedResponse(format!("choice {pos} has no message.content")))?;
        indexed.push((index, content.to_string()));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, c)| c).collect())
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
