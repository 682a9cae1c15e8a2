//! Completion backends for the actor and refiner roles.
//!
//! [`RemoteBackend`] speaks the OpenAI chat-completions wire shape with
//! retries and exponential backoff. [`ScriptedModel`] is a deterministic
//! simulator implementing the same [`Backend`] trait, so tests drive the
//! production code paths.

mod remote;
mod scripted;

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GenerationParams;

pub use remote::{AttemptRecord, EndpointConfig, HttpReply, RemoteBackend, Transport, TransportFailure, UreqTransport};
pub use scripted::{Behavior, ScriptedModel, SuccessProfile, TaskWorld};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted behavior for {0}")]
    UnscriptedTask(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("backend returned {got} completions, expected {expected}")]
    CountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Respond,
    Judge,
    Refine,
    Evolve,
    Validate,
}

/// Structured description of what a request asks for.
///
/// Remote backends ignore it (the messages carry the same content); the
/// scripted simulator uses it to pick a behavior without parsing prompts.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Respond { instruction: String },
    Judge { instruction: String, response: String },
    Refine { instruction: String, response: String },
    Evolve { seed: String, constraints: Vec<(String, String)> },
    Validate { prompt: String },
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Respond { .. } => TaskKind::Respond,
            Task::Judge { .. } => TaskKind::Judge,
            Task::Refine { .. } => TaskKind::Refine,
            Task::Evolve { .. } => TaskKind::Evolve,
            Task::Validate { .. } => TaskKind::Validate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub messages: Vec<ChatMessage>,
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub task: Option<Task>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<ChatMessage>, n: u32, params: GenerationParams) -> Self {
        Self {
            messages,
            n,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            seed: None,
            task: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_task(mut self, task: Task) -> Self {
        self.task = Some(task);
        self
    }

    pub fn last_user_content(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n < 1 {
            return Err(GatewayError::InvalidRequest("n must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        let mut rest = self.messages.as_slice();
        if let Some(first) = rest.first() {
            if first.role == Role::System {
                rest = &rest[1..];
            }
        }
        if rest.is_empty() {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        for (i, m) in rest.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return Err(GatewayError::InvalidRequest(format!(
                    "message {i} has role {:?}, expected {:?}",
                    m.role, expected
                )));
            }
            if m.role != Role::Assistant && m.content.is_empty() {
                return Err(GatewayError::InvalidRequest(format!("message {i} is empty")));
            }
        }
        Ok(())
    }
}

/// A source of completions. Implementations must be safe to call from
/// several threads at once.
pub trait Backend: Send + Sync {
    /// Returns the completions for `request`. [`generate`] validates the
    /// request and the result count around this call.
    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        (**self).complete(request)
    }
}

/// Validated generation: exactly `request.n` completions in stable order.
pub fn generate(backend: &dyn Backend, request: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
    request.validate()?;
    let out = backend.complete(request)?;
    if out.len() != request.n as usize {
        return Err(GatewayError::CountMismatch { expected: request.n as usize, got: out.len() });
    }
    Ok(out)
}

/// Backends bound to the two model roles. Both may point at the same model.
#[derive(Clone)]
pub struct RoleBinding {
    pub actor: Arc<dyn Backend>,
    pub refiner: Arc<dyn Backend>,
}

impl RoleBinding {
    pub fn new(actor: Arc<dyn Backend>, refiner: Arc<dyn Backend>) -> Self {
        Self { actor, refiner }
    }

    pub fn shared(backend: Arc<dyn Backend>) -> Self {
        Self { actor: backend.clone(), refiner: backend }
    }
}

/// Counting semaphore bounding simultaneous in-flight calls.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        Self { available: Mutex::new(capacity.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.limiter.available.lock().expect("limiter poisoned");
        *available += 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn params() -> GenerationParams {
        GenerationParams::new(0.0, 1.0, 16)
    }

    #[test]
    fn echo_returns_the_user_message() {
        let model = ScriptedModel::echo(0);
        let req = GenerationRequest::new(vec![ChatMessage::user("ping")], 1, params());
        assert_eq!(generate(&model, &req).unwrap(), vec!["ping".to_string()]);
    }

    #[test]
    fn returns_exactly_n() {
        let model = ScriptedModel::echo(0);
        let req = GenerationRequest::new(vec![ChatMessage::user("ping")], 3, params());
        assert_eq!(generate(&model, &req).unwrap().len(), 3);
    }

    #[test]
    fn rejects_bad_requests() {
        let model = ScriptedModel::echo(0);
        let req = GenerationRequest::new(vec![ChatMessage::user("ping")], 0, params());
        assert!(matches!(generate(&model, &req), Err(GatewayError::InvalidRequest(_))));
        let req = GenerationRequest::new(vec![ChatMessage::user("a"), ChatMessage::user("b")], 1, params());
        assert!(matches!(generate(&model, &req), Err(GatewayError::InvalidRequest(_))));
        let mut req = GenerationRequest::new(vec![ChatMessage::user("a")], 1, params());
        req.temperature = -1.0;
        assert!(matches!(generate(&model, &req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn accepts_system_then_alternating_turns() {
        let req = GenerationRequest::new(
            vec![
                ChatMessage::system("be terse"),
                ChatMessage::user("q"),
                ChatMessage::assistant("a"),
                ChatMessage::user("again"),
            ],
            1,
            params(),
        );
        assert!(req.validate().is_ok());
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Limiter::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _permit = limiter.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
