use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng as _;

use super::{Backend, GatewayError, GenerationRequest, Task, TaskKind};
use crate::judgment::LabelGrammar;
use crate::model::Label;
use crate::seed::{self, Rng};

/// Ground truth for the scripted roles: how to answer an instruction
/// correctly or not, how to check an answer, and how to revise one.
///
/// Returning `None` means the world does not recognise the instruction.
pub trait TaskWorld: Send + Sync {
    fn respond(&self, instruction: &str, pass: bool, rng: &mut Rng) -> Option<String>;
    fn check(&self, instruction: &str, response: &str) -> Option<bool>;
    fn refine(&self, instruction: &str, response: &str, success: bool, rng: &mut Rng) -> Option<String>;
}

/// Per-attempt success law for scripted actors and refiners.
#[derive(Debug, Clone, PartialEq)]
pub enum SuccessProfile {
    Always,
    Never,
    Bernoulli(f64),
    /// Success probability by 1-based attempt; the last entry repeats.
    Schedule(Vec<f64>),
}

impl SuccessProfile {
    /// Succeeds on exactly the given 1-based attempt.
    pub fn only_on_attempt(attempt: usize) -> Self {
        let mut probs = vec![0.0; attempt + 1];
        probs[attempt - 1] = 1.0;
        SuccessProfile::Schedule(probs)
    }

    pub fn draw(&self, attempt: u64, rng: &mut Rng) -> bool {
        let p = match self {
            SuccessProfile::Always => return true,
            SuccessProfile::Never => return false,
            SuccessProfile::Bernoulli(p) => *p,
            SuccessProfile::Schedule(probs) => {
                let idx = (attempt.max(1) as usize - 1).min(probs.len().saturating_sub(1));
                probs.get(idx).copied().unwrap_or(0.0)
            }
        };
        rng.random::<f64>() < p
    }
}

/// `(request, attempt, choice index, rng)`.
type CustomFn = dyn Fn(&GenerationRequest, u64, u32, &mut Rng) -> Option<String> + Send + Sync;

#[derive(Clone)]
pub enum Behavior {
    /// Repeats the last user message.
    Echo,
    Fixed(String),
    /// Indexed by 1-based attempt; the last entry repeats.
    Sequence(Vec<String>),
    Actor(SuccessProfile),
    /// Votes the world's verdict with probability `accuracy`, the opposite
    /// otherwise; emits unparseable text with probability `unparseable`.
    Judge {
        accuracy: f64,
        unparseable: f64,
        grammar: LabelGrammar,
    },
    Refiner(SuccessProfile),
    /// Appends one sentence per requested constraint to the seed.
    Evolver,
    Validator {
        valid_prob: f64,
    },
    Custom(Arc<CustomFn>),
}

impl fmt::Debug for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::Echo => write!(f, "Echo"),
            Behavior::Fixed(s) => f.debug_tuple("Fixed").field(s).finish(),
            Behavior::Sequence(s) => f.debug_tuple("Sequence").field(s).finish(),
            Behavior::Actor(p) => f.debug_tuple("Actor").field(p).finish(),
            Behavior::Judge { accuracy, unparseable, .. } => {
                f.debug_struct("Judge").field("accuracy", accuracy).field("unparseable", unparseable).finish()
            }
            Behavior::Refiner(p) => f.debug_tuple("Refiner").field(p).finish(),
            Behavior::Evolver => write!(f, "Evolver"),
            Behavior::Validator { valid_prob } => f.debug_struct("Validator").field("valid_prob", valid_prob).finish(),
            Behavior::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Deterministic model double.
///
/// Outputs for a request carrying a seed depend only on
/// `(model seed, request seed, choice index)`; unseeded requests fall back
/// to a per-task-kind call counter, so they are reproducible only for a
/// fixed call order. Scheduled profiles always read that counter.
pub struct ScriptedModel {
    seed: u64,
    world: Option<Arc<dyn TaskWorld>>,
    behaviors: HashMap<TaskKind, Behavior>,
    fallback: Option<Behavior>,
    attempts: [AtomicU64; 6],
}

fn counter_slot(kind: Option<TaskKind>) -> usize {
    match kind {
        Some(TaskKind::Respond) => 0,
        Some(TaskKind::Judge) => 1,
        Some(TaskKind::Refine) => 2,
        Some(TaskKind::Evolve) => 3,
        Some(TaskKind::Validate) => 4,
        None => 5,
    }
}

impl ScriptedModel {
    pub fn new(seed: u64) -> Self {
        Self { seed, world: None, behaviors: HashMap::new(), fallback: None, attempts: Default::default() }
    }

    pub fn echo(seed: u64) -> Self {
        Self::new(seed).otherwise(Behavior::Echo)
    }

    pub fn with_world(mut self, world: Arc<dyn TaskWorld>) -> Self {
        self.world = Some(world);
        self
    }

    pub fn on(mut self, kind: TaskKind, behavior: Behavior) -> Self {
        self.behaviors.insert(kind, behavior);
        self
    }

    /// Behavior for requests no other entry covers.
    pub fn otherwise(mut self, behavior: Behavior) -> Self {
        self.fallback = Some(behavior);
        self
    }

    /// Calls made so far for one task kind (`None`: untagged requests).
    pub fn attempts(&self, kind: Option<TaskKind>) -> u64 {
        self.attempts[counter_slot(kind)].load(Ordering::SeqCst)
    }

    fn world(&self, what: &str) -> Result<&dyn TaskWorld, GatewayError> {
        self.world.as_deref().ok_or_else(|| GatewayError::UnscriptedTask(format!("{what} without a task world")))
    }

    fn produce(
        &self,
        behavior: &Behavior,
        request: &GenerationRequest,
        attempt: u64,
        choice: u32,
        rng: &mut Rng,
    ) -> Result<String, GatewayError> {
        let unscripted = |what: &str| GatewayError::UnscriptedTask(what.to_string());
        match (behavior, request.task.as_ref()) {
            (Behavior::Echo, _) => Ok(request.last_user_content().unwrap_or_default().to_string()),
            (Behavior::Fixed(text), _) => Ok(text.clone()),
            (Behavior::Sequence(texts), _) => {
                let idx = (attempt as usize - 1).min(texts.len().saturating_sub(1));
                texts.get(idx).cloned().ok_or_else(|| unscripted("empty sequence"))
            }
            (Behavior::Custom(f), _) => {
                f(request, attempt, choice, rng).ok_or_else(|| unscripted("custom behavior declined"))
            }
            (Behavior::Actor(profile), Some(Task::Respond { instruction })) => {
                let pass = profile.draw(attempt, rng);
                self.world("actor")?
                    .respond(instruction, pass, rng)
                    .ok_or_else(|| unscripted(&format!("instruction {instruction:?}")))
            }
            (Behavior::Judge { accuracy, unparseable, grammar }, Some(Task::Judge { instruction, response })) => {
                let truth = self
                    .world("judge")?
                    .check(instruction, response)
                    .ok_or_else(|| unscripted(&format!("instruction {instruction:?}")))?;
                if rng.random::<f64>() < *unparseable {
                    return Ok("I cannot decide whether this response is acceptable.".into());
                }
                let verdict = if rng.random::<f64>() < *accuracy { truth } else { !truth };
                let label = if verdict { Label::Follows } else { Label::Violates };
                let reason = if verdict {
                    "the response satisfies every stated constraint"
                } else {
                    "the response misses at least one stated constraint"
                };
                Ok(format!("Review {choice}: {reason}.\n{}", grammar.render(label)))
            }
            (Behavior::Refiner(profile), Some(Task::Refine { instruction, response })) => {
                let success = profile.draw(attempt, rng);
                self.world("refiner")?
                    .refine(instruction, response, success, rng)
                    .ok_or_else(|| unscripted(&format!("instruction {instruction:?}")))
            }
            (Behavior::Evolver, Some(Task::Evolve { seed, constraints })) => {
                let mut text = seed.trim().to_string();
                for (name, description) in constraints {
                    text.push_str(&format!(" Additionally, respect the {name} constraint: {description}."));
                }
                Ok(text)
            }
            (Behavior::Validator { valid_prob }, Some(Task::Validate { .. })) => {
                if rng.random::<f64>() < *valid_prob {
                    Ok("VALID".into())
                } else {
                    Ok("INVALID: the added constraints conflict.".into())
                }
            }
            (b, task) => Err(unscripted(&format!("{b:?} cannot serve {:?}", task.map(Task::kind)))),
        }
    }
}

impl Backend for ScriptedModel {
    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        let kind = request.task.as_ref().map(Task::kind);
        let attempt = self.attempts[counter_slot(kind)].fetch_add(1, Ordering::SeqCst) + 1;
        let behavior = request
            .task
            .as_ref()
            .and_then(|t| self.behaviors.get(&t.kind()))
            .or(self.fallback.as_ref())
            .ok_or_else(|| GatewayError::UnscriptedTask(format!("{:?}", request.task.as_ref().map(Task::kind))))?;
        let base = match request.seed {
            Some(s) => seed::derive(self.seed, &format!("req/{s}")),
            None => seed::derive(self.seed, &format!("attempt/{}/{attempt}", counter_slot(kind))),
        };
        (0..request.n)
            .map(|i| {
                let mut rng = seed::rng_for(base, &i.to_string());
                self.produce(behavior, request, attempt, i, &mut rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_profile_rate() {
        let profile = SuccessProfile::Bernoulli(0.4);
        let mut rng = seed::rng(7);
        let hits = (0..10_000).filter(|i| profile.draw(*i, &mut rng)).count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.4).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn schedule_profile() {
        let p = SuccessProfile::only_on_attempt(3);
        let mut rng = seed::rng(0);
        let draws: Vec<bool> = (1..=5).map(|a| p.draw(a, &mut rng)).collect();
        assert_eq!(draws, vec![false, false, true, false, false]);
    }

    #[test]
    fn unscripted_kind_is_an_error() {
        let model = ScriptedModel::new(0).on(TaskKind::Evolve, Behavior::Evolver);
        let req = GenerationRequest::new(
            vec![super::super::ChatMessage::user("x")],
            1,
            crate::model::GenerationParams::new(0.0, 1.0, 8),
        )
        .with_task(Task::Respond { instruction: "x".into() });
        assert!(matches!(model.complete(&req), Err(GatewayError::UnscriptedTask(_))));
    }
}
