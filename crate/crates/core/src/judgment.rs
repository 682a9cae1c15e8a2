//! Point-wise judging with self-consistency voting.
//!
//! The refiner is asked `n_votes` times whether a response follows its
//! instruction. Unparseable votes are dropped, the label is decided by
//! majority (ties go to `violates`), and the explanation is drawn at random
//! from the votes that agree with the final label.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{generate, Backend, ChatMessage, GatewayError, GenerationRequest, Task};
use crate::model::{Judgment, Label, ModelError, Producer, Prompt, Response, SamplingPlan, VoteSet};
use crate::seed;
use crate::template::fill_slots;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("template lacks required slot {{{0}}}")]
    MissingSlot(String),
    #[error("no label marker found")]
    NoLabelFound,
    #[error("only {parsed} of {requested} votes were parseable")]
    JudgeUnparseable { parsed: usize, requested: usize },
    #[error("label markers overlap: {0:?} / {1:?}")]
    OverlappingMarkers(String, String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl JudgeError {
    /// Short class name used in error counters.
    pub fn class(&self) -> &'static str {
        match self {
            JudgeError::MissingSlot(_) => "missing_slot",
            JudgeError::NoLabelFound => "no_label",
            JudgeError::JudgeUnparseable { .. } => "judge_unparseable",
            JudgeError::OverlappingMarkers(..) => "overlapping_markers",
            JudgeError::Gateway(GatewayError::UnscriptedTask(_)) => "unscripted_task",
            JudgeError::Gateway(GatewayError::MalformedResponse(_)) => "malformed_response",
            JudgeError::Gateway(_) => "transport",
            JudgeError::Model(_) => "model",
        }
    }
}

/// The marker line a judge must end its verdict with, e.g.
/// `Judgment: does not follow`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelGrammar {
    pub prefix: String,
    pub follows: String,
    pub violates: String,
}

impl Default for LabelGrammar {
    fn default() -> Self {
        Self { prefix: "Judgment:".into(), follows: "follows".into(), violates: "does not follow".into() }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl LabelGrammar {
    pub fn validate(&self) -> Result<(), JudgeError> {
        let (f, v) = (normalize(&self.follows), normalize(&self.violates));
        if f.is_empty() || v.is_empty() || f.contains(&v) || v.contains(&f) {
            return Err(JudgeError::OverlappingMarkers(self.follows.clone(), self.violates.clone()));
        }
        Ok(())
    }

    pub fn render(&self, label: Label) -> String {
        let word = match label {
            Label::Follows => &self.follows,
            Label::Violates => &self.violates,
        };
        format!("{} {}", self.prefix, word)
    }

    fn match_line(&self, line: &str) -> Option<Label> {
        let line = normalize(line);
        let rest = line.strip_prefix(&normalize(&self.prefix))?.trim_start();
        let (f, v) = (normalize(&self.follows), normalize(&self.violates));
        // Longer marker first so a marker that extends another wins.
        let mut markers = [(v, Label::Violates), (f, Label::Follows)];
        markers.sort_by_key(|(m, _)| std::cmp::Reverse(m.len()));
        markers.into_iter().find(|(m, _)| rest.starts_with(m.as_str())).map(|(_, label)| label)
    }
}

const DEFAULT_JUDGE_TEMPLATE: &str = "Please act as an impartial judge and evaluate whether the \
response below precisely follows every requirement of the instruction. Examine each constraint \
in turn, explain your reasoning, and end with a final line that reads either \
\"Judgment: follows\" or \"Judgment: does not follow\".\n\n\
[Instruction]\n{instruction}\n\n[Response]\n{response}";

const DEFAULT_REFINE_INSTRUCTION: &str = "Based on your judgment, revise the response so that it \
follows the instruction exactly. Correct only the problems you identified with minimal changes \
and output nothing but the revised response.";

/// Prompt templates for the refiner's judge and refine turns.
///
/// `text` must contain `{instruction}` (or `{x}`) and `{response}` (or
/// `{y}`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeTemplate {
    pub text: String,
    pub grammar: LabelGrammar,
    pub refine_instruction: String,
}

impl Default for JudgeTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_JUDGE_TEMPLATE.into(),
            grammar: LabelGrammar::default(),
            refine_instruction: DEFAULT_REFINE_INSTRUCTION.into(),
        }
    }
}

impl JudgeTemplate {
    pub fn with_text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Default::default() }
    }

    pub fn render_prompt(&self, instruction: &str, response: &str) -> Result<String, JudgeError> {
        fill_slots(&self.text, &[(&["instruction", "x"], instruction), (&["response", "y"], response)])
            .map_err(JudgeError::MissingSlot)
    }

    /// The assistant turn stored in training data: explanation followed by
    /// the marker line. [`parse_judgment`] inverts it.
    pub fn render_judgment(&self, judgment: &Judgment) -> String {
        format!("{}\n{}", judgment.explanation, self.grammar.render(judgment.label))
    }

    /// First-turn judge messages followed by the second-turn refine request.
    pub fn refine_messages(
        &self,
        instruction: &str,
        response: &str,
        judgment: &Judgment,
    ) -> Result<Vec<ChatMessage>, JudgeError> {
        let mut messages = vec![ChatMessage::user(self.render_prompt(instruction, response)?)];
        messages.push(ChatMessage::assistant(self.render_judgment(judgment)));
        messages.push(ChatMessage::user(self.refine_instruction.clone()));
        Ok(messages)
    }
}

pub fn render_judge_messages(x: &Prompt, y: &Response, tmpl: &JudgeTemplate) -> Result<Vec<ChatMessage>, JudgeError> {
    Ok(vec![ChatMessage::user(tmpl.render_prompt(&x.text, &y.text)?)])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedJudgment {
    pub label: Label,
    pub explanation: String,
}

/// Finds the last marker line; everything else is the explanation.
pub fn parse_judgment(text: &str, grammar: &LabelGrammar) -> Result<ParsedJudgment, JudgeError> {
    let lines: Vec<&str> = text.lines().collect();
    let (idx, label) = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| grammar.match_line(l).map(|label| (i, label)))
        .ok_or(JudgeError::NoLabelFound)?;
    let explanation = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    Ok(ParsedJudgment { label, explanation })
}

/// How parsed votes become a label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum VoteRule {
    /// Follows iff strictly more than half the parsed votes say so.
    Majority,
    /// Follows iff the follows fraction reaches the threshold.
    Threshold(f64),
}

impl VoteRule {
    pub fn decide(self, follows: usize, parsed: usize) -> Label {
        let yes = match self {
            VoteRule::Majority => 2 * follows > parsed,
            VoteRule::Threshold(t) => parsed > 0 && follows as f64 / parsed as f64 >= t,
        };
        if yes {
            Label::Follows
        } else {
            Label::Violates
        }
    }
}

const NO_EXPLANATION: &str = "(no explanation given)";

/// Folds raw vote texts, in sample order, into a judgment.
pub fn aggregate_votes(
    texts: &[String],
    grammar: &LabelGrammar,
    rule: VoteRule,
    rng: &mut seed::Rng,
) -> Result<(Judgment, VoteSet), JudgeError> {
    let parsed: Vec<ParsedJudgment> = texts.iter().filter_map(|t| parse_judgment(t, grammar).ok()).collect();
    let votes = VoteSet {
        votes: parsed.iter().map(|p| p.label).collect(),
        n_requested: texts.len() as u32,
        discarded: (texts.len() - parsed.len()) as u32,
    };
    if !votes.is_quorate() {
        return Err(JudgeError::JudgeUnparseable { parsed: parsed.len(), requested: texts.len() });
    }
    let follows = votes.follows_count();
    let label = rule.decide(follows, votes.parsed());
    let score = follows as f64 / votes.parsed() as f64;
    let matching: Vec<&ParsedJudgment> = parsed.iter().filter(|p| p.label == label).collect();
    let explanation = matching
        .choose(rng)
        .map(|p| p.explanation.clone())
        .filter(|e| !e.trim().is_empty())
        .unwrap_or_else(|| NO_EXPLANATION.to_string());
    Ok((Judgment::new(label, explanation, score)?, votes))
}

/// Judge settings: template plus how votes are folded.
#[derive(Debug, Clone, PartialEq)]
pub struct Judge {
    pub template: JudgeTemplate,
    pub rule: VoteRule,
}

impl Default for Judge {
    fn default() -> Self {
        Self { template: JudgeTemplate::default(), rule: VoteRule::Majority }
    }
}

impl Judge {
    pub fn new(template: JudgeTemplate) -> Self {
        Self { template, rule: VoteRule::Majority }
    }

    pub fn with_rule(&self, rule: VoteRule) -> Self {
        Self { template: self.template.clone(), rule }
    }

    /// Samples `plan.n_votes` judgments and folds them. `seed` fixes both
    /// the vote sampling and the explanation pick.
    pub fn judge(
        &self,
        backend: &dyn Backend,
        instruction: &str,
        response: &str,
        plan: &SamplingPlan,
        seed: u64,
    ) -> Result<(Judgment, VoteSet), JudgeError> {
        let prompt = self.template.render_prompt(instruction, response)?;
        let request = GenerationRequest::new(vec![ChatMessage::user(prompt)], plan.n_votes, plan.judge)
            .with_seed(seed::derive(seed, "votes"))
            .with_task(Task::Judge { instruction: instruction.to_string(), response: response.to_string() });
        let texts = generate(backend, &request)?;
        let mut rng = seed::rng_for(seed, "pick");
        aggregate_votes(&texts, &self.template.grammar, self.rule, &mut rng)
    }
}

pub fn judge_with_voting(
    x: &Prompt,
    y: &Response,
    backend: &dyn Backend,
    plan: &SamplingPlan,
    judge: &Judge,
    seed: u64,
) -> Result<Judgment, JudgeError> {
    judge.judge(backend, &x.text, &y.text, plan, seed).map(|(j, _)| j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub prompt: Prompt,
    pub response: Response,
    pub judgment: Judgment,
}

/// One actor sample with its voted judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedResponse {
    pub response: Response,
    pub judgment: Judgment,
}

/// Everything learned about one prompt during negative collection.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptCollection {
    pub judged: Vec<JudgedResponse>,
    pub errors: BTreeMap<String, usize>,
}

impl PromptCollection {
    pub fn passed(&self) -> usize {
        self.judged.iter().filter(|j| j.judgment.label.follows()).count()
    }

    pub fn failed(&self) -> usize {
        self.judged.len() - self.passed()
    }

    pub fn negatives<'a>(&'a self, prompt: &'a Prompt) -> impl Iterator<Item = NegativeRecord> + 'a {
        self.judged.iter().filter(|j| !j.judgment.label.follows()).map(move |j| NegativeRecord {
            prompt: prompt.clone(),
            response: j.response.clone(),
            judgment: j.judgment.clone(),
        })
    }
}

/// Samples `plan.k` actor responses for `prompt` and judges each one.
/// Failures are counted per class and skip only the affected item.
pub fn collect_for_prompt(
    prompt: &Prompt,
    actor: &dyn Backend,
    refiner: &dyn Backend,
    plan: &SamplingPlan,
    judge: &Judge,
) -> PromptCollection {
    let mut out = PromptCollection::default();
    let request = GenerationRequest::new(vec![ChatMessage::user(prompt.text.clone())], plan.k, plan.actor)
        .with_seed(seed::derive(plan.seed, &format!("{}/actor", prompt.id)))
        .with_task(Task::Respond { instruction: prompt.text.clone() });
    let texts = match generate(actor, &request) {
        Ok(t) => t,
        Err(e) => {
            *out.errors.entry(JudgeError::from(e).class().to_string()).or_default() += 1;
            return out;
        }
    };
    for (i, text) in texts.into_iter().enumerate() {
        let response = Response::new(text, Producer::Actor, i as u32);
        let vote_seed = seed::derive(plan.seed, &format!("{}/judge/{i}", prompt.id));
        match judge.judge(refiner, &prompt.text, &response.text, plan, vote_seed) {
            Ok((judgment, _)) => out.judged.push(JudgedResponse { response, judgment }),
            Err(e) => *out.errors.entry(e.class().to_string()).or_default() += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Collection {
    pub negatives: Vec<NegativeRecord>,
    pub per_prompt: Vec<(String, PromptCollection)>,
}

impl Collection {
    pub fn judged(&self) -> usize {
        self.per_prompt.iter().map(|(_, c)| c.judged.len()).sum()
    }

    pub fn errors(&self) -> BTreeMap<String, usize> {
        let mut all = BTreeMap::new();
        for (_, c) in &self.per_prompt {
            for (k, v) in &c.errors {
                *all.entry(k.clone()).or_default() += v;
            }
        }
        all
    }
}

/// Negative collection over a prompt set; prompts run in parallel and the
/// result keeps input order.
pub fn collect_negatives(
    prompts: &[Prompt],
    actor: &dyn Backend,
    refiner: &dyn Backend,
    plan: &SamplingPlan,
    judge: &Judge,
) -> Collection {
    let per_prompt: Vec<(String, PromptCollection)> =
        prompts.par_iter().map(|p| (p.id.clone(), collect_for_prompt(p, actor, refiner, plan, judge))).collect();
    let negatives =
        prompts.iter().zip(&per_prompt).flat_map(|(p, (_, c))| c.negatives(p).collect::<Vec<_>>()).collect();
    Collection { negatives, per_prompt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Origin;

    fn g() -> LabelGrammar {
        LabelGrammar::default()
    }

    #[test]
    fn renders_single_user_message() {
        let x = Prompt::new("p", "a", Origin::Seed);
        let y = Response::new("b", Producer::Actor, 0);
        let msgs = render_judge_messages(&x, &y, &JudgeTemplate::with_text("I:{x} R:{y}")).unwrap();
        assert_eq!(msgs, vec![ChatMessage::user("I:a R:b")]);
    }

    #[test]
    fn missing_response_slot() {
        let x = Prompt::new("p", "a", Origin::Seed);
        let y = Response::new("b", Producer::Actor, 0);
        assert_eq!(
            render_judge_messages(&x, &y, &JudgeTemplate::with_text("I:{x}")),
            Err(JudgeError::MissingSlot("response".into()))
        );
    }

    #[test]
    fn braces_in_instruction_are_verbatim() {
        let x = Prompt::new("p", "use {y} literally", Origin::Seed);
        let y = Response::new("b", Producer::Actor, 0);
        let msgs = render_judge_messages(&x, &y, &JudgeTemplate::with_text("I:{x} R:{y}")).unwrap();
        assert_eq!(msgs[0].content, "I:use {y} literally R:b");
    }

    #[test]
    fn parses_trailing_marker() {
        let p = parse_judgment("The analysis.\nJudgment: follows", &g()).unwrap();
        assert_eq!(p, ParsedJudgment { label: Label::Follows, explanation: "The analysis.".into() });
    }

    #[test]
    fn final_marker_wins() {
        let p = parse_judgment("Judgment: does not follow\nsecond thoughts\nJudgment: follows", &g()).unwrap();
        assert_eq!(p.label, Label::Follows);
        assert_eq!(p.explanation, "Judgment: does not follow\nsecond thoughts");
    }

    #[test]
    fn marker_is_case_and_space_insensitive() {
        let p = parse_judgment("why\n  JUDGMENT:   Does   NOT follow.", &g()).unwrap();
        assert_eq!(p.label, Label::Violates);
    }

    #[test]
    fn no_marker() {
        assert_eq!(parse_judgment("no verdict anywhere", &g()), Err(JudgeError::NoLabelFound));
    }

    #[test]
    fn render_then_parse_recovers_judgment() {
        let t = JudgeTemplate::default();
        let j = Judgment::new(Label::Violates, "two lines\nof reasons", 0.4).unwrap();
        let p = parse_judgment(&t.render_judgment(&j), &t.grammar).unwrap();
        assert_eq!((p.label, p.explanation.as_str()), (j.label, j.explanation.as_str()));
    }

    fn vote_texts(labels: &[Label]) -> Vec<String> {
        labels.iter().enumerate().map(|(i, l)| format!("reason {i}\n{}", g().render(*l))).collect()
    }

    #[test]
    fn majority_counts() {
        use Label::*;
        let mut rng = seed::rng(1);
        let texts = vote_texts(&[Follows, Follows, Violates, Follows, Violates]);
        let (j, votes) = aggregate_votes(&texts, &g(), VoteRule::Majority, &mut rng).unwrap();
        assert_eq!(j.label, Follows);
        assert!((j.score - 0.6).abs() < 1e-12);
        assert_eq!(votes.follows_count(), 3);
        assert!(["reason 0", "reason 1", "reason 3"].contains(&j.explanation.as_str()));
    }

    #[test]
    fn unanimous_violation() {
        let mut rng = seed::rng(1);
        let texts = vote_texts(&[Label::Violates; 5]);
        let (j, _) = aggregate_votes(&texts, &g(), VoteRule::Majority, &mut rng).unwrap();
        assert_eq!((j.label, j.score), (Label::Violates, 0.0));
    }

    #[test]
    fn even_tie_is_violates() {
        let mut rng = seed::rng(1);
        let mut texts = vote_texts(&[Label::Follows, Label::Follows, Label::Violates, Label::Violates]);
        texts.push("garbage".into());
        let (j, votes) = aggregate_votes(&texts, &g(), VoteRule::Majority, &mut rng).unwrap();
        assert_eq!(j.label, Label::Violates);
        assert_eq!(votes.discarded, 1);
    }

    #[test]
    fn quorum_failure() {
        let mut rng = seed::rng(1);
        let mut texts = vote_texts(&[Label::Follows, Label::Follows]);
        texts.extend(["x".to_string(), "y".to_string(), "z".to_string()]);
        assert_eq!(
            aggregate_votes(&texts, &g(), VoteRule::Majority, &mut rng),
            Err(JudgeError::JudgeUnparseable { parsed: 2, requested: 5 })
        );
    }

    #[test]
    fn threshold_rule_rejects_four_of_five_at_one() {
        use Label::*;
        let mut rng = seed::rng(1);
        let texts = vote_texts(&[Follows, Follows, Follows, Follows, Violates]);
        let (j, _) = aggregate_votes(&texts, &g(), VoteRule::Threshold(1.0), &mut rng).unwrap();
        assert_eq!(j.label, Violates);
        assert!((j.score - 0.8).abs() < 1e-12);
        assert_eq!(j.explanation, "reason 4");
    }

    #[test]
    fn grammar_rejects_overlap() {
        let bad = LabelGrammar { violates: "follows not".into(), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(LabelGrammar::default().validate().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn majority_is_permutation_invariant(labels in proptest::collection::vec(proptest::bool::ANY, 1..12), shift in 0usize..12) {
            let labels: Vec<Label> = labels.into_iter().map(|b| if b { Label::Follows } else { Label::Violates }).collect();
            let mut rotated = labels.clone();
            let len = rotated.len();
            rotated.rotate_left(shift % len);
            let a = aggregate_votes(&vote_texts(&labels), &g(), VoteRule::Majority, &mut seed::rng(0)).unwrap().0;
            let b = aggregate_votes(&vote_texts(&rotated), &g(), VoteRule::Majority, &mut seed::rng(0)).unwrap().0;
            proptest::prop_assert_eq!(a.label, b.label);
            proptest::prop_assert_eq!(a.score, b.score);
            let m = labels.len();
            let k = labels.iter().filter(|l| l.follows()).count();
            proptest::prop_assert_eq!(a.label.follows(), 2 * k > m);
        }
    }
}
