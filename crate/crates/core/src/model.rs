//! Domain types shared across the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("root judgment must label the response as violating")]
    RootNotNegative,
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("judgment explanation is empty")]
    EmptyExplanation,
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {0} is not labeled follows")]
    NotFollowing(usize),
    #[error("tree outcome already set")]
    OutcomeAlreadySet,
    #[error("invalid search budget: {0}")]
    InvalidBudget(String),
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Evolved,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub origin: Origin,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>, origin: Origin) -> Self {
        Self { id: id.into(), text: text.into(), origin }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    Actor,
    Refiner,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub producer: Producer,
    pub sample_index: u32,
}

impl Response {
    pub fn new(text: impl Into<String>, producer: Producer, sample_index: u32) -> Self {
        Self { text: text.into(), producer, sample_index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Follows,
    Violates,
}

impl Label {
    pub fn follows(self) -> bool {
        self == Label::Follows
    }
}

/// A (possibly voted) verdict on one response.
///
/// `score` is the fraction of parsed votes that said `follows`; a single
/// vote yields 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub label: Label,
    pub explanation: String,
    pub score: f64,
}

impl Judgment {
    pub fn new(label: Label, explanation: impl Into<String>, score: f64) -> Result<Self, ModelError> {
        let explanation = explanation.into();
        if explanation.trim().is_empty() {
            return Err(ModelError::EmptyExplanation);
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(ModelError::ScoreOutOfRange(score));
        }
        Ok(Self { label, explanation, score })
    }

    /// Single-vote judgment with score 0 or 1.
    pub fn single(label: Label, explanation: impl Into<String>) -> Result<Self, ModelError> {
        let score = if label.follows() { 1.0 } else { 0.0 };
        Self::new(label, explanation, score)
    }
}

/// The parsed votes behind one voted judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteSet {
    pub votes: Vec<Label>,
    pub n_requested: u32,
    pub discarded: u32,
}

impl VoteSet {
    pub fn follows_count(&self) -> usize {
        self.votes.iter().filter(|l| l.follows()).count()
    }

    pub fn parsed(&self) -> usize {
        self.votes.len()
    }

    /// Minimum parsed votes for a valid verdict: `ceil(n_requested / 2)`.
    pub fn quorum(&self) -> usize {
        (self.n_requested as usize).div_ceil(2)
    }

    pub fn is_quorate(&self) -> bool {
        self.parsed() >= self.quorum() && self.parsed() > 0
    }

    /// Follows fraction over parsed votes; `None` with no parsed votes.
    pub fn score(&self) -> Option<f64> {
        if self.votes.is_empty() {
            None
        } else {
            Some(self.follows_count() as f64 / self.parsed() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementNode {
    pub node_id: usize,
    pub parent_id: Option<usize>,
    pub response: Response,
    pub judgment: Judgment,
    pub depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "node_id")]
pub enum TreeOutcome {
    Refined(usize),
    Exhausted,
}

/// A search tree rooted at a negative response.
///
/// Nodes are stored in creation order, so `nodes[i].node_id == i` and every
/// parent precedes its children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTree {
    pub prompt: Prompt,
    nodes: Vec<RefinementNode>,
    outcome: Option<TreeOutcome>,
}

impl RefinementTree {
    pub fn new(prompt: Prompt, negative: Response, judgment: Judgment) -> Result<Self, ModelError> {
        if prompt.text.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if judgment.label.follows() {
            return Err(ModelError::RootNotNegative);
        }
        let root = RefinementNode { node_id: 0, parent_id: None, response: negative, judgment, depth: 0 };
        Ok(Self { prompt, nodes: vec![root], outcome: None })
    }

    pub fn root(&self) -> &RefinementNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[RefinementNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&RefinementNode> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Child nodes created so far; the root does not count.
    pub fn expansions_used(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn outcome(&self) -> Option<TreeOutcome> {
        self.outcome
    }

    pub fn refined_node(&self) -> Option<&RefinementNode> {
        match self.outcome {
            Some(TreeOutcome::Refined(id)) => self.nodes.get(id),
            _ => None,
        }
    }

    pub fn add_child(&mut self, parent_id: usize, response: Response, judgment: Judgment) -> Result<usize, ModelError> {
        let depth = self.nodes.get(parent_id).ok_or(ModelError::UnknownNode(parent_id))?.depth + 1;
        let node_id = self.nodes.len();
        self.nodes.push(RefinementNode { node_id, parent_id: Some(parent_id), response, judgment, depth });
        Ok(node_id)
    }

    pub fn mark_refined(&mut self, node_id: usize) -> Result<(), ModelError> {
        if self.outcome.is_some() {
            return Err(ModelError::OutcomeAlreadySet);
        }
        let node = self.nodes.get(node_id).ok_or(ModelError::UnknownNode(node_id))?;
        if !node.judgment.label.follows() {
            return Err(ModelError::NotFollowing(node_id));
        }
        self.outcome = Some(TreeOutcome::Refined(node_id));
        Ok(())
    }

    pub fn mark_exhausted(&mut self) -> Result<(), ModelError> {
        if self.outcome.is_some() {
            return Err(ModelError::OutcomeAlreadySet);
        }
        self.outcome = Some(TreeOutcome::Exhausted);
        Ok(())
    }

    /// Node counts per depth, index = depth.
    pub fn depth_counts(&self) -> Vec<usize> {
        let max = self.nodes.iter().map(|n| n.depth).max().unwrap_or(0) as usize;
        let mut counts = vec![0; max + 1];
        for n in &self.nodes {
            counts[n.depth as usize] += 1;
        }
        counts
    }
}

/// Limits for one refinement search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    pub depth_limit: u32,
    pub branch_limit: u32,
    /// Total child nodes (refinement generations) allowed per tree.
    pub expansion_budget: usize,
    /// Minimum follows fraction for depth-first acceptance.
    pub vote_threshold: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { depth_limit: 4, branch_limit: 3, expansion_budget: 15, vote_threshold: 0.6 }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth_limit < 1 {
            return Err(ModelError::InvalidBudget("depth_limit must be >= 1".into()));
        }
        if self.branch_limit < 1 {
            return Err(ModelError::InvalidBudget("branch_limit must be >= 1".into()));
        }
        if self.expansion_budget < 1 {
            return Err(ModelError::InvalidBudget("expansion_budget must be >= 1".into()));
        }
        if !(self.vote_threshold > 0.5 && self.vote_threshold <= 1.0) {
            return Err(ModelError::InvalidBudget(format!(
                "vote_threshold {} must lie in (0.5, 1]",
                self.vote_threshold
            )));
        }
        Ok(())
    }
}

/// Decoding parameters for one model role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl GenerationParams {
    pub const fn new(temperature: f64, top_p: f64, max_tokens: u32) -> Self {
        Self { temperature, top_p, max_tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    /// Actor responses sampled per prompt.
    pub k: u32,
    /// Judgments sampled per response.
    pub n_votes: u32,
    pub actor: GenerationParams,
    pub judge: GenerationParams,
    pub refine: GenerationParams,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            k: 4,
            n_votes: 5,
            actor: GenerationParams::new(0.8, 0.95, 1024),
            judge: GenerationParams::new(0.7, 0.95, 1024),
            refine: GenerationParams::new(0.7, 0.95, 1024),
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 1 {
            return Err(ModelError::InvalidPlan("k must be >= 1".into()));
        }
        if self.n_votes < 1 {
            return Err(ModelError::InvalidPlan("n_votes must be >= 1".into()));
        }
        for (name, p) in [("actor", self.actor), ("judge", self.judge), ("refine", self.refine)] {
            if p.temperature < 0.0 {
                return Err(ModelError::InvalidPlan(format!("{name} temperature is negative")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn violating() -> Judgment {
        Judgment::single(Label::Violates, "only three letters").unwrap()
    }

    #[test]
    fn new_tree_has_single_root() {
        let tree = RefinementTree::new(
            Prompt::new("p0", "write 12 a's", Origin::Synthetic),
            Response::new("aaa", Producer::Actor, 0),
            violating(),
        )
        .unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.root().depth, 0);
        assert_eq!(tree.root().parent_id, None);
        assert_eq!(tree.expansions_used(), 0);
        assert_eq!(tree.outcome(), None);
    }

    #[test]
    fn new_tree_rejects_positive_root() {
        let err = RefinementTree::new(
            Prompt::new("p0", "...", Origin::Synthetic),
            Response::new("...", Producer::Actor, 0),
            Judgment::single(Label::Follows, "fine").unwrap(),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::RootNotNegative);
    }

    #[test]
    fn new_tree_rejects_empty_prompt() {
        let err = RefinementTree::new(
            Prompt::new("p0", "", Origin::Synthetic),
            Response::new("aaa", Producer::Actor, 0),
            violating(),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::EmptyPrompt);
    }

    #[test]
    fn refined_outcome_requires_follows_node() {
        let mut tree = RefinementTree::new(
            Prompt::new("p0", "x", Origin::Synthetic),
            Response::new("y", Producer::Actor, 0),
            violating(),
        )
        .unwrap();
        let bad = tree.add_child(0, Response::new("y1", Producer::Refiner, 0), violating()).unwrap();
        assert_eq!(tree.mark_refined(bad), Err(ModelError::NotFollowing(bad)));
        let good = tree
            .add_child(bad, Response::new("y2", Producer::Refiner, 0), Judgment::single(Label::Follows, "ok").unwrap())
            .unwrap();
        tree.mark_refined(good).unwrap();
        assert_eq!(tree.refined_node().unwrap().depth, 2);
        assert_eq!(tree.mark_exhausted(), Err(ModelError::OutcomeAlreadySet));
    }

    #[test]
    fn budget_validation() {
        assert!(SearchBudget::default().validate().is_ok());
        let b = SearchBudget { vote_threshold: 0.5, ..Default::default() };
        assert!(b.validate().is_err());
        let b = SearchBudget { depth_limit: 0, ..Default::default() };
        assert!(b.validate().is_err());
    }

    #[test]
    fn vote_set_quorum() {
        let v = VoteSet { votes: vec![Label::Follows, Label::Violates], n_requested: 5, discarded: 3 };
        assert_eq!(v.quorum(), 3);
        assert!(!v.is_quorate());
        assert_eq!(v.score(), Some(0.5));
    }

    proptest! {
        #[test]
        fn tree_ids_and_expansions_stay_consistent(parents in proptest::collection::vec(any::<prop::sample::Index>(), 0..40)) {
            let mut tree = RefinementTree::new(
                Prompt::new("p", "x", Origin::Synthetic),
                Response::new("y", Producer::Actor, 0),
                violating(),
            ).unwrap();
            for (i, p) in parents.iter().enumerate() {
                let parent = p.index(tree.len());
                tree.add_child(parent, Response::new(format!("r{i}"), Producer::Refiner, 0), violating()).unwrap();
            }
            prop_assert_eq!(tree.expansions_used(), tree.len() - 1);
            for (i, n) in tree.nodes().iter().enumerate() {
                prop_assert_eq!(n.node_id, i);
                if let Some(p) = n.parent_id {
                    prop_assert!(p < n.node_id);
                    prop_assert_eq!(tree.node(p).unwrap().depth + 1, n.depth);
                }
            }
            let json = serde_json::to_string(&tree).unwrap();
            let back: RefinementTree = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, tree);
        }
    }
}
