//! Tree-search refinement of negative responses.
//!
//! A tree starts at a response the refiner judged as violating. Each
//! expansion asks the refiner, in a second turn after its own judgment, for
//! a revised response, which is then judged with voting. Breadth-first
//! search expands whole levels and stops after the first level containing
//! a `follows` node; depth-first search follows one refinement chain at a
//! time and accepts a node once its vote score reaches the threshold.
//! Both stop when the expansion budget is spent.

mod bfs;
mod dfs;
mod extract;
mod infer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{generate, Backend, GatewayError, GenerationRequest, Task};
use crate::judgment::{Judge, JudgeError, NegativeRecord, VoteRule};
use crate::model::{Judgment, Label, ModelError, Producer, RefinementTree, Response, SamplingPlan};
use crate::seed;

pub use bfs::bfs_refine;
pub use dfs::dfs_refine;
pub use extract::{extract_training_records, DpoPair, JudgmentRecord, RefinerTuple, TrainingRecords};
pub use infer::{infer_refine, InferenceResult, RefineStrategy, StrategyKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("refine prompt: {0}")]
    Template(JudgeError),
    #[error("strategy budget must be >= 1")]
    EmptyBudget,
}

impl SearchError {
    pub fn class(&self) -> &'static str {
        match self {
            SearchError::Gateway(GatewayError::UnscriptedTask(_)) => "unscripted_task",
            SearchError::Gateway(GatewayError::MalformedResponse(_)) => "malformed_response",
            SearchError::Gateway(_) => "transport",
            SearchError::Model(_) => "model",
            SearchError::Template(_) => "template",
            SearchError::EmptyBudget => "config",
        }
    }
}

/// Which search produced a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    #[default]
    Bfs,
    Dfs,
}

/// The refiner backend plus judging and sampling settings.
#[derive(Clone, Copy)]
pub struct SearchContext<'a> {
    pub refiner: &'a dyn Backend,
    pub judge: &'a Judge,
    pub plan: &'a SamplingPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub tree: RefinementTree,
    pub refined_node: Option<usize>,
    pub expansions: usize,
    /// Node counts per depth, root at index 0.
    pub depth_counts: Vec<usize>,
    /// Children whose judging failed and were recorded as violating.
    pub judge_failures: usize,
}

impl SearchOutcome {
    fn finish(tree: RefinementTree, judge_failures: usize) -> Self {
        Self {
            refined_node: tree.refined_node().map(|n| n.node_id),
            expansions: tree.expansions_used(),
            depth_counts: tree.depth_counts(),
            tree,
            judge_failures,
        }
    }
}

pub fn new_search_tree(root: &NegativeRecord) -> Result<RefinementTree, SearchError> {
    Ok(RefinementTree::new(root.prompt.clone(), root.response.clone(), root.judgment.clone())?)
}

pub fn run_search(
    kind: SearchKind,
    root: &NegativeRecord,
    params: &crate::model::SearchBudget,
    ctx: &SearchContext<'_>,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    match kind {
        SearchKind::Bfs => bfs_refine(root, params, ctx, seed),
        SearchKind::Dfs => dfs_refine(root, params, ctx, seed),
    }
}

impl SearchContext<'_> {
    /// `n` refinements of `response` given its judgment.
    fn refine(
        &self,
        instruction: &str,
        response: &str,
        judgment: &Judgment,
        n: u32,
        seed: u64,
    ) -> Result<Vec<Response>, SearchError> {
        let messages =
            self.judge.template.refine_messages(instruction, response, judgment).map_err(SearchError::Template)?;
        let request = GenerationRequest::new(messages, n, self.plan.refine)
            .with_seed(seed)
            .with_task(Task::Refine { instruction: instruction.to_string(), response: response.to_string() });
        let texts = generate(self.refiner, &request)?;
        Ok(texts.into_iter().enumerate().map(|(i, t)| Response::new(t, Producer::Refiner, i as u32)).collect())
    }

    /// Voted judgment of a refinement. Gateway and quorum failures become a
    /// violating judgment with score 0; the flag reports them.
    fn judge_child(&self, instruction: &str, response: &str, rule: VoteRule, seed: u64) -> (Judgment, bool) {
        let judge = self.judge.with_rule(rule);
        match judge.judge(self.refiner, instruction, response, self.plan, seed) {
            Ok((j, _)) => (j, false),
            Err(e) => {
                let j = Judgment::new(Label::Violates, format!("judgment unavailable: {e}"), 0.0)
                    .expect("fallback explanation is non-empty");
                (j, true)
            }
        }
    }
}

fn gen_seed(seed: u64, parent: usize) -> u64 {
    seed::derive(seed, &format!("gen/{parent}"))
}

fn judge_seed(seed: u64, node: usize) -> u64 {
    seed::derive(seed, &format!("judge/{node}"))
}
