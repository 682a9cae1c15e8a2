use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bfs_refine, dfs_refine, SearchContext, SearchError};
use crate::judgment::{NegativeRecord, VoteRule};
use crate::model::{Judgment, Prompt, Response, SearchBudget};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Greedy,
    BestOfN,
    Iterative,
    Bfs,
    Dfs,
}

/// An inference-time refinement strategy. `budget` is the number of
/// refinement generations it may spend; greedy always spends one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineStrategy {
    pub kind: StrategyKind,
    pub budget: usize,
    pub depth_limit: u32,
    pub branch_limit: u32,
    pub vote_threshold: f64,
}

impl RefineStrategy {
    pub fn new(kind: StrategyKind, budget: usize) -> Self {
        let d = SearchBudget::default();
        Self {
            kind,
            budget,
            depth_limit: d.depth_limit,
            branch_limit: d.branch_limit,
            vote_threshold: d.vote_threshold,
        }
    }

    pub fn greedy() -> Self {
        Self::new(StrategyKind::Greedy, 1)
    }

    fn search_budget(&self) -> SearchBudget {
        SearchBudget {
            depth_limit: self.depth_limit,
            branch_limit: self.branch_limit,
            expansion_budget: self.budget,
            vote_threshold: self.vote_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub response: Response,
    pub judgment: Judgment,
    pub success: bool,
    pub generations: usize,
}

/// First `follows` candidate, else the highest score (earliest on ties).
fn pick_best(candidates: Vec<(Response, Judgment)>, generations: usize) -> Option<InferenceResult> {
    let mut best: Option<(Response, Judgment)> = None;
    for (r, j) in candidates {
        if j.label.follows() {
            return Some(InferenceResult { response: r, judgment: j, success: true, generations });
        }
        if best.as_ref().is_none_or(|(_, b)| j.score > b.score) {
            best = Some((r, j));
        }
    }
    best.map(|(response, judgment)| InferenceResult { response, judgment, success: false, generations })
}

/// Refines `y0` at inference time with the given strategy.
///
/// `y0` is judged first (not counted against the budget); an answer that
/// already follows is returned untouched.
pub fn infer_refine(
    x: &Prompt,
    y0: &Response,
    strategy: &RefineStrategy,
    ctx: &SearchContext<'_>,
    seed: u64,
) -> Result<InferenceResult, SearchError> {
    if strategy.budget == 0 {
        return Err(SearchError::EmptyBudget);
    }
    let (j0, _) = ctx.judge_child(&x.text, &y0.text, VoteRule::Majority, seed::derive(seed, "judge/input"));
    if j0.label.follows() {
        return Ok(InferenceResult { response: y0.clone(), judgment: j0, success: true, generations: 0 });
    }
    let judge_rule = VoteRule::Majority;
    match strategy.kind {
        StrategyKind::Greedy => {
            let mut greedy = *ctx;
            let mut plan = *ctx.plan;
            plan.refine.temperature = 0.0;
            greedy.plan = &plan;
            let mut out = greedy.refine(&x.text, &y0.text, &j0, 1, seed::derive(seed, "greedy"))?;
            let y = out.remove(0);
            let (j, _) = ctx.judge_child(&x.text, &y.text, judge_rule, seed::derive(seed, "judge/greedy"));
            Ok(pick_best(vec![(y, j)], 1).expect("one candidate"))
        }
        StrategyKind::BestOfN => {
            let n = strategy.budget as u32;
            let ys = ctx.refine(&x.text, &y0.text, &j0, n, seed::derive(seed, "best-of-n"))?;
            let judged: Vec<(Response, Judgment)> = ys
                .into_par_iter()
                .enumerate()
                .map(|(i, y)| {
                    let (j, _) =
                        ctx.judge_child(&x.text, &y.text, judge_rule, seed::derive(seed, &format!("judge/bon/{i}")));
                    (y, j)
                })
                .collect();
            Ok(pick_best(judged, strategy.budget).expect("budget >= 1"))
        }
        StrategyKind::Iterative => {
            let mut history = Vec::new();
            let (mut y, mut j) = (y0.clone(), j0);
            for step in 0..strategy.budget {
                let mut out = ctx.refine(&x.text, &y.text, &j, 1, seed::derive(seed, &format!("iter/{step}")))?;
                let next = out.remove(0);
                let (nj, _) =
                    ctx.judge_child(&x.text, &next.text, judge_rule, seed::derive(seed, &format!("judge/iter/{step}")));
                let done = nj.label.follows();
                history.push((next.clone(), nj.clone()));
                if done {
                    return Ok(InferenceResult { response: next, judgment: nj, success: true, generations: step + 1 });
                }
                (y, j) = (next, nj);
            }
            Ok(pick_best(history, strategy.budget).expect("budget >= 1"))
        }
        StrategyKind::Bfs | StrategyKind::Dfs => {
            let root = NegativeRecord { prompt: x.clone(), response: y0.clone(), judgment: j0 };
            let params = strategy.search_budget();
            let outcome = if strategy.kind == StrategyKind::Bfs {
                bfs_refine(&root, &params, ctx, seed)?
            } else {
                dfs_refine(&root, &params, ctx, seed)?
            };
            let generations = outcome.expansions;
            if let Some(node) = outcome.tree.refined_node() {
                return Ok(InferenceResult {
                    response: node.response.clone(),
                    judgment: node.judgment.clone(),
                    success: true,
                    generations,
                });
            }
            // Exhausted: fall back to the best-scoring refinement.
            let candidates =
                outcome.tree.nodes()[1..].iter().map(|n| (n.response.clone(), n.judgment.clone())).collect();
            Ok(pick_best(candidates, generations).expect("budget >= 1 creates a child"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::*;
    use crate::gateway::SuccessProfile;
    use crate::judgment::Judge;
    use crate::model::SamplingPlan;
    use crate::synthetic::verify;

    fn infer(profile: SuccessProfile, strategy: RefineStrategy, seed: u64) -> InferenceResult {
        let model = refiner(profile, 1.0, seed);
        let judge = Judge::default();
        let plan = SamplingPlan::default();
        let ctx = SearchContext { refiner: &model, judge: &judge, plan: &plan };
        let neg = negative(&a12(), seed);
        infer_refine(&neg.prompt, &neg.response, &strategy, &ctx, seed).unwrap()
    }

    #[test]
    fn greedy_spends_one_generation() {
        let out = infer(SuccessProfile::Always, RefineStrategy::greedy(), 1);
        assert!(out.success);
        assert_eq!(out.generations, 1);
        assert!(verify(&a12(), &out.response.text).passed());
    }

    #[test]
    fn iterative_follows_the_schedule() {
        let out = infer(SuccessProfile::only_on_attempt(3), RefineStrategy::new(StrategyKind::Iterative, 15), 2);
        assert!(out.success);
        assert_eq!(out.generations, 3);
    }

    #[test]
    fn exhausted_search_returns_best_failure() {
        let out = infer(SuccessProfile::Never, RefineStrategy::new(StrategyKind::Bfs, 4), 3);
        assert!(!out.success);
        assert_eq!(out.generations, 4);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let model = refiner(SuccessProfile::Always, 1.0, 0);
        let judge = Judge::default();
        let plan = SamplingPlan::default();
        let ctx = SearchContext { refiner: &model, judge: &judge, plan: &plan };
        let neg = negative(&a12(), 0);
        let s = RefineStrategy::new(StrategyKind::BestOfN, 0);
        assert_eq!(infer_refine(&neg.prompt, &neg.response, &s, &ctx, 0), Err(SearchError::EmptyBudget));
    }
}
