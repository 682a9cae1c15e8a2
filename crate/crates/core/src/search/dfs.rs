use super::{judge_seed, new_search_tree, SearchContext, SearchError, SearchOutcome};
use crate::judgment::{NegativeRecord, VoteRule};
use crate::model::{RefinementTree, SearchBudget};
use crate::seed;

/// Depth-first refinement.
///
/// Children are generated one at a time in branch order. A child whose
/// follows fraction reaches `vote_threshold` ends the search; otherwise the
/// search descends into it while depth and budget allow, then moves on to
/// the next sibling. Leaves at the depth limit are dead ends.
pub fn dfs_refine(
    root: &NegativeRecord,
    params: &SearchBudget,
    ctx: &SearchContext<'_>,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    params.validate()?;
    let mut state = Dfs { tree: new_search_tree(root)?, params, ctx, seed, failures: 0 };
    match state.visit(0)? {
        Some(id) => state.tree.mark_refined(id)?,
        None => state.tree.mark_exhausted()?,
    }
    Ok(SearchOutcome::finish(state.tree, state.failures))
}

struct Dfs<'a, 'c> {
    tree: RefinementTree,
    params: &'a SearchBudget,
    ctx: &'a SearchContext<'c>,
    seed: u64,
    failures: usize,
}

impl Dfs<'_, '_> {
    fn visit(&mut self, node_id: usize) -> Result<Option<usize>, SearchError> {
        if self.tree.node(node_id).expect("visited nodes exist").depth >= self.params.depth_limit {
            return Ok(None);
        }
        let instruction = self.tree.prompt.text.clone();
        for branch in 0..self.params.branch_limit {
            if self.tree.expansions_used() >= self.params.expansion_budget {
                return Ok(None);
            }
            let node = self.tree.node(node_id).expect("visited nodes exist");
            let gen = seed::derive(self.seed, &format!("gen/{node_id}/{branch}"));
            let mut children = self.ctx.refine(&instruction, &node.response.text, &node.judgment, 1, gen)?;
            let child = children.remove(0);
            let child_id = self.tree.len();
            let rule = VoteRule::Threshold(self.params.vote_threshold);
            let (judgment, failed) =
                self.ctx.judge_child(&instruction, &child.text, rule, judge_seed(self.seed, child_id));
            self.failures += failed as usize;
            let accepted = judgment.score >= self.params.vote_threshold && judgment.label.follows();
            let child_id = self.tree.add_child(node_id, child, judgment)?;
            if accepted {
                return Ok(Some(child_id));
            }
            if let Some(found) = self.visit(child_id)? {
                return Ok(Some(found));
            }
        }
        Ok(None)
    }
}
