use rayon::prelude::*;

use super::{gen_seed, judge_seed, new_search_tree, SearchContext, SearchError, SearchOutcome};
use crate::judgment::{NegativeRecord, VoteRule};
use crate::model::{Response, SearchBudget};

/// Level-by-level refinement.
///
/// Each level refines every frontier node up to `branch_limit` times (fewer
/// once the budget runs short), judges the whole level, and stops if any
/// child is labeled `follows`; the first such child in creation order
/// becomes the refined node.
pub fn bfs_refine(
    root: &NegativeRecord,
    params: &SearchBudget,
    ctx: &SearchContext<'_>,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    params.validate()?;
    let mut tree = new_search_tree(root)?;
    let instruction = root.prompt.text.clone();
    let mut frontier = vec![0usize];
    let mut failures = 0;

    for _depth in 1..=params.depth_limit {
        let mut batch: Vec<(usize, Response)> = Vec::new();
        for &parent in &frontier {
            let remaining = params.expansion_budget - tree.expansions_used() - batch.len();
            if remaining == 0 {
                break;
            }
            let n = (params.branch_limit as usize).min(remaining) as u32;
            let node = tree.node(parent).expect("frontier nodes exist");
            let children = ctx.refine(&instruction, &node.response.text, &node.judgment, n, gen_seed(seed, parent))?;
            batch.extend(children.into_iter().map(|c| (parent, c)));
        }
        if batch.is_empty() {
            break;
        }

        let first_id = tree.len();
        let judged: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (_, child))| {
                ctx.judge_child(&instruction, &child.text, VoteRule::Majority, judge_seed(seed, first_id + i))
            })
            .collect();

        let mut next = Vec::with_capacity(batch.len());
        let mut found = None;
        for ((parent, child), (judgment, failed)) in batch.into_iter().zip(judged) {
            failures += failed as usize;
            let follows = judgment.label.follows();
            let id = tree.add_child(parent, child, judgment)?;
            if follows && found.is_none() {
                found = Some(id);
            }
            next.push(id);
        }
        if let Some(id) = found {
            tree.mark_refined(id)?;
            return Ok(SearchOutcome::finish(tree, failures));
        }
        frontier = next;
    }
    tree.mark_exhausted()?;
    Ok(SearchOutcome::finish(tree, failures))
}
