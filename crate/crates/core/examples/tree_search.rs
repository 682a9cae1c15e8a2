//! Breadth-first and depth-first refinement of the same negative response,
//! followed by extraction of the DPO pair and refiner training tuples.

use std::sync::Arc;

use anyhow::Result;

use treepref::gateway::{Behavior, ScriptedModel, SuccessProfile, TaskKind};
use treepref::judgment::{Judge, LabelGrammar, NegativeRecord};
use treepref::search::{extract_training_records, run_search, SearchContext, SearchKind};
use treepref::synthetic::{respond_text, SyntheticSpec, SyntheticWorld};
use treepref::{seed, Judgment, Label, Origin, Producer, Prompt, RefinementTree, Response, SamplingPlan, SearchBudget};

fn print_tree(tree: &RefinementTree) {
    for node in tree.nodes() {
        let indent = "  ".repeat(node.depth as usize);
        let mark = if tree.refined_node().map(|r| r.node_id) == Some(node.node_id) { " <- refined" } else { "" };
        let text: String = node.response.text.chars().take(40).collect();
        println!(
            "{indent}#{} {:?} score {:.1} {:?}{mark}",
            node.node_id, node.judgment.label, node.judgment.score, text
        );
    }
}

fn main() -> Result<()> {
    let spec = SyntheticSpec::CharSeq { letter: 'a', count: 12 };
    let negative = NegativeRecord {
        prompt: Prompt::new("demo", spec.instruction(), Origin::Synthetic),
        response: Response::new(respond_text(&spec, false, &mut seed::rng(3)), Producer::Actor, 0),
        judgment: Judgment::single(Label::Violates, "The count of a's is wrong.")?,
    };

    // Each refinement succeeds with probability 0.3; the judge is right 90% of the time per vote.
    let refiner = ScriptedModel::new(5)
        .with_world(Arc::new(SyntheticWorld))
        .on(TaskKind::Refine, Behavior::Refiner(SuccessProfile::Bernoulli(0.3)))
        .on(TaskKind::Judge, Behavior::Judge { accuracy: 0.9, unparseable: 0.0, grammar: LabelGrammar::default() });
    let judge = Judge::default();
    let plan = SamplingPlan::default();
    let ctx = SearchContext { refiner: &refiner, judge: &judge, plan: &plan };
    let budget = SearchBudget { depth_limit: 3, branch_limit: 3, expansion_budget: 12, vote_threshold: 0.8 };

    for kind in [SearchKind::Bfs, SearchKind::Dfs] {
        let outcome = run_search(kind, &negative, &budget, &ctx, 42)?;
        println!("== {kind:?}: {} expansions, nodes per depth {:?}", outcome.expansions, outcome.depth_counts);
        print_tree(&outcome.tree);
        let records = extract_training_records(&outcome);
        match &records.dpo_pair {
            Some(pair) => println!("dpo pair: chosen {:?} over rejected {:?}", pair.chosen.text, pair.rejected.text),
            None => println!("no refinement found within budget"),
        }
        for t in &records.refiner_tuples {
            println!("refiner tuple: node #{} repaired {:?}", t.node_id, t.parent.text);
        }
        println!("{} judgment records\n", records.judgment_records.len());
    }
    Ok(())
}
