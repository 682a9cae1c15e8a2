//! Inference-time refinement: greedy, best-of-N, iterative, BFS and DFS
//! under the same generation budget, against a scripted refiner whose
//! attempts succeed independently with probability 0.4.

use std::sync::Arc;

use anyhow::Result;

use treepref::gateway::{Behavior, ScriptedModel, SuccessProfile, TaskKind};
use treepref::judgment::{Judge, LabelGrammar};
use treepref::search::{infer_refine, RefineStrategy, SearchContext, StrategyKind};
use treepref::synthetic::{random_spec, respond_text, SyntheticWorld};
use treepref::{seed, Producer, Response, SamplingPlan};
use treepref::{Origin, Prompt};

fn main() -> Result<()> {
    let judge = Judge::default();
    let plan = SamplingPlan::default();
    let trials = 1000;
    let budget = 15;
    println!("{:<10} {:>8} {:>16}", "strategy", "success", "mean generations");
    for kind in
        [StrategyKind::Greedy, StrategyKind::BestOfN, StrategyKind::Iterative, StrategyKind::Bfs, StrategyKind::Dfs]
    {
        let mut wins = 0;
        let mut generations = 0;
        for i in 0..trials {
            let model = ScriptedModel::new(i)
                .with_world(Arc::new(SyntheticWorld))
                .on(TaskKind::Refine, Behavior::Refiner(SuccessProfile::Bernoulli(0.4)))
                .on(
                    TaskKind::Judge,
                    Behavior::Judge { accuracy: 1.0, unparseable: 0.0, grammar: LabelGrammar::default() },
                );
            let ctx = SearchContext { refiner: &model, judge: &judge, plan: &plan };
            let mut rng = seed::rng_for(i, "decoding");
            let spec = random_spec(&mut rng);
            let x = Prompt::new(format!("q{i}"), spec.instruction(), Origin::Synthetic);
            let y0 = Response::new(respond_text(&spec, false, &mut rng), Producer::Actor, 0);
            let strategy =
                if kind == StrategyKind::Greedy { RefineStrategy::greedy() } else { RefineStrategy::new(kind, budget) };
            let out = infer_refine(&x, &y0, &strategy, &ctx, i)?;
            wins += out.success as usize;
            generations += out.generations;
        }
        println!(
            "{:<10} {:>8.3} {:>16.2}",
            format!("{kind:?}"),
            wins as f64 / trials as f64,
            generations as f64 / trials as f64
        );
    }
    println!("\nindependent attempts, 15 tries: {:.5}", 1.0 - 0.6f64.powi(15));
    Ok(())
}
