//! Self-consistency voting: a scripted judge that is right 70% of the time
//! per vote, aggregated over more and more votes.

use std::sync::Arc;

use anyhow::Result;
use rand::Rng as _;

use treepref::gateway::{Behavior, ScriptedModel, TaskKind};
use treepref::judgment::{Judge, LabelGrammar};
use treepref::synthetic::{random_spec, respond_text, verify, SyntheticWorld};
use treepref::{seed, SamplingPlan};

fn main() -> Result<()> {
    let judge_model = ScriptedModel::new(7)
        .with_world(Arc::new(SyntheticWorld))
        .on(TaskKind::Judge, Behavior::Judge { accuracy: 0.7, unparseable: 0.05, grammar: LabelGrammar::default() });
    let judge = Judge::default();

    let mut rng = seed::rng(1);
    let spec = random_spec(&mut rng);
    let response = respond_text(&spec, false, &mut rng);
    let plan = SamplingPlan { n_votes: 5, ..Default::default() };
    let (judgment, votes) = judge.judge(&judge_model, &spec.instruction(), &response, &plan, 99)?;
    println!("instruction: {}", spec.instruction());
    println!("response:    {}", response);
    println!("truth:       {:?}", verify(&spec, &response));
    println!("votes:       {:?} ({} discarded)", votes.votes, votes.discarded);
    println!("verdict:     {:?} with score {:.2}: {}\n", judgment.label, judgment.score, judgment.explanation);

    println!("{:>6}  {:>9}", "votes", "accuracy");
    for n_votes in [1, 3, 5, 9, 15] {
        let plan = SamplingPlan { n_votes, ..Default::default() };
        let trials = 2000;
        let mut correct = 0;
        for i in 0..trials {
            let mut rng = seed::rng_for(i, "voting");
            let spec = random_spec(&mut rng);
            let pass = rng.random_bool(0.5);
            let text = respond_text(&spec, pass, &mut rng);
            if let Ok((j, _)) = judge.judge(&judge_model, &spec.instruction(), &text, &plan, i) {
                correct += (j.label.follows() == pass) as usize;
            }
        }
        println!("{n_votes:>6}  {:>9.3}", correct as f64 / trials as f64);
    }
    Ok(())
}
