//! Seed filtering and constraint-driven prompt evolution with a scripted
//! evolver and validator.

use anyhow::Result;

use treepref::gateway::{Behavior, ScriptedModel, TaskKind};
use treepref::taxonomy::{evolve_all, filter_seeds, ConstraintTaxonomy, EvolutionSettings, SeedFilterRules, Validity};
use treepref::{Origin, Prompt};

const CANDIDATES: &[&str] = &[
    "Write a poem about the sea.",
    "Write a poem about the sea!",
    "Explain how a hash map handles collisions.",
    "ok",
    "Summarize the plot of a heist film you invent.",
    "Fetch https://example.com and describe it.",
    "Describe your ideal weekend in the mountains.",
    "Give advice to a student starting to learn the cello.",
];

fn main() -> Result<()> {
    let candidates = CANDIDATES.iter().enumerate().map(|(i, t)| Prompt::new(format!("seed-{i}"), *t, Origin::Seed));
    let rules = SeedFilterRules { flag_keywords: vec!["poem".into()], ..Default::default() };
    let seeds: Vec<_> = filter_seeds(candidates, rules)?.collect();
    println!("admitted {} of {} candidates", seeds.len(), CANDIDATES.len());
    for s in &seeds {
        println!("  {} ({} chars, flagged {:?}): {}", s.prompt.id, s.length_chars, s.flagged_keywords, s.prompt.text);
    }

    let taxonomy = ConstraintTaxonomy::bundled();
    println!("\ntaxonomy: {} constraints in {} categories", taxonomy.len(), taxonomy.categories().len());

    let model = ScriptedModel::new(2)
        .on(TaskKind::Evolve, Behavior::Evolver)
        .on(TaskKind::Validate, Behavior::Validator { valid_prob: 0.8 });
    let settings = EvolutionSettings { n_extra: 2, seed: 21, ..Default::default() };
    let report = evolve_all(&seeds, &taxonomy, &model, &settings)?;

    for e in &report.evolved {
        let names: Vec<&str> = e.constraints().map(|c| c.name.as_str()).collect();
        let tag = if e.validity == Validity::Valid { "kept" } else { "dropped" };
        println!("\n[{tag}] {} with {names:?}\n  {}", e.seed.prompt.id, e.text);
    }
    println!(
        "\n{} valid prompts, {} dropped as invalid, errors {:?}",
        report.prompts().len(),
        report.dropped_invalid,
        report.errors
    );
    Ok(())
}
