//! Corpus splitting, canonical JSONL emission with manifests, round-trip
//! validation and class balancing.

use anyhow::Result;

use treepref::dataset::{
    actor_sft, balance_by, emit, manifest_path, split_corpus, validate_roundtrip, ActorSftRecord, Schema,
};
use treepref::synthetic::synthetic_prompts;
use treepref::Label;

fn main() -> Result<()> {
    let corpus = synthetic_prompts(4300, 9);
    let split = split_corpus(&corpus, &[("actor_sft", 800), ("refiner_sft", 500), ("self_play", 3000)], 9)?;
    for p in &split.partitions {
        println!("{:<12} {:>5} prompts, first {}", p.name, p.items.len(), p.items[0].0.id);
    }
    println!("{:<12} {:>5} prompts", "overflow", split.overflow.len());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("actor_sft.jsonl");
    let records: Vec<ActorSftRecord> = split
        .get("actor_sft")
        .unwrap_or_default()
        .iter()
        .map(|(prompt, spec)| {
            let answer = treepref::synthetic::respond_text(spec, true, &mut treepref::seed::rng_for(9, &prompt.id));
            actor_sft(prompt.id.clone(), &prompt.text, &answer)
        })
        .collect();
    let manifest = emit(&records, &path, None)?;
    println!("\nemitted {} records, {} {}", manifest.count, manifest.digest_algo, manifest.digest);
    println!("manifest at {}", manifest_path(&path).display());
    println!("first line: {}", std::fs::read_to_string(&path)?.lines().next().unwrap_or_default());

    let report = validate_roundtrip(&path, Schema::ActorSft)?;
    println!("round trip: {} records, byte equal {}", report.records, report.byte_equal);

    // 30 positives against 70 negatives balance down to 30 of each, in original order.
    let labels: Vec<(usize, Label)> =
        (0..100).map(|i| (i, if i % 10 < 3 { Label::Follows } else { Label::Violates })).collect();
    let (kept, balance) = balance_by(labels, |(_, l)| *l, 5);
    println!(
        "\nbalanced to {} positives and {} negatives; first kept ids {:?}",
        balance.positives,
        balance.negatives,
        kept.iter().take(6).map(|(i, _)| i).collect::<Vec<_>>()
    );
    Ok(())
}
