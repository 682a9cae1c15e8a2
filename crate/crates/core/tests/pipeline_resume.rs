use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use treepref::dataset::{validate_roundtrip, Schema};
use treepref::pipeline::{run_iteration, BackendConfig, PipelineConfig, ScriptedConfig};
use treepref::synthetic::synthetic_prompts;
use treepref::Prompt;

fn config(dir: &Path, concurrency: usize) -> PipelineConfig {
    let scripted = ScriptedConfig { actor_pass_prob: 0.5, refine_success_prob: 0.4, ..Default::default() };
    PipelineConfig {
        output_dir: dir.to_path_buf(),
        seed: 23,
        concurrency,
        actor: BackendConfig::Scripted(scripted),
        refiner: BackendConfig::Scripted(scripted),
        ..Default::default()
    }
}

fn prompts(n: usize) -> Vec<Prompt> {
    synthetic_prompts(n, 23).into_iter().map(|(p, _)| p).collect()
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("journal"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
        .collect()
}

#[test]
fn outputs_do_not_depend_on_concurrency() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    let many = tmp.path().join("many");
    let xs = prompts(40);
    run_iteration(&config(&one, 1), &xs).unwrap();
    run_iteration(&config(&many, 8), &xs).unwrap();
    assert_eq!(outputs(&one), outputs(&many));
}

#[test]
fn resumes_from_a_torn_journal() {
    let tmp = tempfile::tempdir().unwrap();
    let fresh = tmp.path().join("fresh");
    let resumed = tmp.path().join("resumed");
    let xs = prompts(30);

    run_iteration(&config(&fresh, 4), &xs).unwrap();

    // Simulate a crash: a journal covering the first 12 prompts, with the
    // last entry cut off mid-line.
    let first = run_iteration(&config(&resumed, 4), &xs[..12]).unwrap();
    assert_eq!(first.stats.resumed_prompts, 0);
    let journal = resumed.join("journal.t1.jsonl");
    let text = fs::read_to_string(&journal).unwrap();
    let cut = text.trim_end().rfind('\n').unwrap() + 40;
    fs::write(&journal, &text[..cut]).unwrap();
    OpenOptions::new().append(true).open(&journal).unwrap().write_all(b"{\"not\": \"an entry\"}\n").unwrap();

    let second = run_iteration(&config(&resumed, 4), &xs).unwrap();
    assert_eq!(second.stats.resumed_prompts, 11);
    // Stats record how many prompts were resumed; every dataset must match.
    let (a, b) = (outputs(&fresh), outputs(&resumed));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let differing: Vec<&String> = a.keys().filter(|k| !k.starts_with("stats") && a[*k] != b[*k]).collect();
    assert!(differing.is_empty(), "{differing:?}");
}

#[test]
fn changed_config_invalidates_journal() {
    let tmp = tempfile::tempdir().unwrap();
    let xs = prompts(10);
    run_iteration(&config(tmp.path(), 2), &xs).unwrap();
    let mut other = config(tmp.path(), 2);
    other.search.expansion_budget = 5;
    let out = run_iteration(&other, &xs).unwrap();
    assert_eq!(out.stats.resumed_prompts, 0);

    let again = run_iteration(&other, &xs).unwrap();
    assert_eq!(again.stats.resumed_prompts, 10);
}

#[test]
fn every_output_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_iteration(&config(tmp.path(), 4), &prompts(25)).unwrap();
    let schemas = [
        ("dpo", Schema::Dpo),
        ("judgments", Schema::JudgeSft),
        ("rft_judge", Schema::JudgeSft),
        ("rft_refine", Schema::RefineSft),
        ("trees", Schema::Trees),
        ("negatives", Schema::Negatives),
        ("stats", Schema::Stats),
    ];
    for (stem, schema) in schemas {
        let path = tmp.path().join(format!("{stem}.t1.{}", if stem == "stats" { "json" } else { "jsonl" }));
        let report = validate_roundtrip(&path, schema).unwrap();
        assert!(report.byte_equal, "{stem}: {:?}", report.first_divergence());
        assert!(out.files.contains(&path), "{stem} missing from outputs");
    }
}
