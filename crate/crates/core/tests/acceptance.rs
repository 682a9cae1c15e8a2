//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rayon::prelude::*;

use treepref::dataset::{self, read_jsonl, split_corpus, validate_roundtrip, JudgeSftRecord, Schema, TreeNodeRow};
use treepref::gateway::{Behavior, ScriptedModel, SuccessProfile, TaskKind};
use treepref::judgment::{Judge, LabelGrammar, NegativeRecord};
use treepref::losses::{dpo_gradient, dpo_loss, sft_loss, DpoItem, TokenLogProbs};
use treepref::search::{
    extract_training_records, infer_refine, run_search, RefineStrategy, SearchContext, SearchKind, SearchOutcome,
    StrategyKind,
};
use treepref::synthetic::{
    build_pair, pair_similarity, random_spec, random_start_end, respond_text, PairKind, SyntheticSpec, SyntheticWorld,
};
use treepref::{seed, Judgment, Label, Origin, Producer, Prompt, RefinementTree, Response, SamplingPlan, SearchBudget};

fn refiner(success: SuccessProfile, accuracy: f64, unparseable: f64, model_seed: u64) -> ScriptedModel {
    ScriptedModel::new(model_seed)
        .with_world(Arc::new(SyntheticWorld))
        .on(TaskKind::Refine, Behavior::Refiner(success))
        .on(TaskKind::Judge, Behavior::Judge { accuracy, unparseable, grammar: LabelGrammar::default() })
}

fn negative(spec: &SyntheticSpec, id: u64) -> NegativeRecord {
    let text = respond_text(spec, false, &mut seed::rng_for(id, "negative"));
    NegativeRecord {
        prompt: Prompt::new(format!("t{id}"), spec.instruction(), Origin::Synthetic),
        response: Response::new(text, Producer::Actor, 0),
        judgment: Judgment::single(Label::Violates, "the constraint is not met").unwrap(),
    }
}

fn search(
    kind: SearchKind,
    model: &ScriptedModel,
    root: &NegativeRecord,
    budget: &SearchBudget,
    s: u64,
) -> SearchOutcome {
    let judge = Judge::default();
    let plan = SamplingPlan::default();
    let ctx = SearchContext { refiner: model, judge: &judge, plan: &plan };
    run_search(kind, root, budget, &ctx, s).unwrap()
}

fn binomial_tail(n: u64, k_min: u64, p: f64) -> f64 {
    let choose = |n: u64, k: u64| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (k_min..=n).map(|k| choose(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)).sum()
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn budget_safety() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    for kind in [SearchKind::Bfs, SearchKind::Dfs] {
        let violations: usize = (0..1000u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::rng_for(i, "c1");
                let budget = SearchBudget {
                    depth_limit: rng.random_range(1..=5),
                    branch_limit: rng.random_range(1..=4),
                    expansion_budget: rng.random_range(1..=20),
                    vote_threshold: [0.6, 0.8, 1.0][rng.random_range(0..3)],
                };
                let p = rng.random_range(0.0..0.6);
                let model = refiner(SuccessProfile::Bernoulli(p), 0.9, 0.05, i);
                let spec = random_spec(&mut rng);
                let out = search(kind, &model, &negative(&spec, i), &budget, i);
                (out.expansions > budget.expansion_budget) as usize
            })
            .sum();
        worst.push(violations);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst == [0, 0] && secs < 10.0,
        format!("over-budget trees bfs={} dfs={} of 1000 each, {secs:.2}s", worst[0], worst[1]),
    )
}

fn tree_search_superiority() -> Outcome {
    let trials = 10_000u64;
    let rate = |kind: StrategyKind, budget: usize| -> f64 {
        let wins: usize = (0..trials)
            .into_par_iter()
            .map(|i| {
                let model = refiner(SuccessProfile::Bernoulli(0.4), 1.0, 0.0, i);
                let spec = random_spec(&mut seed::rng_for(i, "c2"));
                let root = negative(&spec, i);
                let judge = Judge::default();
                let plan = SamplingPlan::default();
                let ctx = SearchContext { refiner: &model, judge: &judge, plan: &plan };
                let out =
                    infer_refine(&root.prompt, &root.response, &RefineStrategy::new(kind, budget), &ctx, i).unwrap();
                out.success as usize
            })
            .sum();
        wins as f64 / trials as f64
    };
    let analytic = 1.0 - 0.6f64.powi(15);
    let greedy = rate(StrategyKind::Greedy, 1);
    let best = rate(StrategyKind::BestOfN, 15);
    let bfs = rate(StrategyKind::Bfs, 15);
    let ok = (greedy - 0.40).abs() <= 0.02
        && best >= 0.994
        && bfs >= 0.994
        && (best - analytic).abs() <= 0.005
        && (bfs - analytic).abs() <= 0.005;
    ensure(ok, format!("greedy {greedy:.4}, best-of-15 {best:.4}, bfs {bfs:.4} (analytic {analytic:.5})"))
}

fn voting_aggregate() -> Outcome {
    let trials = 20_000u64;
    let accuracy = |n_votes: u32| -> f64 {
        let plan = SamplingPlan { n_votes, ..Default::default() };
        let model = refiner(SuccessProfile::Never, 0.7, 0.0, 3);
        let judge = Judge::default();
        let correct: usize = (0..trials)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::rng_for(i, "c3");
                let spec = random_spec(&mut rng);
                let pass = rng.random_bool(0.5);
                let text = respond_text(&spec, pass, &mut rng);
                let (j, _) = judge.judge(&model, &spec.instruction(), &text, &plan, i).unwrap();
                (j.label.follows() == pass) as usize
            })
            .sum();
        correct as f64 / trials as f64
    };
    let analytic = binomial_tail(5, 3, 0.7);
    let voted = accuracy(5);
    let single = accuracy(1);
    ensure(
        (voted - analytic).abs() <= 0.02 && voted > single,
        format!("voted@5 {voted:.4} (analytic {analytic:.4}), single vote {single:.4}"),
    )
}

fn loss_oracles() -> Outcome {
    let zero = DpoItem::new(-3.0, -3.0, -9.0, -9.0, 0.1).unwrap();
    let ln2_err = (dpo_loss(&zero).unwrap() - std::f64::consts::LN_2).abs();
    let uniform = TokenLogProbs::new(vec![-(100f64.ln()); 50]).unwrap();
    let sft_err = (sft_loss(&uniform) - 100f64.ln()).abs();
    let mut rng = seed::rng(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: [f64; 4] = std::array::from_fn(|_| rng.random_range(-40.0..0.0));
        let beta = rng.random_range(0.01..1.0);
        let f = |v: [f64; 4]| dpo_loss(&DpoItem::new(v[0], v[1], v[2], v[3], beta).unwrap()).unwrap();
        let g = dpo_gradient(&DpoItem::new(x[0], x[1], x[2], x[3], beta).unwrap()).unwrap();
        for (k, analytic) in [g.lp_w_policy, g.lp_w_ref, g.lp_l_policy, g.lp_l_ref].into_iter().enumerate() {
            let (mut up, mut down) = (x, x);
            up[k] += h;
            down[k] -= h;
            let numeric = (f(up) - f(down)) / (2.0 * h);
            worst = worst.max((numeric - analytic).abs() / analytic.abs());
        }
    }
    ensure(
        ln2_err <= 1e-12 && sft_err <= 1e-12 && worst <= 1e-6,
        format!("|dpo-ln2| {ln2_err:.1e}, |sft-ln100| {sft_err:.1e}, worst gradient rel. error {worst:.1e}"),
    )
}

fn extraction_correctness() -> Outcome {
    let j = |l, e: &str| Judgment::single(l, e).unwrap();
    let x = Prompt::new("chain", "Write the letter a exactly 3 times.", Origin::Synthetic);
    let mut tree = RefinementTree::new(x, Response::new("aa", Producer::Actor, 0), j(Label::Violates, "two")).unwrap();
    let mid = tree.add_child(0, Response::new("aaaa", Producer::Refiner, 0), j(Label::Violates, "four")).unwrap();
    let leaf = tree.add_child(mid, Response::new("aaa", Producer::Refiner, 0), j(Label::Follows, "three")).unwrap();
    tree.mark_refined(leaf).unwrap();
    let outcome = SearchOutcome {
        refined_node: Some(leaf),
        expansions: tree.expansions_used(),
        depth_counts: tree.depth_counts(),
        tree,
        judge_failures: 0,
    };
    let recs = extract_training_records(&outcome);
    let dpo = recs.dpo_pair.as_ref().ok_or("no dpo pair")?;
    let ok = dpo.rejected.text == "aa"
        && dpo.chosen.text == "aaa"
        && recs.refiner_tuples.len() == 1
        && recs.refiner_tuples[0].parent.text == "aaaa"
        && recs.refiner_tuples[0].parent_judgment.explanation == "four"
        && recs.refiner_tuples[0].refined.text == "aaa"
        && recs.judgment_records.len() == 3;
    ensure(
        ok,
        format!(
            "dpo ({} > {}), tuple parent {:?}, {} judgment records",
            dpo.chosen.text,
            dpo.rejected.text,
            recs.refiner_tuples.first().map(|t| t.parent.text.clone()),
            recs.judgment_records.len()
        ),
    )
}

fn similarity_ordering() -> Outcome {
    let mut refined = 0.0;
    let mut interfering = 0.0;
    for i in 0..500u64 {
        let spec = random_start_end(&mut seed::rng_for(i, "c6/spec"));
        let (n, p) = build_pair(&spec, PairKind::Refined, &mut seed::rng_for(i, "c6/refined")).unwrap();
        refined += pair_similarity(&n, &p).unwrap().0;
        let (n, p) = build_pair(&spec, PairKind::Interfering, &mut seed::rng_for(i, "c6/interfering")).unwrap();
        interfering += pair_similarity(&n, &p).unwrap().0;
    }
    let (r, f) = (refined / 500.0, interfering / 500.0);
    ensure(r - f >= 0.05, format!("refined {r:.4}, interfering {f:.4}, margin {:.4}", r - f))
}

/// Expected expansions of BFS with branch 3, depth 4, budget 15 when each
/// refinement succeeds with probability `p`: level one always costs 3, a
/// second level of 9 follows only if all three failed, and the budget
/// leaves 3 for the third level.
fn bfs_expected(p: f64) -> f64 {
    let q = 1.0 - p;
    3.0 + 9.0 * q.powi(3) + 3.0 * q.powi(12)
}

/// Depth-first search generates one child at a time and stops at the first
/// success, so expansions are a geometric count truncated at the budget.
fn dfs_expected(p: f64) -> f64 {
    (1.0 - (1.0 - p).powi(15)) / p
}

fn solve_p(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6, 1.0 - 1e-9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn calibration() -> Outcome {
    let mut report = Vec::new();
    let mut ok = true;
    for (kind, expected) in [(SearchKind::Bfs, bfs_expected as fn(f64) -> f64), (SearchKind::Dfs, dfs_expected)] {
        let p = solve_p(expected, 3.7);
        let total: usize = (0..5000u64)
            .into_par_iter()
            .map(|i| {
                let model = refiner(SuccessProfile::Bernoulli(p), 1.0, 0.0, i);
                let spec = random_spec(&mut seed::rng_for(i, "c7"));
                search(kind, &model, &negative(&spec, i), &SearchBudget::default(), i).expansions
            })
            .sum();
        let mean = total as f64 / 5000.0;
        ok &= (mean - 3.7).abs() <= 0.5;
        report.push(format!("{kind:?} p={p:.4} mean {mean:.3}"));
    }
    ensure(ok, report.join(", "))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treepref"))
}

fn dataset_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("journal"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn schema_for(name: &str) -> Option<Schema> {
    let stem = name.split('.').next()?;
    Some(match stem {
        _ if name.contains("manifest") || name.ends_with(".txt") => return None,
        "dpo" => Schema::Dpo,
        "judgments" | "rft_judge" => Schema::JudgeSft,
        "rft_refine" => Schema::RefineSft,
        "trees" => Schema::Trees,
        "negatives" => Schema::Negatives,
        "stats" => Schema::Stats,
        _ => return None,
    })
}

fn determinism_roundtrip() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let status = bin()
                .args(["simulate", "--n-prompts", "200", "--seed", "8", "--output-dir"])
                .arg(&dir)
                .output()
                .unwrap()
                .status;
            (dir, status.code())
        })
        .collect();
    if runs.iter().any(|(_, code)| *code != Some(0)) {
        return Err(format!("simulate exit codes {:?}", runs.iter().map(|r| r.1).collect::<Vec<_>>()));
    }
    let a = dataset_files(&runs[0].0);
    let b = dataset_files(&runs[1].0);
    let identical = a == b;
    let mut checked = 0;
    for name in a.keys() {
        if let Some(schema) = schema_for(name) {
            let rep = validate_roundtrip(&runs[0].0.join(name), schema).map_err(|e| format!("{name}: {e}"))?;
            if !rep.byte_equal {
                return Err(format!("{name} does not round-trip (line {:?})", rep.first_divergence()));
            }
            checked += 1;
        }
    }
    let balanced: Vec<JudgeSftRecord> = read_jsonl(&runs[0].0.join("rft_judge.t1.jsonl")).unwrap();
    let pos = balanced.iter().filter(|r| r.label.follows()).count();
    let gap = pos.abs_diff(balanced.len() - pos);
    ensure(
        identical && gap <= 1 && checked >= 7,
        format!("{} files byte-identical: {identical}, {checked} round-tripped, judge class gap {gap}", a.len()),
    )
}

fn split_fidelity() -> Outcome {
    let ids: Vec<String> = (0..43_000).map(|i| format!("p{i:05}")).collect();
    let start = Instant::now();
    let split = split_corpus(&ids, &[("actor", 8000), ("refiner", 5000), ("selfplay", 30000)], 2).unwrap();
    let elapsed = start.elapsed();
    let sizes: Vec<usize> = split.partitions.iter().map(|p| p.items.len()).collect();
    let mut seen = HashSet::new();
    let disjoint =
        split.partitions.iter().flat_map(|p| &p.items).chain(&split.overflow).all(|id| seen.insert(id.clone()));
    let exhaustive = seen.len() == ids.len();
    ensure(
        sizes == [8000, 5000, 30000]
            && split.overflow.is_empty()
            && disjoint
            && exhaustive
            && elapsed < Duration::from_secs(1),
        format!(
            "sizes {sizes:?}, overflow {}, disjoint {disjoint}, exhaustive {exhaustive}, {:.1} ms",
            split.overflow.len(),
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("treepref.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 11\nsynthetic_prompts = 200\noutput_dir = {:?}\n\n[actor]\nkind = \"scripted\"\nactor_pass_prob = 0.5\n\n[refiner]\nkind = \"scripted\"\nrefine_success_prob = 0.4\n",
            out.display().to_string()
        ),
    )
    .unwrap();
    let start = Instant::now();
    let status = bin().arg("iterate").arg("--config").arg(&cfg).output().unwrap().status;
    let secs = start.elapsed().as_secs_f64();
    if status.code() != Some(0) {
        return Err(format!("iterate exited with {:?}", status.code()));
    }
    let rows: Vec<TreeNodeRow> = read_jsonl(&out.join("trees.t1.jsonl")).unwrap();
    let refined_trees: HashSet<&str> = rows.iter().filter(|r| r.refined).map(|r| r.tree_id.as_str()).collect();
    let trees: HashSet<&str> = rows.iter().map(|r| r.tree_id.as_str()).collect();
    let lines = |name: &str| fs::read_to_string(out.join(name)).unwrap().lines().count();
    let dpo = lines("dpo.t1.jsonl");
    let judgments = lines("judgments.t1.jsonl");
    let manifest: dataset::Manifest =
        serde_json::from_str(&fs::read_to_string(out.join("dpo.t1.manifest.json")).unwrap()).unwrap();
    ensure(
        secs < 60.0
            && dpo == refined_trees.len()
            && judgments == rows.len()
            && manifest.count == dpo
            && !trees.is_empty(),
        format!(
            "{secs:.2}s, {} trees, dpo {dpo} vs refined {}, judgments {judgments} vs nodes {}",
            trees.len(),
            refined_trees.len(),
            rows.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("budget safety", budget_safety),
        ("tree-search superiority", tree_search_superiority),
        ("voting aggregate", voting_aggregate),
        ("loss oracles", loss_oracles),
        ("extraction correctness", extraction_correctness),
        ("similarity ordering", similarity_ordering),
        ("expansion calibration", calibration),
        ("determinism and round-trip", determinism_roundtrip),
        ("split fidelity", split_fidelity),
        ("end-to-end simulation", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} [{secs:.2}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} [{secs:.2}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
