//! One self-play iteration end to end.
//!
//! For every prompt the actor samples `k` responses, the refiner judges
//! them, and each negative is repaired by tree search. Trees are mined for
//! DPO pairs and refiner training data and everything is written under the
//! output directory with a per-iteration suffix:
//!
//! | file | contents |
//! |------|----------|
//! | `dpo.t{t}.jsonl` | one preference pair per refined tree |
//! | `judgments.t{t}.jsonl` | a judge record for every tree node |
//! | `rft_judge.t{t}.jsonl` | balanced judge records (tree nodes plus passing actor samples) |
//! | `rft_refine.t{t}.jsonl` | successful refinements with their parents |
//! | `trees.t{t}.jsonl` | every tree node, one per line |
//! | `negatives.t{t}.jsonl` | collected negatives |
//! | `stats.t{t}.json`, `stats.t{t}.txt` | iteration statistics |
//!
//! Finished prompts are appended to `journal.t{t}.jsonl`; a rerun with the
//! same configuration reuses them instead of calling the models again.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, dpo_record, emit, judge_sft, tree_rows, DatasetError, DpoRecord, JudgeSftRecord, NegativeRow, RftBundle,
};
use crate::gateway::{
    Backend, Behavior, EndpointConfig, GatewayError, RemoteBackend, RoleBinding, ScriptedModel, SuccessProfile,
    TaskKind,
};
use crate::judgment::{collect_for_prompt, Judge, JudgeTemplate, LabelGrammar, NegativeRecord, PromptCollection};
use crate::model::{Prompt, SamplingPlan, SearchBudget};
use crate::search::{extract_training_records, run_search, JudgmentRecord, SearchContext, SearchKind, SearchOutcome};
use crate::seed;
use crate::synthetic::{pair_similarity, SyntheticWorld};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// Process exit code for a fatal error.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Probabilities driving the scripted model doubles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedConfig {
    pub actor_pass_prob: f64,
    pub refine_success_prob: f64,
    pub judge_accuracy: f64,
    pub unparseable_prob: f64,
    pub valid_prob: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self {
            actor_pass_prob: 0.5,
            refine_success_prob: 0.4,
            judge_accuracy: 1.0,
            unparseable_prob: 0.0,
            valid_prob: 0.9,
        }
    }
}

impl ScriptedConfig {
    fn validate(&self) -> Result<(), PipelineError> {
        for (name, p) in [
            ("actor_pass_prob", self.actor_pass_prob),
            ("refine_success_prob", self.refine_success_prob),
            ("judge_accuracy", self.judge_accuracy),
            ("unparseable_prob", self.unparseable_prob),
            ("valid_prob", self.valid_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PipelineError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// A model double that can serve every role on synthetic tasks.
    pub fn model(&self, seed: u64, grammar: &LabelGrammar) -> ScriptedModel {
        ScriptedModel::new(seed)
            .with_world(Arc::new(SyntheticWorld))
            .on(TaskKind::Respond, Behavior::Actor(SuccessProfile::Bernoulli(self.actor_pass_prob)))
            .on(
                TaskKind::Judge,
                Behavior::Judge {
                    accuracy: self.judge_accuracy,
                    unparseable: self.unparseable_prob,
                    grammar: grammar.clone(),
                },
            )
            .on(TaskKind::Refine, Behavior::Refiner(SuccessProfile::Bernoulli(self.refine_success_prob)))
            .on(TaskKind::Evolve, Behavior::Evolver)
            .on(TaskKind::Validate, Behavior::Validator { valid_prob: self.valid_prob })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Scripted(ScriptedConfig),
    Remote(EndpointConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted(ScriptedConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self, seed: u64, grammar: &LabelGrammar) -> Result<Arc<dyn Backend>, PipelineError> {
        Ok(match self {
            BackendConfig::Scripted(s) => Arc::new(s.model(seed, grammar)),
            BackendConfig::Remote(e) => Arc::new(RemoteBackend::new(e.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub iteration: u32,
    pub seed: u64,
    /// Worker threads for prompt fan-out.
    pub concurrency: usize,
    pub output_dir: PathBuf,
    /// Prompt corpus as JSONL; synthetic prompts are generated when absent.
    pub prompts: Option<PathBuf>,
    pub synthetic_prompts: usize,
    pub actor: BackendConfig,
    pub refiner: BackendConfig,
    pub sampling: SamplingPlan,
    pub search: SearchBudget,
    pub search_kind: SearchKind,
    pub judge: JudgeTemplate,
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iteration: 1,
            seed: 0,
            concurrency: 8,
            output_dir: PathBuf::from("out"),
            prompts: None,
            synthetic_prompts: 200,
            actor: BackendConfig::default(),
            refiner: BackendConfig::default(),
            sampling: SamplingPlan::default(),
            search: SearchBudget::default(),
            search_kind: SearchKind::Bfs,
            judge: JudgeTemplate::default(),
            resume: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be >= 1".into()));
        }
        self.sampling.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.search.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.judge.grammar.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.judge.render_prompt("x", "y").map_err(|e| PipelineError::Config(format!("judge template: {e}")))?;
        for b in [&self.actor, &self.refiner] {
            if let BackendConfig::Scripted(s) = b {
                s.validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; recorded in manifests and used to
    /// tell whether a journal belongs to this configuration. Settings that
    /// cannot change the outputs (where they go, thread count, resuming)
    /// are left out.
    pub fn digest(&self) -> String {
        let normalized = PipelineConfig { output_dir: PathBuf::new(), concurrency: 1, resume: true, ..self.clone() };
        dataset::sha256_hex(dataset::canonical_json(&normalized).expect("config serializes").as_bytes())
    }

    /// Sampling plan with the seed fixed for this iteration.
    pub fn effective_plan(&self) -> SamplingPlan {
        SamplingPlan { seed: seed::derive(self.seed, &format!("iteration/{}", self.iteration)), ..self.sampling }
    }

    pub fn roles(&self) -> Result<RoleBinding, PipelineError> {
        let grammar = &self.judge.grammar;
        Ok(RoleBinding::new(
            self.actor.build(seed::derive(self.seed, "actor"), grammar)?,
            self.refiner.build(seed::derive(self.seed, "refiner"), grammar)?,
        ))
    }

    pub fn load_prompts(&self) -> Result<Vec<Prompt>, PipelineError> {
        match &self.prompts {
            Some(path) => Ok(dataset::read_jsonl::<Prompt>(path)?),
            None => Ok(crate::synthetic::synthetic_prompts(self.synthetic_prompts, self.seed)
                .into_iter()
                .map(|(p, _)| p)
                .collect()),
        }
    }
}

/// One negative's search, or why it could not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeResult {
    pub negative: NegativeRecord,
    pub outcome: Option<SearchOutcome>,
    pub error: Option<String>,
}

/// Everything produced for one prompt; also the journal entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt: Prompt,
    pub collection: PromptCollection,
    pub trees: Vec<TreeResult>,
}

fn tree_id(negative: &NegativeRecord) -> String {
    format!("{}/{}", negative.prompt.id, negative.response.sample_index)
}

pub fn process_prompt(
    prompt: &Prompt,
    roles: &RoleBinding,
    plan: &SamplingPlan,
    judge: &Judge,
    budget: &SearchBudget,
    kind: SearchKind,
) -> PromptResult {
    let collection = collect_for_prompt(prompt, roles.actor.as_ref(), roles.refiner.as_ref(), plan, judge);
    let ctx = SearchContext { refiner: roles.refiner.as_ref(), judge, plan };
    let trees = collection
        .negatives(prompt)
        .map(|negative| {
            let seed = seed::derive(plan.seed, &format!("{}/tree", tree_id(&negative)));
            match run_search(kind, &negative, budget, &ctx, seed) {
                Ok(outcome) => TreeResult { negative, outcome: Some(outcome), error: None },
                Err(e) => TreeResult { negative, outcome: None, error: Some(e.class().to_string()) },
            }
        })
        .collect();
    PromptResult { prompt: prompt.clone(), collection, trees }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
enum JournalEntry {
    Header { config_digest: String },
    Done { result: Box<PromptResult> },
}

/// Append-only JSONL of finished prompts guarded by a mutex.
struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    /// Opens the journal, returning results it already holds. Entries from a
    /// different configuration are discarded; a torn final line is dropped.
    fn open(
        path: &Path,
        config_digest: &str,
        resume: bool,
    ) -> Result<(Self, HashMap<String, PromptResult>), PipelineError> {
        let mut done = HashMap::new();
        let mut keep = String::new();
        if resume && path.exists() {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let mut lines = text.lines();
            let header_ok = matches!(
                lines.next().map(serde_json::from_str::<JournalEntry>),
                Some(Ok(JournalEntry::Header { config_digest: ref d })) if d == config_digest
            );
            if header_ok {
                for line in lines {
                    if let Ok(JournalEntry::Done { result }) = serde_json::from_str::<JournalEntry>(line) {
                        keep.push_str(line);
                        keep.push('\n');
                        done.insert(result.prompt.id.clone(), *result);
                    }
                }
            }
        }
        let header = serde_json::to_string(&JournalEntry::Header { config_digest: config_digest.to_string() })
            .expect("header serializes");
        fs::write(path, format!("{header}\n{keep}")).map_err(io_err(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file) }, done))
    }

    fn append(&self, result: &PromptResult) -> Result<(), PipelineError> {
        let line = serde_json::to_string(&JournalEntry::Done { result: Box::new(result.clone()) })
            .expect("journal entries serialize");
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(f, "{line}").and_then(|_| f.flush()).map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub prompts: usize,
    pub responses_judged: usize,
    pub negatives: usize,
    pub trees: usize,
    pub refined: usize,
    pub exhausted: usize,
    pub expansions_total: usize,
    pub mean_expansions: Option<f64>,
    pub refine_success_rate: Option<f64>,
    /// Mean similarity between a negative and its refinement.
    pub mean_similarity_refined: Option<f64>,
    /// Mean similarity between a negative and an independently sampled
    /// passing response to the same prompt.
    pub mean_similarity_independent: Option<f64>,
    pub dpo_pairs: usize,
    /// Refined trees whose accepted node repeats the root text verbatim,
    /// which a noisy judge can accept. They yield no DPO pair.
    pub identical_pairs: usize,
    pub refine_records: usize,
    pub judgment_records: usize,
    pub rft_judge_positives: usize,
    pub rft_judge_negatives: usize,
    pub judge_failures: usize,
    pub resumed_prompts: usize,
    pub errors: BTreeMap<String, usize>,
}

impl IterationStats {
    /// Failed items: errors by class plus tree children whose judging failed.
    pub fn item_errors(&self) -> usize {
        self.errors.values().sum::<usize>() + self.judge_failures
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// The text report; the JSON form is the stats record itself.
pub fn render_stats_text(s: &IterationStats) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let _ = writeln!(out, "iteration {}", s.iteration);
    let _ = writeln!(out, "prompts             {} ({} resumed)", s.prompts, s.resumed_prompts);
    let _ = writeln!(out, "responses judged    {}", s.responses_judged);
    let _ = writeln!(out, "negatives           {}", s.negatives);
    let _ = writeln!(out, "trees               {} refined, {} exhausted", s.refined, s.exhausted);
    let _ = writeln!(out, "expansions          {} total, mean {}", s.expansions_total, opt(s.mean_expansions));
    let _ = writeln!(out, "refine success      {}", opt(s.refine_success_rate));
    let _ = writeln!(
        out,
        "pair similarity     refined {}, independent {}",
        opt(s.mean_similarity_refined),
        opt(s.mean_similarity_independent)
    );
    let _ = writeln!(out, "dpo pairs           {} ({} identical skipped)", s.dpo_pairs, s.identical_pairs);
    let _ = writeln!(out, "refine records      {}", s.refine_records);
    let _ = writeln!(
        out,
        "judgment records    {} ({} / {} balanced)",
        s.judgment_records, s.rft_judge_positives, s.rft_judge_negatives
    );
    let _ = writeln!(out, "judge failures      {}", s.judge_failures);
    if s.errors.is_empty() {
        let _ = writeln!(out, "errors              none");
    } else {
        for (k, v) in &s.errors {
            let _ = writeln!(out, "error {k:<14}{v}");
        }
    }
    out
}

/// Writes `stats.t{t}.json` (one canonical line) and `stats.t{t}.txt`.
pub fn report_stats(stats: &IterationStats, dir: &Path) -> Result<(PathBuf, PathBuf), PipelineError> {
    let json = dir.join(format!("stats.t{}.json", stats.iteration));
    let text = dir.join(format!("stats.t{}.txt", stats.iteration));
    let bytes = dataset::render_jsonl(std::slice::from_ref(stats))?;
    fs::write(&json, bytes).map_err(io_err(&json))?;
    fs::write(&text, render_stats_text(stats)).map_err(io_err(&text))?;
    Ok((json, text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationOutput {
    pub stats: IterationStats,
    pub files: Vec<PathBuf>,
}

impl IterationOutput {
    /// 0 when every item succeeded, 2 when some items failed.
    pub fn exit_code(&self) -> i32 {
        if self.stats.item_errors() == 0 {
            0
        } else {
            2
        }
    }
}

/// Runs one iteration over `prompts` and writes all datasets.
pub fn run_iteration(config: &PipelineConfig, prompts: &[Prompt]) -> Result<IterationOutput, PipelineError> {
    config.validate()?;
    let roles = config.roles()?;
    run_iteration_with(config, prompts, &roles)
}

/// As [`run_iteration`] but with caller-supplied backends.
pub fn run_iteration_with(
    config: &PipelineConfig,
    prompts: &[Prompt],
    roles: &RoleBinding,
) -> Result<IterationOutput, PipelineError> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let t = config.iteration;
    let digest = config.digest();
    let (journal, mut done) = Journal::open(&dir.join(format!("journal.t{t}.jsonl")), &digest, config.resume)?;

    let plan = config.effective_plan();
    let judge = Judge::new(config.judge.clone());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;

    let resumed = prompts.iter().filter(|p| done.contains_key(&p.id)).count();
    let todo: Vec<&Prompt> = prompts.iter().filter(|p| !done.contains_key(&p.id)).collect();
    let fresh: Vec<PromptResult> = pool.install(|| {
        todo.par_iter()
            .map(|p| {
                let r = process_prompt(p, roles, &plan, &judge, &config.search, config.search_kind);
                journal.append(&r).map(|_| r)
            })
            .collect::<Result<_, _>>()
    })?;
    for r in fresh {
        done.insert(r.prompt.id.clone(), r);
    }
    let results: Vec<&PromptResult> = prompts.iter().filter_map(|p| done.get(&p.id)).collect();
    let mut out = write_outputs(config, &results, &digest, &plan)?;
    out.stats.resumed_prompts = resumed;
    let (json, text) = report_stats(&out.stats, dir)?;
    out.files.extend([json, text]);
    Ok(out)
}

fn write_outputs(
    config: &PipelineConfig,
    results: &[&PromptResult],
    digest: &str,
    plan: &SamplingPlan,
) -> Result<IterationOutput, PipelineError> {
    let t = config.iteration;
    let template = &config.judge;
    let mut stats = IterationStats { iteration: t, prompts: results.len(), ..Default::default() };
    let mut negatives = Vec::new();
    let mut trees = Vec::new();
    let mut dpo: Vec<DpoRecord> = Vec::new();
    let mut tuples = Vec::new();
    let mut node_judgments: Vec<(String, JudgmentRecord)> = Vec::new();
    let mut positives: Vec<(String, JudgmentRecord)> = Vec::new();
    let mut sim_refined = Vec::new();
    let mut sim_independent = Vec::new();

    for r in results {
        stats.responses_judged += r.collection.judged.len();
        for (k, v) in &r.collection.errors {
            *stats.errors.entry(k.clone()).or_default() += v;
        }
        let first_pass = r.collection.judged.iter().find(|j| j.judgment.label.follows());
        for j in r.collection.judged.iter().filter(|j| j.judgment.label.follows()) {
            positives.push((
                format!("{}/actor/{}", r.prompt.id, j.response.sample_index),
                JudgmentRecord {
                    prompt: r.prompt.clone(),
                    response: j.response.clone(),
                    judgment: j.judgment.clone(),
                    node_id: 0,
                },
            ));
        }
        for tr in &r.trees {
            stats.negatives += 1;
            negatives.push(NegativeRow::from(&tr.negative));
            if let Some(pos) = first_pass {
                if let Ok(s) = pair_similarity(&tr.negative.response.text, &pos.response.text) {
                    sim_independent.push(s.0);
                }
            }
            let Some(outcome) = &tr.outcome else {
                *stats.errors.entry(tr.error.clone().unwrap_or_else(|| "search".into())).or_default() += 1;
                continue;
            };
            let id = tree_id(&tr.negative);
            stats.trees += 1;
            stats.expansions_total += outcome.expansions;
            stats.judge_failures += outcome.judge_failures;
            let recs = extract_training_records(outcome);
            match &recs.dpo_pair {
                Some(pair) if pair.chosen.text == pair.rejected.text => {
                    stats.refined += 1;
                    stats.identical_pairs += 1;
                }
                Some(pair) => {
                    stats.refined += 1;
                    if let Ok(s) = pair_similarity(&pair.rejected.text, &pair.chosen.text) {
                        sim_refined.push(s.0);
                    }
                    dpo.push(dpo_record(id.clone(), pair, t));
                }
                None => stats.exhausted += 1,
            }
            tuples.extend(recs.refiner_tuples.into_iter().map(|tu| (format!("{id}/{}", tu.node_id), tu)));
            node_judgments.extend(recs.judgment_records.into_iter().map(|j| (format!("{id}/{}", j.node_id), j)));
            trees.extend(tree_rows(&id, &outcome.tree));
        }
    }
    stats.mean_expansions = ratio(stats.expansions_total, stats.trees);
    stats.refine_success_rate = ratio(stats.refined, stats.trees);
    stats.mean_similarity_refined = mean(&sim_refined);
    stats.mean_similarity_independent = mean(&sim_independent);

    let judgments: Vec<JudgeSftRecord> =
        node_judgments.iter().map(|(id, j)| judge_sft(template, id.clone(), j)).collect::<Result<_, _>>()?;
    let mut pool = node_judgments;
    pool.extend(positives);
    let bundle = RftBundle::build(template, &tuples, &pool, seed::derive(plan.seed, "balance"))?;
    stats.dpo_pairs = dpo.len();
    stats.refine_records = bundle.refine.len();
    stats.judgment_records = judgments.len();
    stats.rft_judge_positives = bundle.balance.positives;
    stats.rft_judge_negatives = bundle.balance.negatives;
    stats.errors.retain(|_, v| *v > 0);

    let dir = &config.output_dir;
    let path = |name: &str| dir.join(format!("{name}.t{t}.jsonl"));
    let files =
        vec![path("dpo"), path("judgments"), path("rft_judge"), path("rft_refine"), path("trees"), path("negatives")];
    emit(&dpo, &files[0], Some(digest))?;
    emit(&judgments, &files[1], Some(digest))?;
    emit(&bundle.judge, &files[2], Some(digest))?;
    emit(&bundle.refine, &files[3], Some(digest))?;
    emit(&trees, &files[4], Some(digest))?;
    emit(&negatives, &files[5], Some(digest))?;
    Ok(IterationOutput { stats, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, actor_pass: f64) -> PipelineConfig {
        let scripted = ScriptedConfig { actor_pass_prob: actor_pass, ..Default::default() };
        PipelineConfig {
            output_dir: dir.to_path_buf(),
            synthetic_prompts: 30,
            seed: 11,
            concurrency: 4,
            actor: BackendConfig::Scripted(scripted),
            refiner: BackendConfig::Scripted(scripted),
            ..Default::default()
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let c = PipelineConfig::from_toml(
            r#"
            iteration = 2
            seed = 5
            search_kind = "dfs"
            [search]
            expansion_budget = 10
            [actor]
            kind = "scripted"
            actor_pass_prob = 0.3
            [refiner]
            kind = "remote"
            base_url = "http://127.0.0.1:9/v1"
            api_key_env = "TREEPREF_KEY"
            "#,
        )
        .unwrap();
        assert_eq!(c.iteration, 2);
        assert_eq!(c.search.expansion_budget, 10);
        assert_eq!(c.search.depth_limit, 4);
        assert_eq!(c.search_kind, SearchKind::Dfs);
        assert!(matches!(c.actor, BackendConfig::Scripted(s) if s.actor_pass_prob == 0.3));
        assert!(matches!(c.refiner, BackendConfig::Remote(ref e) if e.api_key_env.as_deref() == Some("TREEPREF_KEY")));
    }

    #[test]
    fn always_correct_actor_gives_an_empty_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), 1.0);
        let out = run_iteration(&c, &c.load_prompts().unwrap()).unwrap();
        assert_eq!(out.stats.negatives, 0);
        assert_eq!(out.stats.trees, 0);
        assert_eq!(out.stats.mean_expansions, None);
        assert_eq!(fs::read(dir.path().join("dpo.t1.jsonl")).unwrap(), b"");
        let json = fs::read_to_string(dir.path().join("stats.t1.json")).unwrap();
        assert!(json.contains("\"mean_expansions\":null"));
        assert_eq!(out.exit_code(), 0);
    }

    #[test]
    fn stats_invariants_hold() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), 0.5);
        let out = run_iteration(&c, &c.load_prompts().unwrap()).unwrap();
        let s = &out.stats;
        assert!(s.trees > 0);
        assert_eq!(s.refined + s.exhausted, s.trees);
        assert_eq!(s.dpo_pairs, s.refined);
        assert!((s.mean_expansions.unwrap() - s.expansions_total as f64 / s.trees as f64).abs() < 1e-12);
        assert!(s.rft_judge_positives.abs_diff(s.rft_judge_negatives) <= 1);
    }

    #[test]
    fn noisy_judge_never_emits_identical_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let noisy = ScriptedConfig { judge_accuracy: 0.6, ..Default::default() };
        let c = PipelineConfig {
            synthetic_prompts: 80,
            actor: BackendConfig::Scripted(noisy),
            refiner: BackendConfig::Scripted(noisy),
            ..config(dir.path(), 0.5)
        };
        let out = run_iteration(&c, &c.load_prompts().unwrap()).unwrap();
        let s = &out.stats;
        assert!(s.identical_pairs > 0);
        assert_eq!(s.dpo_pairs + s.identical_pairs, s.refined);
        let pairs: Vec<DpoRecord> = dataset::read_jsonl(&out.files[0]).unwrap();
        assert!(pairs.iter().all(|p| p.chosen != p.rejected));
    }

    #[test]
    fn mean_expansions_arithmetic() {
        let s =
            IterationStats { trees: 10, expansions_total: 37, mean_expansions: ratio(37, 10), ..Default::default() };
        assert!((s.mean_expansions.unwrap() - 3.7).abs() < 1e-12);
        assert!(render_stats_text(&s).contains("mean 3.7000"));
        assert!(dataset::canonical_json(&s).unwrap().contains("\"mean_expansions\":3.7"));
    }
}
