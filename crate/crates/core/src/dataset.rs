//! Training record schemas and their canonical JSONL form.
//!
//! Every record is written as one JSON object per line with keys in
//! lexicographic order, so identical records always produce identical
//! bytes. Each emitted file gets a manifest with its record count and
//! SHA-256 digest.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{ChatMessage, Role};
use crate::judgment::{parse_judgment, JudgeTemplate, NegativeRecord};
use crate::model::{Label, Prompt, RefinementTree};
use crate::pipeline::IterationStats;
use crate::search::{DpoPair, JudgmentRecord, RefinerTuple};
use crate::seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("record {id}: invalid field `{field}`: {reason}")]
    SchemaViolation { id: String, field: &'static str, reason: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("requested {requested} items but the corpus holds {available}")]
    OverAllocated { requested: usize, available: usize },
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn violation(id: &str, field: &'static str, reason: impl Into<String>) -> DatasetError {
    DatasetError::SchemaViolation { id: id.to_string(), field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    ActorSft,
    JudgeSft,
    RefineSft,
    Dpo,
    Negatives,
    Trees,
    Prompts,
    Stats,
}

impl Schema {
    pub const ALL: [Schema; 8] = [
        Schema::ActorSft,
        Schema::JudgeSft,
        Schema::RefineSft,
        Schema::Dpo,
        Schema::Negatives,
        Schema::Trees,
        Schema::Prompts,
        Schema::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::ActorSft => "actor_sft",
            Schema::JudgeSft => "judge_sft",
            Schema::RefineSft => "refine_sft",
            Schema::Dpo => "dpo",
            Schema::Negatives => "negatives",
            Schema::Trees => "trees",
            Schema::Prompts => "prompts",
            Schema::Stats => "stats",
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schema {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Schema::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| DatasetError::UnknownSchema(s.to_string()))
    }
}

/// A record type with a fixed schema.
pub trait DatasetRecord: Serialize + DeserializeOwned {
    const SCHEMA: Schema;

    fn record_id(&self) -> String;

    /// Structural invariants beyond what the types enforce.
    fn check(&self) -> Result<(), DatasetError> {
        Ok(())
    }
}

fn check_roles(id: &str, messages: &[ChatMessage], roles: &[Role]) -> Result<(), DatasetError> {
    if messages.len() != roles.len() {
        return Err(violation(id, "messages", format!("expected {} messages, found {}", roles.len(), messages.len())));
    }
    for (i, (m, r)) in messages.iter().zip(roles).enumerate() {
        if m.role != *r {
            return Err(violation(id, "messages", format!("message {i} should be {r:?}, found {:?}", m.role)));
        }
        if m.content.trim().is_empty() {
            return Err(violation(id, "messages", format!("message {i} is empty")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorSftRecord {
    pub id: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeSftRecord {
    pub id: String,
    pub label: Label,
    pub messages: Vec<ChatMessage>,
}

/// Judge turn, judgment, refine request, refined response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineSftRecord {
    pub id: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoMeta {
    pub sft_weight: f64,
    pub beta: f64,
    pub iteration: u32,
}

impl DpoMeta {
    pub const SFT_WEIGHT: f64 = 0.1;
    pub const BETA: f64 = 0.1;

    pub fn for_iteration(iteration: u32) -> Self {
        Self { sft_weight: Self::SFT_WEIGHT, beta: Self::BETA, iteration }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: DpoMeta,
}

/// One node of a search tree. A tree dump holds one row per node; `refined`
/// marks the node the search accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNodeRow {
    pub tree_id: String,
    pub node_id: usize,
    pub parent_id: Option<usize>,
    pub depth: u32,
    pub response: String,
    pub label: Label,
    pub score: f64,
    pub explanation: String,
    pub refined: bool,
}

/// Rows for every node of `tree`, in node order.
pub fn tree_rows(tree_id: &str, tree: &RefinementTree) -> Vec<TreeNodeRow> {
    let refined = tree.refined_node().map(|n| n.node_id);
    tree.nodes()
        .iter()
        .map(|n| TreeNodeRow {
            tree_id: tree_id.to_string(),
            node_id: n.node_id,
            parent_id: n.parent_id,
            depth: n.depth,
            response: n.response.text.clone(),
            label: n.judgment.label,
            score: n.judgment.score,
            explanation: n.judgment.explanation.clone(),
            refined: refined == Some(n.node_id),
        })
        .collect()
}

/// A collected negative, flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRow {
    pub prompt_id: String,
    pub prompt: String,
    pub response: String,
    pub label: Label,
    pub score: f64,
    pub explanation: String,
}

impl From<&NegativeRecord> for NegativeRow {
    fn from(n: &NegativeRecord) -> Self {
        Self {
            prompt_id: n.prompt.id.clone(),
            prompt: n.prompt.text.clone(),
            response: n.response.text.clone(),
            label: n.judgment.label,
            score: n.judgment.score,
            explanation: n.judgment.explanation.clone(),
        }
    }
}

impl DatasetRecord for ActorSftRecord {
    const SCHEMA: Schema = Schema::ActorSft;

    fn record_id(&self) -> String {
        self.id.clone()
    }

    fn check(&self) -> Result<(), DatasetError> {
        check_roles(&self.id, &self.messages, &[Role::User, Role::Assistant])
    }
}

impl DatasetRecord for JudgeSftRecord {
    const SCHEMA: Schema = Schema::JudgeSft;

    fn record_id(&self) -> String {
        self.id.clone()
    }

    fn check(&self) -> Result<(), DatasetError> {
        check_roles(&self.id, &self.messages, &[Role::User, Role::Assistant])
    }
}

impl DatasetRecord for RefineSftRecord {
    const SCHEMA: Schema = Schema::RefineSft;

    fn record_id(&self) -> String {
        self.id.clone()
    }

    fn check(&self) -> Result<(), DatasetError> {
        check_roles(&self.id, &self.messages, &[Role::User, Role::Assistant, Role::User, Role::Assistant])
    }
}

impl DatasetRecord for DpoRecord {
    const SCHEMA: Schema = Schema::Dpo;

    fn record_id(&self) -> String {
        self.id.clone()
    }

    fn check(&self) -> Result<(), DatasetError> {
        if self.chosen == self.rejected {
            return Err(violation(&self.id, "chosen", "identical to rejected"));
        }
        if self.meta.sft_weight != DpoMeta::SFT_WEIGHT {
            return Err(violation(&self.id, "meta.sft_weight", format!("expected {}", DpoMeta::SFT_WEIGHT)));
        }
        if self.meta.beta != DpoMeta::BETA {
            return Err(violation(&self.id, "meta.beta", format!("expected {}", DpoMeta::BETA)));
        }
        Ok(())
    }
}

impl DatasetRecord for NegativeRow {
    const SCHEMA: Schema = Schema::Negatives;

    fn record_id(&self) -> String {
        self.prompt_id.clone()
    }

    fn check(&self) -> Result<(), DatasetError> {
        if self.label.follows() {
            return Err(violation(&self.prompt_id, "label", "negatives must violate"));
        }
        Ok(())
    }
}

impl DatasetRecord for TreeNodeRow {
    const SCHEMA: Schema = Schema::Trees;

    fn record_id(&self) -> String {
        format!("{}/{}", self.tree_id, self.node_id)
    }

    fn check(&self) -> Result<(), DatasetError> {
        if (self.node_id == 0) != self.parent_id.is_none() {
            return Err(violation(&self.record_id(), "parent_id", "only the root lacks a parent"));
        }
        if self.refined && !self.label.follows() {
            return Err(violation(&self.record_id(), "refined", "refined node must follow"));
        }
        Ok(())
    }
}

impl DatasetRecord for Prompt {
    const SCHEMA: Schema = Schema::Prompts;

    fn record_id(&self) -> String {
        self.id.clone()
    }

    fn check(&self) -> Result<(), DatasetError> {
        if self.text.trim().is_empty() {
            return Err(violation(&self.id, "text", "empty"));
        }
        Ok(())
    }
}

impl DatasetRecord for IterationStats {
    const SCHEMA: Schema = Schema::Stats;

    fn record_id(&self) -> String {
        format!("t{}", self.iteration)
    }
}

pub fn actor_sft(id: impl Into<String>, x: &str, y: &str) -> ActorSftRecord {
    ActorSftRecord { id: id.into(), messages: vec![ChatMessage::user(x), ChatMessage::assistant(y)] }
}

/// A judge turn whose assistant text round-trips through the template's
/// label grammar.
pub fn judge_sft(
    template: &JudgeTemplate,
    id: impl Into<String>,
    rec: &JudgmentRecord,
) -> Result<JudgeSftRecord, DatasetError> {
    let id = id.into();
    let user = template
        .render_prompt(&rec.prompt.text, &rec.response.text)
        .map_err(|e| violation(&id, "messages", e.to_string()))?;
    let assistant = template.render_judgment(&rec.judgment);
    let parsed =
        parse_judgment(&assistant, &template.grammar).map_err(|e| violation(&id, "messages", e.to_string()))?;
    if parsed.label != rec.judgment.label {
        return Err(violation(&id, "messages", "judgment text does not parse back to its label"));
    }
    Ok(JudgeSftRecord {
        id,
        label: rec.judgment.label,
        messages: vec![ChatMessage::user(user), ChatMessage::assistant(assistant)],
    })
}

pub fn refine_sft(
    template: &JudgeTemplate,
    id: impl Into<String>,
    tuple: &RefinerTuple,
) -> Result<RefineSftRecord, DatasetError> {
    let id = id.into();
    let mut messages = template
        .refine_messages(&tuple.prompt.text, &tuple.parent.text, &tuple.parent_judgment)
        .map_err(|e| violation(&id, "messages", e.to_string()))?;
    messages.push(ChatMessage::assistant(tuple.refined.text.clone()));
    Ok(RefineSftRecord { id, messages })
}

pub fn dpo_record(id: impl Into<String>, pair: &DpoPair, iteration: u32) -> DpoRecord {
    DpoRecord {
        id: id.into(),
        prompt: pair.prompt.text.clone(),
        chosen: pair.chosen.text.clone(),
        rejected: pair.rejected.text.clone(),
        meta: DpoMeta::for_iteration(iteration),
    }
}

/// Key-sorted, single-line JSON.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    // `Value` objects are BTreeMaps, so re-rendering through it sorts keys
    // at every depth.
    serde_json::to_string(&serde_json::to_value(value)?)
}

/// Hyperparameters recommended for training on the emitted data. Nothing
/// here trains a model; the numbers ride along in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDefaults {
    pub actor_sft: StageDefaults,
    pub refiner_sft: StageDefaults,
    pub actor_dpo: StageDefaults,
    pub refiner_rft: StageDefaults,
    pub dpo_beta: f64,
    pub dpo_sft_weight: f64,
    pub warmup_ratio: f64,
    pub adam_betas: (f64, f64),
    pub search_budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageDefaults {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: u32,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        let stage = |learning_rate, epochs, batch_size| StageDefaults { learning_rate, epochs, batch_size };
        Self {
            actor_sft: stage(2e-6, 5, 64),
            refiner_sft: stage(2e-6, 3, 64),
            actor_dpo: stage(2e-7, 1, 32),
            refiner_rft: stage(1e-6, 3, 64),
            dpo_beta: DpoMeta::BETA,
            dpo_sft_weight: DpoMeta::SFT_WEIGHT,
            warmup_ratio: 0.1,
            adam_betas: (0.9, 0.999),
            search_budget: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub count: usize,
    pub digest_algo: String,
    pub digest: String,
    pub created_with_config_digest: Option<String>,
    pub training_defaults: TrainingDefaults,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `dpo.t1.jsonl` → `dpo.t1.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Canonical JSONL bytes for `records`, checking each one first.
pub fn render_jsonl<R: DatasetRecord>(records: &[R]) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    for r in records {
        r.check()?;
        let line = canonical_json(r).map_err(|e| violation(&r.record_id(), "record", e.to_string()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes `records` to `path` and a manifest next to it.
pub fn emit<R: DatasetRecord>(
    records: &[R],
    path: &Path,
    config_digest: Option<&str>,
) -> Result<Manifest, DatasetError> {
    let bytes = render_jsonl(records)?;
    let manifest = Manifest {
        dataset: R::SCHEMA.name().to_string(),
        count: records.len(),
        digest_algo: "sha256".into(),
        digest: sha256_hex(&bytes),
        created_with_config_digest: config_digest.map(str::to_string),
        training_defaults: TrainingDefaults::default(),
    };
    write_atomic(path, &bytes)?;
    let mut m = canonical_json(&manifest).expect("manifest serializes");
    m.push('\n');
    write_atomic(&manifest_path(path), m.as_bytes())?;
    Ok(manifest)
}

pub fn read_jsonl<R: DatasetRecord>(path: &Path) -> Result<Vec<R>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub schema: Schema,
    pub records: usize,
    /// 1-based lines whose canonical re-serialization differs.
    pub divergent_lines: Vec<usize>,
    pub byte_equal: bool,
}

impl RoundTripReport {
    pub fn first_divergence(&self) -> Option<usize> {
        self.divergent_lines.first().copied()
    }
}

fn roundtrip<R: DatasetRecord>(path: &Path, schema: Schema) -> Result<RoundTripReport, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8(bytes).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut divergent_lines = Vec::new();
    let mut records = 0;
    let mut rebuilt = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let rec: R = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.check()?;
        let canon = canonical_json(&rec).map_err(|e| violation(&rec.record_id(), "record", e.to_string()))?;
        if canon != line {
            divergent_lines.push(i + 1);
        }
        rebuilt.push_str(&canon);
        rebuilt.push('\n');
        records += 1;
    }
    if !text.is_empty() && !text.ends_with('\n') && divergent_lines.last() != Some(&records) {
        divergent_lines.push(records);
    }
    Ok(RoundTripReport { schema, records, byte_equal: rebuilt == text, divergent_lines })
}

/// Parses every line of `path` as `schema`, re-serializes it canonically,
/// and reports the lines that did not come back byte-identical.
pub fn validate_roundtrip(path: &Path, schema: Schema) -> Result<RoundTripReport, DatasetError> {
    match schema {
        Schema::ActorSft => roundtrip::<ActorSftRecord>(path, schema),
        Schema::JudgeSft => roundtrip::<JudgeSftRecord>(path, schema),
        Schema::RefineSft => roundtrip::<RefineSftRecord>(path, schema),
        Schema::Dpo => roundtrip::<DpoRecord>(path, schema),
        Schema::Negatives => roundtrip::<NegativeRow>(path, schema),
        Schema::Trees => roundtrip::<TreeNodeRow>(path, schema),
        Schema::Prompts => roundtrip::<Prompt>(path, schema),
        Schema::Stats => roundtrip::<IterationStats>(path, schema),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceWarning {
    /// One class was empty, so nothing could be kept.
    EmptyClass { label: Label, other: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BalanceReport {
    pub positives_in: usize,
    pub negatives_in: usize,
    pub positives: usize,
    pub negatives: usize,
    pub warning: Option<BalanceWarning>,
}

/// Downsamples the majority label to the minority's size with a seeded
/// uniform draw. Survivors keep their input order. If either class is
/// empty the result is empty and the report carries a warning.
pub fn balance_by<T>(items: Vec<T>, label: impl Fn(&T) -> Label, seed: u64) -> (Vec<T>, BalanceReport) {
    let pos: Vec<usize> = (0..items.len()).filter(|&i| label(&items[i]).follows()).collect();
    let neg: Vec<usize> = (0..items.len()).filter(|&i| !label(&items[i]).follows()).collect();
    let mut report = BalanceReport { positives_in: pos.len(), negatives_in: neg.len(), ..Default::default() };
    if pos.is_empty() || neg.is_empty() {
        let (label, other) = if pos.is_empty() { (Label::Follows, neg.len()) } else { (Label::Violates, pos.len()) };
        report.warning = Some(BalanceWarning::EmptyClass { label, other });
        return (Vec::new(), report);
    }
    let keep = pos.len().min(neg.len());
    let (major, minor) = if pos.len() > neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = seed::rng_for(seed, "balance");
    let mut kept: Vec<usize> = index::sample(&mut rng, major.len(), keep).into_iter().map(|i| major[i]).collect();
    kept.extend(minor);
    kept.sort_unstable();
    let mut keep_mask = vec![false; items.len()];
    for i in kept {
        keep_mask[i] = true;
    }
    let out: Vec<T> = items.into_iter().zip(keep_mask).filter_map(|(t, k)| k.then_some(t)).collect();
    report.positives = keep;
    report.negatives = keep;
    (out, report)
}

pub fn balance_judgments(records: Vec<JudgeSftRecord>, seed: u64) -> (Vec<JudgeSftRecord>, BalanceReport) {
    balance_by(records, |r| r.label, seed)
}

/// Refiner training data harvested from one iteration's trees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RftBundle {
    pub refine: Vec<RefineSftRecord>,
    pub judge: Vec<JudgeSftRecord>,
    pub balance: BalanceReport,
}

impl RftBundle {
    pub fn build(
        template: &JudgeTemplate,
        tuples: &[(String, RefinerTuple)],
        judgments: &[(String, JudgmentRecord)],
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let refine = tuples.iter().map(|(id, t)| refine_sft(template, id.clone(), t)).collect::<Result<_, _>>()?;
        let pool = judgments.iter().map(|(id, j)| judge_sft(template, id.clone(), j)).collect::<Result<Vec<_>, _>>()?;
        let (judge, balance) = balance_judgments(pool, seed);
        Ok(Self { refine, judge, balance })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition<T> {
    pub name: String,
    pub items: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit<T> {
    pub partitions: Vec<Partition<T>>,
    /// Whatever the requested counts left over.
    pub overflow: Vec<T>,
}

impl<T> CorpusSplit<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.partitions.iter().find(|p| p.name == name).map(|p| p.items.as_slice())
    }
}

/// Seeded shuffle followed by consecutive slices of the requested sizes.
pub fn split_corpus<T: Clone>(
    items: &[T],
    counts: &[(&str, usize)],
    seed: u64,
) -> Result<CorpusSplit<T>, DatasetError> {
    let requested: usize = counts.iter().map(|(_, n)| n).sum();
    if requested > items.len() {
        return Err(DatasetError::OverAllocated { requested, available: items.len() });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, "split"));
    let mut rest = order.as_slice();
    let mut partitions = Vec::with_capacity(counts.len());
    for (name, n) in counts {
        let (head, tail) = rest.split_at(*n);
        partitions.push(Partition { name: name.to_string(), items: head.iter().map(|&i| items[i].clone()).collect() });
        rest = tail;
    }
    let overflow = rest.iter().map(|&i| items[i].clone()).collect();
    Ok(CorpusSplit { partitions, overflow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Judgment, Origin, Producer, Response};
    use std::collections::HashSet;

    fn jrec(label: Label, node: usize) -> JudgmentRecord {
        JudgmentRecord {
            prompt: Prompt::new("p", "Write a haiku.", Origin::Synthetic),
            response: Response::new(format!("answer {node}"), Producer::Refiner, 0),
            judgment: Judgment::single(label, "reason").unwrap(),
            node_id: node,
        }
    }

    #[test]
    fn keys_are_sorted_at_every_depth() {
        let r = dpo_record(
            "p",
            &DpoPair {
                prompt: Prompt::new("p", "x", Origin::Seed),
                chosen: Response::new("good", Producer::Refiner, 0),
                rejected: Response::new("bad", Producer::Actor, 0),
            },
            2,
        );
        assert_eq!(
            canonical_json(&r).unwrap(),
            r#"{"chosen":"good","id":"p","meta":{"beta":0.1,"iteration":2,"sft_weight":0.1},"prompt":"x","rejected":"bad"}"#
        );
    }

    #[test]
    fn empty_and_repeated_emission() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        let m = emit::<ActorSftRecord>(&[], &empty, None).unwrap();
        assert_eq!(m.count, 0);
        assert_eq!(fs::read(&empty).unwrap(), b"");

        let recs: Vec<_> = (0..3).map(|i| actor_sft(format!("a{i}"), "Say hi.", "Hi!")).collect();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let ma = emit(&recs, &a, Some("cfg")).unwrap();
        let mb = emit(&recs, &b, Some("cfg")).unwrap();
        assert_eq!(ma.digest, mb.digest);
        assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 3);
        assert_eq!(ma.digest, sha256_hex(&fs::read(&a).unwrap()));
        assert!(manifest_path(&a).exists());
    }

    #[test]
    fn three_message_refine_record_is_rejected() {
        let bad = RefineSftRecord {
            id: "r1".into(),
            messages: vec![ChatMessage::user("a"), ChatMessage::assistant("b"), ChatMessage::user("c")],
        };
        let dir = tempfile::tempdir().unwrap();
        let err = emit(&[bad], &dir.path().join("r.jsonl"), None).unwrap_err();
        assert!(matches!(err, DatasetError::SchemaViolation { ref id, field: "messages", .. } if id == "r1"));
    }

    #[test]
    fn roundtrip_detects_parse_errors_and_permuted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let recs: Vec<_> = (0..3).map(|i| actor_sft(format!("a{i}"), "Say hi.", "Hi!")).collect();
        emit(&recs, &path, None).unwrap();
        let ok = validate_roundtrip(&path, Schema::ActorSft).unwrap();
        assert!(ok.byte_equal && ok.divergent_lines.is_empty());
        assert_eq!(ok.records, 3);

        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = "{\"id\": \"a1\", \"messages\": [".into();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = validate_roundtrip(&path, Schema::ActorSft).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 2, .. }));

        lines[1] =
            r#"{"messages":[{"content":"Say hi.","role":"user"},{"content":"Hi!","role":"assistant"}],"id":"a1"}"#
                .into();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let rep = validate_roundtrip(&path, Schema::ActorSft).unwrap();
        assert_eq!(rep.first_divergence(), Some(2));
        assert!(!rep.byte_equal);
    }

    #[test]
    fn judge_records_parse_back() {
        let t = JudgeTemplate::default();
        for label in [Label::Follows, Label::Violates] {
            let r = judge_sft(&t, "p/3", &jrec(label, 3)).unwrap();
            let parsed = parse_judgment(&r.messages[1].content, &t.grammar).unwrap();
            assert_eq!(parsed.label, label);
        }
    }

    #[test]
    fn balancing() {
        let t = JudgeTemplate::default();
        let pool: Vec<_> = (0..200)
            .map(|i| {
                judge_sft(&t, format!("p/{i}"), &jrec(if i % 5 < 3 { Label::Follows } else { Label::Violates }, i))
                    .unwrap()
            })
            .collect();
        let (kept, rep) = balance_judgments(pool.clone(), 4);
        assert_eq!((rep.positives_in, rep.negatives_in), (120, 80));
        assert_eq!((rep.positives, rep.negatives), (80, 80));
        let ids: Vec<usize> = kept.iter().map(|r| r.id.rsplit('/').next().unwrap().parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(balance_judgments(pool, 4).0, kept);

        let even: Vec<_> = (0..100)
            .map(|i| {
                judge_sft(&t, format!("p/{i}"), &jrec(if i < 50 { Label::Follows } else { Label::Violates }, i))
                    .unwrap()
            })
            .collect();
        assert_eq!(balance_judgments(even.clone(), 0).0, even);

        let onesided: Vec<_> =
            (0..100).map(|i| judge_sft(&t, format!("p/{i}"), &jrec(Label::Follows, i)).unwrap()).collect();
        let (kept, rep) = balance_judgments(onesided, 0);
        assert!(kept.is_empty());
        assert_eq!(rep.warning, Some(BalanceWarning::EmptyClass { label: Label::Violates, other: 100 }));
    }

    #[test]
    fn splits() {
        let ids: Vec<u32> = (0..1000).collect();
        let s = split_corpus(&ids, &[("actor", 300), ("refiner", 200)], 1).unwrap();
        assert_eq!(s.get("actor").unwrap().len(), 300);
        assert_eq!(s.overflow.len(), 500);
        let all: HashSet<u32> =
            s.partitions.iter().flat_map(|p| p.items.iter().copied()).chain(s.overflow.iter().copied()).collect();
        assert_eq!(all.len(), 1000);
        assert_eq!(split_corpus(&ids, &[("actor", 300), ("refiner", 200)], 1).unwrap(), s);
        assert!(matches!(
            split_corpus(&ids, &[("a", 900), ("b", 101)], 1),
            Err(DatasetError::OverAllocated { requested: 1001, available: 1000 })
        ));
    }
}
