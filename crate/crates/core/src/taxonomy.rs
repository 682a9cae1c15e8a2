//! Seed filtering and constraint-driven prompt evolution.
//!
//! Seeds pass a streaming filter (length bounds, blocked keywords, and a
//! word 4-gram Jaccard check against a reservoir of earlier admissions).
//! Each admitted seed is then rewritten by a model so that it carries one
//! main constraint and a few added ones drawn from a [`ConstraintTaxonomy`],
//! and the rewrite is checked for conflicting constraints.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{generate, Backend, ChatMessage, GatewayError, GenerationRequest, Task};
use crate::model::{GenerationParams, Origin, Prompt};
use crate::seed::{self, Rng};
use crate::template::fill_slots;

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("taxonomy document: {0}")]
    Parse(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("taxonomy has {available} entries, {needed} needed")]
    InsufficientTaxonomy { needed: usize, available: usize },
    #[error("n_extra must be >= 1")]
    NoExtraConstraints,
    #[error("invalid seed filter rules: {0}")]
    InvalidRules(String),
    #[error("template lacks required slot {{{0}}}")]
    MissingSlot(String),
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("no VALID/INVALID verdict after re-asking; last reply: {0:?}")]
    UnparseableVerdict(String),
    #[error("prompt was already validated")]
    AlreadyValidated,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl TaxonomyError {
    pub fn class(&self) -> &'static str {
        match self {
            TaxonomyError::EmptyCompletion => "empty_completion",
            TaxonomyError::UnparseableVerdict(_) => "unparseable_verdict",
            TaxonomyError::Gateway(_) => "transport",
            _ => "config",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintType {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintCategory {
    pub name: String,
    pub constraints: Vec<ConstraintType>,
}

/// Constraint families, each a list of named constraint types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTaxonomy {
    categories: Vec<ConstraintCategory>,
}

/// One drawn constraint together with its family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub category: String,
    pub name: String,
    pub description: String,
}

impl ConstraintTaxonomy {
    pub fn new(categories: Vec<ConstraintCategory>) -> Result<Self, TaxonomyError> {
        let t = Self { categories };
        t.validate()?;
        Ok(t)
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let t: Self = serde_json::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    /// The bundled illustrative taxonomy.
    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.categories.len() < 2 {
            return Err(TaxonomyError::InvalidTaxonomy("at least two categories are required".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.name.as_str()) {
                return Err(TaxonomyError::InvalidTaxonomy(format!("duplicate category {:?}", c.name)));
            }
            if c.constraints.is_empty() {
                return Err(TaxonomyError::InvalidTaxonomy(format!("category {:?} is empty", c.name)));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> &[ConstraintCategory] {
        &self.categories
    }

    pub fn entries(&self) -> Vec<TaxonomyEntry> {
        self.categories
            .iter()
            .flat_map(|c| {
                c.constraints.iter().map(|t| TaxonomyEntry {
                    category: c.name.clone(),
                    name: t.name.clone(),
                    description: t.description.clone(),
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.categories.iter().map(|c| c.constraints.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws the main constraint (uniform category, then uniform entry) and
/// `n_extra` further entries without replacement from the rest.
pub fn sample_constraints(
    taxonomy: &ConstraintTaxonomy,
    rng: &mut Rng,
    n_extra: usize,
) -> Result<(TaxonomyEntry, Vec<TaxonomyEntry>), TaxonomyError> {
    if n_extra == 0 {
        return Err(TaxonomyError::NoExtraConstraints);
    }
    let available = taxonomy.len();
    if available < n_extra + 1 {
        return Err(TaxonomyError::InsufficientTaxonomy { needed: n_extra + 1, available });
    }
    let cats = &taxonomy.categories;
    let ci = rng.random_range(0..cats.len());
    let ei = rng.random_range(0..cats[ci].constraints.len());
    let flat_index = cats[..ci].iter().map(|c| c.constraints.len()).sum::<usize>() + ei;
    let mut entries = taxonomy.entries();
    let main = entries.remove(flat_index);
    let extras = index::sample(rng, entries.len(), n_extra).into_iter().map(|i| entries[i].clone()).collect();
    Ok((main, extras))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedFilterRules {
    pub min_chars: usize,
    pub max_chars: usize,
    pub blocked_keywords: Vec<String>,
    /// Recorded on admitted seeds but not grounds for rejection.
    pub flag_keywords: Vec<String>,
    pub self_sim_threshold: f64,
    pub reservoir_size: usize,
    pub seed: u64,
}

impl Default for SeedFilterRules {
    fn default() -> Self {
        Self {
            min_chars: 10,
            max_chars: 4000,
            blocked_keywords: vec!["```".into(), "http://".into(), "https://".into()],
            flag_keywords: Vec::new(),
            self_sim_threshold: 0.8,
            reservoir_size: 1000,
            seed: 0,
        }
    }
}

impl SeedFilterRules {
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.min_chars >= self.max_chars {
            return Err(TaxonomyError::InvalidRules("min_chars must be below max_chars".into()));
        }
        if !(0.0..=1.0).contains(&self.self_sim_threshold) {
            return Err(TaxonomyError::InvalidRules("self_sim_threshold must lie in [0, 1]".into()));
        }
        if self.reservoir_size == 0 {
            return Err(TaxonomyError::InvalidRules("reservoir_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPrompt {
    pub prompt: Prompt,
    pub length_chars: usize,
    pub flagged_keywords: Vec<String>,
}

/// Lowercased word 4-grams; texts shorter than four words form one gram.
fn word_ngrams(text: &str) -> HashSet<Vec<String>> {
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return HashSet::new();
    }
    if words.len() < 4 {
        return HashSet::from([words]);
    }
    words.windows(4).map(<[String]>::to_vec).collect()
}

/// Jaccard similarity of the word 4-gram sets of two texts.
pub fn ngram_jaccard(a: &str, b: &str) -> f64 {
    jaccard(&word_ngrams(a), &word_ngrams(b))
}

fn jaccard(a: &HashSet<Vec<String>>, b: &HashSet<Vec<String>>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Streaming seed filter. See [`filter_seeds`].
pub struct SeedFilter<I> {
    inner: I,
    rules: SeedFilterRules,
    reservoir: Vec<HashSet<Vec<String>>>,
    admitted: usize,
    rng: Rng,
}

impl<I: Iterator<Item = Prompt>> SeedFilter<I> {
    fn admit(&mut self, prompt: &Prompt) -> bool {
        let chars = prompt.text.chars().count();
        if chars < self.rules.min_chars || chars > self.rules.max_chars {
            return false;
        }
        let lower = prompt.text.to_lowercase();
        if self.rules.blocked_keywords.iter().any(|k| lower.contains(&k.to_lowercase())) {
            return false;
        }
        let grams = word_ngrams(&prompt.text);
        if self.reservoir.iter().any(|r| jaccard(&grams, r) >= self.rules.self_sim_threshold) {
            return false;
        }
        // Reservoir sampling over admitted seeds; the rng only advances on
        // admissions, so re-filtering admitted output replays the same state.
        self.admitted += 1;
        if self.reservoir.len() < self.rules.reservoir_size {
            self.reservoir.push(grams);
        } else {
            let j = self.rng.random_range(0..self.admitted);
            if j < self.rules.reservoir_size {
                self.reservoir[j] = grams;
            }
        }
        true
    }
}

impl<I: Iterator<Item = Prompt>> Iterator for SeedFilter<I> {
    type Item = SeedPrompt;

    fn next(&mut self) -> Option<SeedPrompt> {
        loop {
            let prompt = self.inner.next()?;
            if self.admit(&prompt) {
                let lower = prompt.text.to_lowercase();
                let flagged_keywords =
                    self.rules.flag_keywords.iter().filter(|k| lower.contains(&k.to_lowercase())).cloned().collect();
                return Some(SeedPrompt {
                    length_chars: prompt.text.chars().count(),
                    prompt: Prompt { origin: Origin::Seed, ..prompt },
                    flagged_keywords,
                });
            }
        }
    }
}

/// Filters a prompt stream. Admitted prompts are within the length bounds,
/// contain no blocked keyword, and are less similar than the threshold to
/// every seed currently in the reservoir.
pub fn filter_seeds<I>(candidates: I, rules: SeedFilterRules) -> Result<SeedFilter<I::IntoIter>, TaxonomyError>
where
    I: IntoIterator<Item = Prompt>,
{
    rules.validate()?;
    Ok(SeedFilter {
        inner: candidates.into_iter(),
        rng: seed::rng_for(rules.seed, "seed-filter"),
        rules,
        reservoir: Vec::new(),
        admitted: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Invalid,
    Unchecked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolvedPrompt {
    pub seed: SeedPrompt,
    pub main_constraint: TaxonomyEntry,
    pub added_constraints: Vec<TaxonomyEntry>,
    pub text: String,
    pub validity: Validity,
}

impl EvolvedPrompt {
    pub fn constraints(&self) -> impl Iterator<Item = &TaxonomyEntry> {
        std::iter::once(&self.main_constraint).chain(&self.added_constraints)
    }

    pub fn to_prompt(&self) -> Prompt {
        Prompt::new(format!("{}-evo", self.seed.prompt.id), self.text.clone(), Origin::Evolved)
    }
}

pub const DEFAULT_EVOLVE_TEMPLATE: &str = "\
You are given an instruction. Rewrite it into a more complex instruction \
that keeps the original intent and adds the constraints listed below. The \
first constraint is the main one. Reply with the rewritten instruction only.

Original instruction:
{seed}

Constraints:
{constraints}";

pub const DEFAULT_VALIDATE_TEMPLATE: &str = "\
Check the following instruction. Decide whether its constraints conflict \
with each other or describe an unreasonable scenario. Reply with VALID if \
the instruction can be followed, or INVALID followed by a short reason.

Instruction:
{prompt}";

/// Settings for evolving and validating prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionSettings {
    pub evolve_template: String,
    pub validate_template: String,
    pub n_extra: usize,
    pub params: GenerationParams,
    pub seed: u64,
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        Self {
            evolve_template: DEFAULT_EVOLVE_TEMPLATE.into(),
            validate_template: DEFAULT_VALIDATE_TEMPLATE.into(),
            n_extra: 2,
            params: GenerationParams::new(0.7, 0.95, 1024),
            seed: 0,
        }
    }
}

fn render_constraints(main: &TaxonomyEntry, added: &[TaxonomyEntry]) -> String {
    std::iter::once(main)
        .chain(added)
        .map(|c| format!("- {} ({}): {}", c.name, c.category, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the model to rewrite `seed` under the given constraints.
pub fn evolve_prompt(
    seed_prompt: &SeedPrompt,
    main: &TaxonomyEntry,
    added: &[TaxonomyEntry],
    backend: &dyn Backend,
    settings: &EvolutionSettings,
    seed: u64,
) -> Result<EvolvedPrompt, TaxonomyError> {
    let text = fill_slots(
        &settings.evolve_template,
        &[(&["seed"], &seed_prompt.prompt.text), (&["constraints"], &render_constraints(main, added))],
    )
    .map_err(TaxonomyError::MissingSlot)?;
    let constraints = std::iter::once(main).chain(added).map(|c| (c.name.clone(), c.description.clone())).collect();
    let request = GenerationRequest::new(vec![ChatMessage::user(text)], 1, settings.params)
        .with_seed(seed)
        .with_task(Task::Evolve { seed: seed_prompt.prompt.text.clone(), constraints });
    let out = generate(backend, &request)?.remove(0);
    let out = out.trim();
    if out.is_empty() {
        return Err(TaxonomyError::EmptyCompletion);
    }
    Ok(EvolvedPrompt {
        seed: seed_prompt.clone(),
        main_constraint: main.clone(),
        added_constraints: added.to_vec(),
        text: out.to_string(),
        validity: Validity::Unchecked,
    })
}

/// Reads a VALID/INVALID verdict from the first line that starts with one.
pub fn parse_verdict(text: &str) -> Option<Validity> {
    text.lines().find_map(|line| {
        let head = line.trim_start_matches(|c: char| !c.is_alphanumeric()).to_uppercase();
        if head.starts_with("INVALID") {
            Some(Validity::Invalid)
        } else if head.starts_with("VALID") {
            Some(Validity::Valid)
        } else {
            None
        }
    })
}

/// Asks whether the evolved prompt is coherent. An unparseable reply is
/// asked once more before giving up.
pub fn validate_prompt(
    evolved: &EvolvedPrompt,
    backend: &dyn Backend,
    settings: &EvolutionSettings,
    seed: u64,
) -> Result<EvolvedPrompt, TaxonomyError> {
    if evolved.validity != Validity::Unchecked {
        return Err(TaxonomyError::AlreadyValidated);
    }
    let text =
        fill_slots(&settings.validate_template, &[(&["prompt"], &evolved.text)]).map_err(TaxonomyError::MissingSlot)?;
    let mut last = String::new();
    for round in 0..2 {
        let request = GenerationRequest::new(vec![ChatMessage::user(text.clone())], 1, settings.params)
            .with_seed(seed::derive(seed, &format!("validate/{round}")))
            .with_task(Task::Validate { prompt: evolved.text.clone() });
        last = generate(backend, &request)?.remove(0);
        if let Some(validity) = parse_verdict(&last) {
            return Ok(EvolvedPrompt { validity, ..evolved.clone() });
        }
    }
    Err(TaxonomyError::UnparseableVerdict(last))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvolutionReport {
    /// Every prompt that was evolved and validated, valid or not.
    pub evolved: Vec<EvolvedPrompt>,
    pub dropped_invalid: usize,
    pub errors: BTreeMap<String, usize>,
}

impl EvolutionReport {
    /// Valid prompts, in seed order.
    pub fn prompts(&self) -> Vec<Prompt> {
        self.evolved.iter().filter(|e| e.validity == Validity::Valid).map(EvolvedPrompt::to_prompt).collect()
    }
}

/// Samples constraints for, evolves, and validates each seed in parallel.
/// Invalid prompts are kept in the report but counted as dropped.
pub fn evolve_all(
    seeds: &[SeedPrompt],
    taxonomy: &ConstraintTaxonomy,
    backend: &dyn Backend,
    settings: &EvolutionSettings,
) -> Result<EvolutionReport, TaxonomyError> {
    if settings.n_extra == 0 {
        return Err(TaxonomyError::NoExtraConstraints);
    }
    let results: Vec<Result<EvolvedPrompt, TaxonomyError>> = seeds
        .par_iter()
        .map(|s| {
            let id = &s.prompt.id;
            let mut rng = seed::rng_for(settings.seed, &format!("{id}/constraints"));
            let (main, added) = sample_constraints(taxonomy, &mut rng, settings.n_extra)?;
            let evolved = evolve_prompt(
                s,
                &main,
                &added,
                backend,
                settings,
                seed::derive(settings.seed, &format!("{id}/evolve")),
            )?;
            validate_prompt(&evolved, backend, settings, seed::derive(settings.seed, &format!("{id}/validate")))
        })
        .collect();
    let mut report = EvolutionReport::default();
    for r in results {
        match r {
            Ok(e) => {
                report.dropped_invalid += (e.validity == Validity::Invalid) as usize;
                report.evolved.push(e);
            }
            Err(e @ (TaxonomyError::InsufficientTaxonomy { .. } | TaxonomyError::MissingSlot(_))) => return Err(e),
            Err(e) => *report.errors.entry(e.class().to_string()).or_default() += 1,
        }
    }
    Ok(report)
}
