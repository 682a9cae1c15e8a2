//! Verifiable synthetic tasks.
//!
//! Each [`SyntheticSpec`] renders to a canonical instruction and has a
//! rule-based verifier, so a scripted actor, judge, and refiner can be
//! simulated against exact ground truth. The pair constructors build the
//! two preference-pair styles compared in the experiments: *interfering*
//! pairs, whose positive differs from the negative in ways irrelevant to
//! the constraint, and *refined* pairs, which differ only where the
//! constraint is concerned.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{SuccessProfile, TaskWorld};
use crate::model::{Judgment, Label, Origin, Producer, Prompt, Response};
use crate::seed::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("pair construction is not defined for {0} tasks")]
    UnsupportedSpec(&'static str),
    #[error("similarity of empty text is undefined")]
    EmptyText,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    CharSeq { letter: char, count: u32 },
    StartEnd { s1: String, s2: String },
    KeywordFreq { word: String, count: u32 },
    WordCount { min: u32, max: u32 },
}

const CHAR_PREFIX: &str = "Generate exactly ";
const CHAR_MID: &str = " copies of the letter '";
const CHAR_SUFFIX: &str = "' and nothing else. There are no restrictions on letter case.";
const STORY_PREFIX: &str = "Write a short story that starts with the sentence \"";
const STORY_MID: &str = "\" and ends with the sentence \"";
const STORY_SUFFIX: &str = "\".";
const KEYWORD_PREFIX: &str = "Write a short paragraph in which the word \"";
const KEYWORD_MID: &str = "\" appears exactly ";
const KEYWORD_SUFFIX: &str = " times.";
const WORDS_PREFIX: &str = "Write a response containing between ";
const WORDS_MID: &str = " and ";
const WORDS_SUFFIX: &str = " words.";

impl SyntheticSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SyntheticSpec::CharSeq { .. } => "char_seq",
            SyntheticSpec::StartEnd { .. } => "start_end",
            SyntheticSpec::KeywordFreq { .. } => "keyword_freq",
            SyntheticSpec::WordCount { .. } => "word_count",
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        match self {
            SyntheticSpec::CharSeq { letter, count } => {
                if !letter.is_alphabetic() {
                    return bad("letter must be alphabetic");
                }
                if *count < 1 {
                    return bad("count must be >= 1");
                }
            }
            SyntheticSpec::StartEnd { s1, s2 } => {
                if s1.trim().is_empty() || s2.trim().is_empty() {
                    return bad("start and end sentences must be non-empty");
                }
                if s1.contains('"') || s2.contains('"') {
                    return bad("sentences may not contain double quotes");
                }
            }
            SyntheticSpec::KeywordFreq { word, count } => {
                if word.is_empty() || !word.chars().all(char::is_alphanumeric) {
                    return bad("keyword must be a single alphanumeric word");
                }
                if *count < 1 {
                    return bad("count must be >= 1");
                }
            }
            SyntheticSpec::WordCount { min, max } => {
                if min > max {
                    return bad("min must not exceed max");
                }
            }
        }
        Ok(())
    }

    pub fn instruction(&self) -> String {
        match self {
            SyntheticSpec::CharSeq { letter, count } => format!("{CHAR_PREFIX}{count}{CHAR_MID}{letter}{CHAR_SUFFIX}"),
            SyntheticSpec::StartEnd { s1, s2 } => format!("{STORY_PREFIX}{s1}{STORY_MID}{s2}{STORY_SUFFIX}"),
            SyntheticSpec::KeywordFreq { word, count } => {
                format!("{KEYWORD_PREFIX}{word}{KEYWORD_MID}{count}{KEYWORD_SUFFIX}")
            }
            SyntheticSpec::WordCount { min, max } => format!("{WORDS_PREFIX}{min}{WORDS_MID}{max}{WORDS_SUFFIX}"),
        }
    }

    /// Inverse of [`SyntheticSpec::instruction`].
    pub fn parse_instruction(text: &str) -> Option<Self> {
        if let Some(rest) = text.strip_prefix(CHAR_PREFIX) {
            let (count, rest) = rest.split_once(CHAR_MID)?;
            let mut chars = rest.chars();
            let letter = chars.next()?;
            if chars.as_str() != CHAR_SUFFIX {
                return None;
            }
            return Some(SyntheticSpec::CharSeq { letter, count: count.parse().ok()? });
        }
        if let Some(rest) = text.strip_prefix(STORY_PREFIX) {
            let (s1, rest) = rest.split_once(STORY_MID)?;
            let s2 = rest.strip_suffix(STORY_SUFFIX)?;
            return Some(SyntheticSpec::StartEnd { s1: s1.into(), s2: s2.into() });
        }
        if let Some(rest) = text.strip_prefix(KEYWORD_PREFIX) {
            let (word, rest) = rest.split_once(KEYWORD_MID)?;
            let count = rest.strip_suffix(KEYWORD_SUFFIX)?;
            return Some(SyntheticSpec::KeywordFreq { word: word.into(), count: count.parse().ok()? });
        }
        if let Some(rest) = text.strip_prefix(WORDS_PREFIX) {
            let (min, rest) = rest.split_once(WORDS_MID)?;
            let max = rest.strip_suffix(WORDS_SUFFIX)?;
            return Some(SyntheticSpec::WordCount { min: min.parse().ok()?, max: max.parse().ok()? });
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(String),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        *self == Verdict::Pass
    }
}

/// Byte spans of case-insensitive whole-word matches, where words are
/// maximal alphanumeric runs.
fn word_spans(text: &str, word: &str) -> Vec<(usize, usize)> {
    let target = word.to_lowercase();
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if text[s..i].to_lowercase() == target {
                    spans.push((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    spans
}

pub fn verify(spec: &SyntheticSpec, response: &str) -> Verdict {
    match spec {
        SyntheticSpec::CharSeq { letter, count } => {
            let body: Vec<char> = response.chars().filter(|c| !c.is_whitespace()).collect();
            let target = letter.to_lowercase().collect::<String>();
            if let Some(c) = body.iter().find(|c| c.to_lowercase().collect::<String>() != target) {
                return Verdict::Fail(format!("contains {c:?}, expected only {letter:?}"));
            }
            if body.len() != *count as usize {
                return Verdict::Fail(format!("count {} != {count}", body.len()));
            }
            Verdict::Pass
        }
        SyntheticSpec::StartEnd { s1, s2 } => {
            let t = response.trim();
            if !t.starts_with(s1.as_str()) {
                Verdict::Fail("does not start with the required sentence".into())
            } else if !t.ends_with(s2.as_str()) {
                Verdict::Fail("does not end with the required sentence".into())
            } else {
                Verdict::Pass
            }
        }
        SyntheticSpec::KeywordFreq { word, count } => {
            let found = word_spans(response, word).len();
            if found == *count as usize {
                Verdict::Pass
            } else {
                Verdict::Fail(format!("keyword {word:?} appears {found} times, expected {count}"))
            }
        }
        SyntheticSpec::WordCount { min, max } => {
            let n = response.split_whitespace().count() as u32;
            if (*min..=*max).contains(&n) {
                Verdict::Pass
            } else {
                Verdict::Fail(format!("{n} words, expected {min}..={max}"))
            }
        }
    }
}

/// A verifier result as a single-vote judgment.
pub fn oracle_judgment(spec: &SyntheticSpec, response: &str) -> Judgment {
    let (label, why) = match verify(spec, response) {
        Verdict::Pass => (Label::Follows, "all verifiable constraints hold".to_string()),
        Verdict::Fail(reason) => (Label::Violates, reason),
    };
    Judgment::single(label, why).expect("verifier explanations are non-empty")
}

const STORY_BODIES: &[&str] = &[
    "The lighthouse keeper counted ships every evening and wrote their names in a leather book. One winter a vessel arrived that appeared in no registry, its sails stitched from old maps.",
    "Mira planted a single sunflower on the roof of the apartment block. By August the whole street climbed the fire escape to watch it turn toward the evening light.",
    "A clockmaker in the valley built a watch that ran backwards by one second each day. Nobody noticed until the mayor missed his own wedding by exactly a year.",
    "The train to the coast stopped in a field of barley for no reason anyone could explain. Passengers stepped down, shared bread with strangers, and forgot they had been in a hurry.",
    "Every lantern in the market went dark at once, and the vendors kept trading by the glow of their phones. A child sold the last basket of plums by describing their color aloud.",
    "Grandfather kept a jar of buttons from every coat he had ever owned. When the jar finally tipped over, each button rolled toward a different memory on the kitchen floor.",
    "The robot gardener refused to cut the weeds because they had started to flower. Its owners argued for a week and then quietly bought a wider fence.",
    "Snow fell on the desert town for the first time in ninety years. The school closed, the bakery ran out of cinnamon, and the old well froze into a perfect mirror.",
    "A fisherman hauled up a bottle holding a letter addressed to his own daughter. The handwriting was hers, though she was only six and had never seen the sea.",
    "The violinist practiced on the subway platform until the trains began to arrive in rhythm. Commuters swore the morning ran smoother whenever she played in A minor.",
    "Two rival bakers discovered they had been using the same secret recipe for decades. They merged their shops and argued instead about the shape of the loaves.",
    "An astronomer named a faint comet after her cat, who had knocked the telescope toward it. The cat received fan mail for the rest of its long and indifferent life.",
];

const OPENINGS: &[&str] = &[
    "It was the quietest morning the village had ever known.",
    "Nobody expected the storm to bring good news.",
    "The letter arrived three days before it was written.",
    "On the last day of summer, the river changed direction.",
    "Everyone in town agreed that the bridge was haunted.",
    "My sister always said that maps were a kind of promise.",
];

const CLOSINGS: &[&str] = &[
    "And from that day on, the door was never locked again.",
    "They never spoke of it, but they always remembered.",
    "The morning light found them laughing on the hill.",
    "Somewhere far away, a bell rang exactly once.",
    "That was how the quiet finally ended.",
    "In the end, the map had been right all along.",
];

const FILLER_WORDS: &[&str] = &[
    "river", "stone", "quiet", "morning", "lantern", "garden", "window", "paper", "silver", "harbor", "meadow",
    "thread", "candle", "orchard", "valley", "whistle", "copper", "season", "ladder", "compass",
];

const KEYWORDS: &[&str] = &["apple", "light", "ocean", "signal", "forest", "engine"];

fn story_body(rng: &mut Rng) -> &'static str {
    STORY_BODIES.choose(rng).expect("corpus is non-empty")
}

fn filler(n: usize, avoid: &str, rng: &mut Rng) -> Vec<&'static str> {
    let pool: Vec<&str> = FILLER_WORDS.iter().copied().filter(|w| !w.eq_ignore_ascii_case(avoid)).collect();
    (0..n).map(|_| *pool.choose(rng).expect("filler pool is non-empty")).collect()
}

fn letters(letter: char, n: usize, upper: bool) -> String {
    let c: String = if upper { letter.to_uppercase().collect() } else { letter.to_lowercase().collect() };
    c.repeat(n)
}

fn wrong_count(count: u32, rng: &mut Rng) -> u32 {
    let delta = rng.random_range(1..=3);
    if count > delta && rng.random::<bool>() {
        count - delta
    } else {
        count + delta
    }
}

fn keyword_paragraph(word: &str, occurrences: u32, rng: &mut Rng) -> String {
    let mut sentences = Vec::new();
    for _ in 0..occurrences {
        let w = filler(3, word, rng);
        sentences.push(format!("The {} {} near the {word} felt {}.", w[0], w[1], w[2]));
    }
    let w = filler(4, word, rng);
    sentences.push(format!("A {} {} kept the {} {}.", w[0], w[1], w[2], w[3]));
    sentences.join(" ")
}

/// Noun phrase used when topping up keyword counts.
fn keyword_sentence(word: &str) -> String {
    format!(" Another {word} appeared.")
}

/// A response that passes or fails `spec` by construction.
pub fn respond_text(spec: &SyntheticSpec, pass: bool, rng: &mut Rng) -> String {
    match spec {
        SyntheticSpec::CharSeq { letter, count } => {
            let n = if pass { *count } else { wrong_count(*count, rng) };
            letters(*letter, n as usize, false)
        }
        SyntheticSpec::StartEnd { s1, s2 } => {
            let body = story_body(rng);
            if pass {
                format!("{s1} {body} {s2}")
            } else {
                match rng.random_range(0..3) {
                    0 => format!("{s1} {body}"),
                    1 => format!("{body} {s2}"),
                    _ => body.to_string(),
                }
            }
        }
        SyntheticSpec::KeywordFreq { word, count } => {
            let n = if pass { *count } else { wrong_count(*count, rng) };
            keyword_paragraph(word, n, rng)
        }
        SyntheticSpec::WordCount { min, max } => {
            let n = if pass {
                rng.random_range(*min..=*max)
            } else if *min > 1 && rng.random::<bool>() {
                rng.random_range(1..*min)
            } else {
                max + rng.random_range(1..=5)
            };
            filler(n as usize, "", rng).join(" ")
        }
    }
}

fn adjust_keyword(text: &str, word: &str, target: u32) -> String {
    let spans = word_spans(text, word);
    let have = spans.len() as u32;
    let mut out = text.to_string();
    if have > target {
        for (s, e) in spans.iter().rev().take((have - target) as usize) {
            let filler = if word.eq_ignore_ascii_case("thing") { "item" } else { "thing" };
            out.replace_range(*s..*e, filler);
        }
    } else {
        for _ in have..target {
            out.push_str(&keyword_sentence(word));
        }
    }
    out
}

fn resize_words(text: &str, target: usize, rng: &mut Rng) -> String {
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    if words.len() > target {
        words.truncate(target);
    } else {
        let extra = filler(target - words.len(), "", rng);
        words.extend(extra.into_iter().map(str::to_string));
    }
    words.join(" ")
}

/// A minimal revision of `response`: fixes the violated constraint when
/// `success`, otherwise edits it into another violating response.
pub fn refine_text(spec: &SyntheticSpec, response: &str, success: bool, rng: &mut Rng) -> String {
    match spec {
        SyntheticSpec::CharSeq { letter, count } => {
            let upper = response.chars().any(char::is_uppercase) && !response.chars().any(char::is_lowercase);
            let n = if success {
                *count
            } else {
                let current = response.chars().filter(|c| !c.is_whitespace()).count() as u32;
                let mut n = wrong_count(*count, rng);
                if n == current {
                    n = count + 4;
                }
                n
            };
            letters(*letter, n as usize, upper)
        }
        SyntheticSpec::StartEnd { s1, s2 } => {
            let t = response.trim();
            let core = t.strip_prefix(s1.as_str()).unwrap_or(t).trim();
            let core = core.strip_suffix(s2.as_str()).unwrap_or(core).trim();
            let core = if core.is_empty() { story_body(rng) } else { core };
            if success {
                format!("{s1} {core} {s2}")
            } else if rng.random::<bool>() {
                format!("{s1} {core}")
            } else {
                format!("{core} {s2}")
            }
        }
        SyntheticSpec::KeywordFreq { word, count } => {
            let target = if success { *count } else { count + 1 };
            adjust_keyword(response, word, target)
        }
        SyntheticSpec::WordCount { min, max } => {
            let n = response.split_whitespace().count() as u32;
            let target = if success {
                n.clamp(*min, *max)
            } else if n > *max || n < *min {
                n
            } else {
                max + 1
            };
            resize_words(response, target as usize, rng)
        }
    }
}

/// Draws a pass/fail response according to `profile` at `attempt`.
pub fn scripted_actor_respond(spec: &SyntheticSpec, profile: &SuccessProfile, attempt: u64, rng: &mut Rng) -> Response {
    let pass = profile.draw(attempt, rng);
    Response::new(respond_text(spec, pass, rng), Producer::Scripted, attempt as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Interfering,
    Refined,
}

/// Returns `(negative, positive)`.
pub fn build_pair(spec: &SyntheticSpec, kind: PairKind, rng: &mut Rng) -> Result<(String, String), SynthError> {
    match spec {
        SyntheticSpec::CharSeq { letter, count } => {
            let wrong = if *count > 1 { count - 1 } else { count + 1 };
            let negative = letters(*letter, wrong as usize, false);
            let positive = match kind {
                PairKind::Interfering => letters(*letter, *count as usize, true),
                PairKind::Refined => letters(*letter, *count as usize, false),
            };
            Ok((negative, positive))
        }
        SyntheticSpec::StartEnd { s1, s2 } => {
            let idx = rng.random_range(0..STORY_BODIES.len());
            let body = STORY_BODIES[idx];
            let negative = if rng.random::<bool>() { format!("{s1} {body}") } else { format!("{body} {s2}") };
            let positive = match kind {
                PairKind::Refined => format!("{s1} {body} {s2}"),
                PairKind::Interfering => {
                    let other = (idx + rng.random_range(1..STORY_BODIES.len())) % STORY_BODIES.len();
                    format!("{s1} {} {s2}", STORY_BODIES[other])
                }
            };
            Ok((negative, positive))
        }
        other => Err(SynthError::UnsupportedSpec(other.kind_name())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(pub f64);

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ca in a {
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `2 * LCS(a, b) / (|a| + |b|)` over characters.
pub fn pair_similarity(a: &str, b: &str) -> Result<SimilarityScore, SynthError> {
    if a.is_empty() || b.is_empty() {
        return Err(SynthError::EmptyText);
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let lcs = lcs_len(&a, &b);
    Ok(SimilarityScore(2.0 * lcs as f64 / (a.len() + b.len()) as f64))
}

/// A random synthetic task; kinds are equally likely.
pub fn random_spec(rng: &mut Rng) -> SyntheticSpec {
    match rng.random_range(0..4) {
        0 => SyntheticSpec::CharSeq {
            letter: (b'a' + rng.random_range(0..26u8)) as char,
            count: rng.random_range(3..=20),
        },
        1 => SyntheticSpec::StartEnd {
            s1: OPENINGS.choose(rng).unwrap().to_string(),
            s2: CLOSINGS.choose(rng).unwrap().to_string(),
        },
        2 => SyntheticSpec::KeywordFreq {
            word: KEYWORDS.choose(rng).unwrap().to_string(),
            count: rng.random_range(1..=4),
        },
        _ => {
            let min = rng.random_range(5..=30);
            SyntheticSpec::WordCount { min, max: min + rng.random_range(0..=20) }
        }
    }
}

/// A random start/end task.
pub fn random_start_end(rng: &mut Rng) -> SyntheticSpec {
    SyntheticSpec::StartEnd {
        s1: OPENINGS.choose(rng).unwrap().to_string(),
        s2: CLOSINGS.choose(rng).unwrap().to_string(),
    }
}

/// `n` synthetic prompts with ids `syn-00000`, ... and their specs.
pub fn synthetic_prompts(n: usize, seed: u64) -> Vec<(Prompt, SyntheticSpec)> {
    let mut rng = seed::rng_for(seed, "synthetic-prompts");
    (0..n)
        .map(|i| {
            let spec = random_spec(&mut rng);
            (Prompt::new(format!("syn-{i:05}"), spec.instruction(), Origin::Synthetic), spec)
        })
        .collect()
}

/// Ground truth over canonical synthetic instructions.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticWorld;

impl TaskWorld for SyntheticWorld {
    fn respond(&self, instruction: &str, pass: bool, rng: &mut Rng) -> Option<String> {
        SyntheticSpec::parse_instruction(instruction).map(|s| respond_text(&s, pass, rng))
    }

    fn check(&self, instruction: &str, response: &str) -> Option<bool> {
        SyntheticSpec::parse_instruction(instruction).map(|s| verify(&s, response).passed())
    }

    fn refine(&self, instruction: &str, response: &str, success: bool, rng: &mut Rng) -> Option<String> {
        SyntheticSpec::parse_instruction(instruction).map(|s| refine_text(&s, response, success, rng))
    }
}
