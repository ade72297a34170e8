//! Tokenization, vocabulary, dataset ingestion and the synthetic sentiment corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

/// How a MASK token is rendered by [`detokenize`].
pub const MASK_RENDERING: &str = "[M]";

const VOCAB_FORMAT: &str = "dcls-vocab-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub text: String,
    pub label: String,
}

impl LabeledSample {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
        }
    }
}

/// Lowercases and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn normalize_text(text: &str) -> String {
    normalize_words(text).join(" ")
}

/// Token/id tables. Ids are laid out as the five specials, then one
/// label-prompt token per class (sorted class names), then corpus tokens in
/// lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    classes: Vec<String>,
    first_content: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabManifest {
    format: String,
    tokens: Vec<String>,
    specials: BTreeMap<String, u32>,
    labels: BTreeMap<String, u32>,
    classes: Vec<String>,
}

impl Vocab {
    pub const PAD_ID: u32 = 0;
    pub const MASK_ID: u32 = 1;
    pub const CLS_ID: u32 = 2;
    pub const SEP_ID: u32 = 3;
    pub const UNK_ID: u32 = 4;
    const NUM_SPECIALS: u32 = 5;

    fn from_parts(classes: Vec<String>, words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = [PAD, MASK, CLS, SEP, UNK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(classes.iter().map(|c| label_token_text(c)));
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let first_content = Self::NUM_SPECIALS + classes.len() as u32;
        Self {
            tokens,
            index,
            classes,
            first_content,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_id(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn class_name(&self, id: usize) -> &str {
        &self.classes[id]
    }

    pub fn label_token(&self, class_id: usize) -> u32 {
        assert!(class_id < self.classes.len(), "class id out of range");
        Self::NUM_SPECIALS + class_id as u32
    }

    pub fn is_label_token(&self, id: u32) -> bool {
        (Self::NUM_SPECIALS..self.first_content).contains(&id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < Self::NUM_SPECIALS
    }

    /// Ids a generator may emit: corpus tokens only.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        self.first_content..self.tokens.len() as u32
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::InvalidTokenId(id))
    }

    pub fn to_json(&self) -> Result<String> {
        let specials = [PAD, MASK, CLS, SEP, UNK]
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i as u32))
            .collect();
        let labels = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), self.label_token(i)))
            .collect();
        let manifest = VocabManifest {
            format: VOCAB_FORMAT.to_string(),
            tokens: self.tokens.clone(),
            specials,
            labels,
            classes: self.classes.clone(),
        };
        Ok(serde_json::to_string_pretty(&manifest)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: VocabManifest = serde_json::from_str(text)?;
        if manifest.format != VOCAB_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported vocab format '{}'",
                manifest.format
            )));
        }
        let skip = Self::NUM_SPECIALS as usize + manifest.classes.len();
        if manifest.tokens.len() < skip {
            return Err(Error::Checkpoint("vocab manifest truncated".into()));
        }
        let vocab = Self::from_parts(manifest.classes, manifest.tokens[skip..].to_vec());
        if vocab.tokens != manifest.tokens {
            return Err(Error::Checkpoint("vocab manifest inconsistent".into()));
        }
        Ok(vocab)
    }
}

fn label_token_text(class: &str) -> String {
    format!("<LBL_{class}>")
}

/// Builds the vocabulary. Tokens seen fewer than `min_count` times map to UNK.
pub fn build_vocab(samples: &[LabeledSample], min_count: usize) -> Result<Vocab> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if min_count == 0 {
        return Err(Error::Config("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut classes = BTreeSet::new();
    for s in samples {
        classes.insert(s.label.clone());
        for w in normalize_words(&s.text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<String> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .map(|(w, _)| w)
        .collect();
    words.sort();
    Ok(Vocab::from_parts(classes.into_iter().collect(), words))
}

/// Token ids framed as `[CLS] t1..tn [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<u32>,
    pub label: usize,
    pub maskable: Vec<bool>,
}

impl TokenizedSample {
    pub fn from_content(content: &[u32], label: usize) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(Vocab::CLS_ID);
        ids.extend_from_slice(content);
        ids.push(Vocab::SEP_ID);
        let mut maskable = vec![true; ids.len()];
        maskable[0] = false;
        *maskable.last_mut().unwrap() = false;
        Self {
            ids,
            label,
            maskable,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }

    /// Keeps at most `max_content` content tokens.
    pub fn truncated(&self, max_content: usize) -> Self {
        if self.content().len() <= max_content {
            return self.clone();
        }
        Self::from_content(&self.content()[..max_content], self.label)
    }
}

pub fn tokenize(vocab: &Vocab, sample: &LabeledSample) -> Result<TokenizedSample> {
    let words = normalize_words(&sample.text);
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let label = vocab.class_id(&sample.label)?;
    let content: Vec<u32> = words
        .iter()
        .map(|w| vocab.id(w).unwrap_or(Vocab::UNK_ID))
        .collect();
    Ok(TokenizedSample::from_content(&content, label))
}

pub fn tokenize_all(vocab: &Vocab, samples: &[LabeledSample]) -> Result<Vec<TokenizedSample>> {
    samples.iter().map(|s| tokenize(vocab, s)).collect()
}

/// Renders ids as text. Framing, padding and label-prompt tokens are dropped,
/// MASK renders as `[M]`.
pub fn detokenize(vocab: &Vocab, ids: &[u32]) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let token = vocab.token(id)?;
        match id {
            Vocab::PAD_ID | Vocab::CLS_ID | Vocab::SEP_ID => {}
            Vocab::MASK_ID => words.push(MASK_RENDERING),
            _ if vocab.is_label_token(id) => {}
            _ => words.push(token),
        }
    }
    Ok(words.join(" "))
}

#[derive(Deserialize)]
struct JsonlLine {
    text: Option<serde_json::Value>,
    label: Option<serde_json::Value>,
}

/// Parses JSONL text (one `{"text","label"}` object per line). Blank lines are skipped.
pub fn parse_jsonl(content: &str) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Jsonl {
            line: line_no,
            message,
        };
        let parsed: JsonlLine =
            serde_json::from_str(line).map_err(|e| err(format!("malformed json ({e})")))?;
        let field = |v: Option<serde_json::Value>, name: &str| -> Result<String> {
            match v {
                None => Err(err(format!("missing field '{name}'"))),
                Some(serde_json::Value::String(s)) => Ok(s),
                Some(_) => Err(err(format!("field '{name}' is not a string"))),
            }
        };
        let text = field(parsed.text, "text")?;
        let label = field(parsed.label, "label")?;
        if text.trim().is_empty() {
            return Err(err("empty text".into()));
        }
        out.push(LabeledSample { text, label });
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&content)
}

pub fn to_jsonl(samples: &[LabeledSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parameters of the synthetic corpus: per-class counts in output order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<(String, usize)>,
    pub seed: u64,
}

// Class-specific cue words. Class i draws from EMOTION_POOLS[i]; pools are
// pairwise disjoint and disjoint from the neutral filler lists below.
const EMOTION_POOLS: &[&[&str]] = &[
    &[
        "happy", "great", "wonderful", "delighted", "joyful", "excellent", "grateful",
        "cheerful", "lovely", "thrilled", "pleased", "hopeful",
    ],
    &[
        "sad", "terrible", "awful", "miserable", "horrible", "upset", "gloomy", "dreadful",
        "heartbroken", "depressed", "hopeless", "disappointed",
    ],
    &[
        "okay", "ordinary", "average", "routine", "plain", "normal", "standard", "typical",
        "moderate", "regular", "unremarkable", "fine",
    ],
    &[
        "scared", "afraid", "worried", "anxious", "nervous", "frightened", "terrified",
        "uneasy", "panicked", "fearful", "alarmed", "tense",
    ],
    &[
        "angry", "furious", "annoyed", "irritated", "outraged", "livid", "enraged", "bitter",
        "resentful", "hostile", "fuming", "mad",
    ],
    &[
        "shocked", "surprised", "astonished", "stunned", "amazed", "startled", "speechless",
        "astounded", "bewildered", "dumbfounded", "flabbergasted", "staggered",
    ],
];

const TEMPLATES: &[&str] = &[
    "i feel {e} about the {n} {m}",
    "the {n} made everyone {e} {m}",
    "my {n} was {e} {m}",
    "{m} the {n} seemed {e} to me",
    "people were {e} when the {n} arrived",
    "we are {e} with the {n} {m}",
    "honestly the {n} left me {e}",
    "everyone at the {n} looked {e} {m}",
    "reading about the {n} {m} i felt {e}",
    "the whole {n} thing is {e}",
];

const NOUNS: &[&str] = &[
    "lockdown", "vaccine", "news", "market", "school", "weather", "report", "update",
    "meeting", "city", "train", "hospital", "election", "game", "movie", "office", "campus",
    "concert", "festival", "project",
];

const MOMENTS: &[&str] = &[
    "today", "yesterday", "again", "tonight", "recently", "lately", "now", "overall",
];

fn class_pool(class_index: usize, class_name: &str) -> Vec<String> {
    match EMOTION_POOLS.get(class_index) {
        Some(pool) => pool.iter().map(|s| s.to_string()).collect(),
        None => {
            let stem = normalize_text(class_name).replace(' ', "_");
            (0..12).map(|k| format!("{stem}cue{k}")).collect()
        }
    }
}

/// Zipf-like draw over a pool: word k has weight 1/(k+1).
fn zipf_pick<'a, R: Rng>(pool: &'a [String], rng: &mut R) -> &'a str {
    let total: f64 = (1..=pool.len()).map(|k| 1.0 / k as f64).sum();
    let mut x = rng.gen::<f64>() * total;
    for (k, w) in pool.iter().enumerate() {
        x -= 1.0 / (k + 1) as f64;
        if x < 0.0 {
            return w;
        }
    }
    pool.last().unwrap()
}

fn synth_sentence<R: Rng>(pool: &[String], rng: &mut R) -> String {
    let template = TEMPLATES.choose(rng).unwrap();
    let emotion = zipf_pick(pool, rng);
    let noun = NOUNS.choose(rng).unwrap();
    let moment = MOMENTS.choose(rng).unwrap();
    template
        .replace("{e}", emotion)
        .replace("{n}", noun)
        .replace("{m}", moment)
}

/// Generates a deterministic template corpus. Each sentence carries its class
/// through a single cue word embedded in shared neutral context.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (ci, (name, count)) in spec.classes.iter().enumerate() {
        if *count == 0 {
            return Err(Error::Config(format!("class '{name}' needs count >= 1")));
        }
        let pool = class_pool(ci, name);
        let mut rng = rng::stream(spec.seed, "synth", &[ci as u64]);
        for _ in 0..*count {
            out.push(LabeledSample::new(synth_sentence(&pool, &mut rng), name.clone()));
        }
    }
    Ok(out)
}

/// Synthesizes a test split whose (text, label) pairs never occur in `train`.
pub fn synth_disjoint(
    spec: &SynthSpec,
    train: &[LabeledSample],
) -> Result<Vec<LabeledSample>> {
    let seen: BTreeSet<(&str, &str)> = train
        .iter()
        .map(|s| (s.text.as_str(), s.label.as_str()))
        .collect();
    let mut out = Vec::new();
    for (ci, (name, count)) in spec.classes.iter().enumerate() {
        let pool = class_pool(ci, name);
        let mut rng = rng::stream(spec.seed, "synth-heldout", &[ci as u64]);
        let mut produced = 0;
        let mut attempts = 0usize;
        while produced < *count {
            attempts += 1;
            if attempts > 1000 * count.max(&1) {
                return Err(Error::Invalid(format!(
                    "could not draw {count} held-out sentences for class '{name}'"
                )));
            }
            let text = synth_sentence(&pool, &mut rng);
            if seen.contains(&(text.as_str(), name.as_str())) {
                continue;
            }
            out.push(LabeledSample::new(text, name.clone()));
            produced += 1;
        }
    }
    Ok(out)
}

/// Label histogram in class-id order.
pub fn class_counts(samples: &[TokenizedSample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}
