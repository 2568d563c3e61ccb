//! Perturbation generation: word-level oronym/synonym substitution,
//! paraphrase ingestion with slot-label transfer, a rule-based template
//! paraphraser, similarity filtering, paired evaluation sets and training
//! augmentation.
//!
//! Every generator is a pure function of its inputs and a seed. Randomness
//! for one example is drawn from a sub-seed derived from
//! `(seed, example id, kind, attempt)`, so output does not depend on the
//! order in which examples are processed.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{derive_arguments, Dataset, Example, OTHER};
use crate::lexicon::{PronouncingLexicon, Thesaurus};

/// Default similarity cutoff for keeping a perturbed counterpart.
pub const DEFAULT_THRESHOLD: f64 = 0.85;
/// Default cap on substituted tokens per utterance.
pub const DEFAULT_MAX_WORDS: usize = 3;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("argument {label}:{text:?} not found in paraphrase")]
    ArgumentNotFound { label: String, text: String },
    #[error("arguments overlap in paraphrase")]
    OverlappingArguments,
    #[error("empty paraphrase")]
    EmptyParaphrase,
    #[error("similarity needs non-empty token lists")]
    EmptyTokens,
    #[error("perturbed item refers to unknown clean id {0:?}")]
    DanglingId(String),
    #[error("{0} is not a word-level perturbation")]
    NotWordLevel(PerturbationKind),
    #[error("unknown perturbation kind {0:?}")]
    UnknownKind(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Oronym,
    Synonym,
    Paraphrase,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [Self::Oronym, Self::Synonym, Self::Paraphrase];

    pub fn is_word_level(self) -> bool {
        !matches!(self, Self::Paraphrase)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Oronym => "oronym",
            Self::Synonym => "synonym",
            Self::Paraphrase => "paraphrase",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().trim_end_matches('s') {
            "oronym" => Ok(Self::Oronym),
            "synonym" => Ok(Self::Synonym),
            "paraphrase" => Ok(Self::Paraphrase),
            _ => Err(PerturbError::UnknownKind(s.to_string())),
        }
    }
}

/// A perturbed counterpart of one clean example. Domain and intent are
/// always those of the clean example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedExample {
    pub clean_id: String,
    pub kind: PerturbationKind,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Substituted token indices; empty for paraphrases.
    pub replaced_positions: Vec<usize>,
    pub similarity: f64,
}

impl PerturbedExample {
    /// Materializes a full example inheriting the clean labels.
    pub fn to_example(&self, clean: &Example, id: impl Into<String>) -> Example {
        Example {
            id: id.into(),
            tokens: self.tokens.clone(),
            domain: clean.domain.clone(),
            intent: clean.intent.clone(),
            tags: self.tags.clone(),
            arguments: derive_arguments(&self.tokens, &self.tags),
        }
    }
}

/// Clean examples paired one-to-one with filtered perturbed counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSet {
    pub pairs: Vec<(Example, PerturbedExample)>,
    pub kind: PerturbationKind,
    pub threshold: f64,
}

impl PairedSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Perturbed side as full examples, ids suffixed with the kind.
    pub fn perturbed_examples(&self) -> Vec<Example> {
        self.pairs
            .iter()
            .map(|(c, p)| p.to_example(c, format!("{}~{}", c.id, self.kind)))
            .collect()
    }

    /// One JSON record per perturbed item.
    pub fn to_jsonl(&self) -> String {
        perturbed_to_jsonl(self.pairs.iter().map(|(_, p)| p))
    }
}

pub fn perturbed_to_jsonl<'a>(items: impl IntoIterator<Item = &'a PerturbedExample>) -> String {
    let mut out = String::new();
    for p in items {
        out.push_str(&serde_json::to_string(p).expect("perturbed example serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_perturbed(text: &str) -> Result<Vec<PerturbedExample>, PerturbError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PerturbedExample = serde_json::from_str(line).map_err(|e| PerturbError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if p.tokens.len() != p.tags.len() {
            return Err(PerturbError::Malformed {
                line: i + 1,
                message: "tokens/tags length mismatch".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Words generators must never substitute.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProtectedVocab {
    pub words: BTreeSet<String>,
}

impl ProtectedVocab {
    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }
}

/// Lowercase underscore-split pieces of every domain, intent and slot label.
pub fn build_protected_vocab(dataset: &Dataset) -> ProtectedVocab {
    let words = dataset
        .domains
        .iter()
        .chain(&dataset.intents)
        .chain(&dataset.slot_labels)
        .flat_map(|label| label.split('_'))
        .map(str::to_lowercase)
        .filter(|w| !w.is_empty() && w != "other")
        .collect();
    ProtectedVocab { words }
}

/// Word-level substitution resources.
#[derive(Debug, Clone, Default)]
pub struct Lexicons {
    pub pronouncing: PronouncingLexicon,
    pub thesaurus: Thesaurus,
    /// Phoneme edit budget for oronyms; 0 means exact homophones.
    pub max_phoneme_edits: usize,
}

impl Lexicons {
    /// The lexicon and thesaurus shipped with the crate.
    pub fn fixture() -> Self {
        Self {
            pronouncing: PronouncingLexicon::parse(crate::lexicon::FIXTURE_PRONOUNCING)
                .expect("fixture lexicon parses"),
            thesaurus: Thesaurus::parse(crate::lexicon::FIXTURE_THESAURUS)
                .expect("fixture thesaurus parses"),
            max_phoneme_edits: 0,
        }
    }

    fn replacements(&self, word: &str, kind: PerturbationKind) -> Vec<String> {
        let raw = match kind {
            PerturbationKind::Oronym => self.pronouncing.homophones(word, self.max_phoneme_edits),
            PerturbationKind::Synonym => self.thesaurus.synonyms(word).to_vec(),
            PerturbationKind::Paraphrase => Vec::new(),
        };
        // a multi-word replacement would shift token positions
        raw.into_iter()
            .filter(|w| !w.is_empty() && !w.contains(char::is_whitespace))
            .collect()
    }
}

/// Seed for one `(example, kind, attempt)` draw.
pub fn sub_seed(seed: u64, example_id: &str, kind: PerturbationKind, attempt: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_id.as_bytes());
    h.update([0u8]);
    h.update(kind.as_str().as_bytes());
    h.update(attempt.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
}

/// Substitutes up to `max_words` unprotected tokens with oronyms or synonyms.
///
/// Candidate positions are the unprotected tokens with at least one
/// replacement. `min(max_words, candidates)` positions are drawn uniformly
/// without replacement, then one replacement per position. Tags are copied
/// verbatim. `Ok(None)` means there was nothing to substitute.
pub fn word_level_perturb(
    example: &Example,
    kind: PerturbationKind,
    lexicons: &Lexicons,
    protected: &ProtectedVocab,
    seed: u64,
    max_words: usize,
) -> Result<Option<PerturbedExample>, PerturbError> {
    word_level_attempt(example, kind, lexicons, protected, seed, 0, max_words)
}

fn word_level_attempt(
    example: &Example,
    kind: PerturbationKind,
    lexicons: &Lexicons,
    protected: &ProtectedVocab,
    seed: u64,
    attempt: u32,
    max_words: usize,
) -> Result<Option<PerturbedExample>, PerturbError> {
    if !kind.is_word_level() {
        return Err(PerturbError::NotWordLevel(kind));
    }
    let candidates: Vec<(usize, Vec<String>)> = example
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, tok)| !protected.contains(tok))
        .map(|(i, tok)| (i, lexicons.replacements(tok, kind)))
        .filter(|(_, reps)| !reps.is_empty())
        .collect();
    if candidates.is_empty() || max_words == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &example.id, kind, attempt));
    let k = max_words.min(candidates.len());
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();
    let mut tokens = example.tokens.clone();
    let mut replaced_positions = Vec::with_capacity(k);
    for c in picked {
        let (pos, reps) = &candidates[c];
        tokens[*pos] = reps.choose(&mut rng).expect("non-empty replacements").clone();
        replaced_positions.push(*pos);
    }
    let similarity = TrigramDice.score(&example.tokens, &tokens);
    Ok(Some(PerturbedExample {
        clean_id: example.id.clone(),
        kind,
        tokens,
        tags: example.tags.clone(),
        replaced_positions,
        similarity,
    }))
}

fn find_span(haystack: &[String], needle: &[&str], claimed: &[bool], fold: bool) -> (Option<usize>, bool) {
    let n = needle.len();
    let mut seen_any = false;
    if n == 0 || n > haystack.len() {
        return (None, false);
    }
    for start in 0..=haystack.len() - n {
        let hit = haystack[start..start + n].iter().zip(needle).all(|(h, w)| {
            if fold {
                h.to_lowercase() == w.to_lowercase()
            } else {
                h == w
            }
        });
        if hit {
            seen_any = true;
            if !claimed[start..start + n].iter().any(|&c| c) {
                return (Some(start), true);
            }
        }
    }
    (None, seen_any)
}

/// Transfers slot labels from `example` onto a whitespace-tokenized
/// paraphrase: each clean argument is located first by exact, then by
/// case-folded contiguous token match.
pub fn ingest_paraphrase(example: &Example, paraphrase_text: &str) -> Result<PerturbedExample, PerturbError> {
    let tokens: Vec<String> = paraphrase_text.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(PerturbError::EmptyParaphrase);
    }
    let mut tags = vec![OTHER.to_string(); tokens.len()];
    let mut claimed = vec![false; tokens.len()];
    for arg in &example.arguments {
        let needle: Vec<&str> = arg.text.split_whitespace().collect();
        let (exact, exact_seen) = find_span(&tokens, &needle, &claimed, false);
        let (start, seen) = match exact {
            Some(s) => (Some(s), true),
            None => {
                let (folded, folded_seen) = find_span(&tokens, &needle, &claimed, true);
                (folded, exact_seen || folded_seen)
            }
        };
        let Some(start) = start else {
            return Err(if seen {
                PerturbError::OverlappingArguments
            } else {
                PerturbError::ArgumentNotFound {
                    label: arg.label.clone(),
                    text: arg.text.clone(),
                }
            });
        };
        for i in start..start + needle.len() {
            claimed[i] = true;
            tags[i] = arg.label.clone();
        }
    }
    let similarity = TrigramDice.score(&example.tokens, &tokens);
    Ok(PerturbedExample {
        clean_id: example.id.clone(),
        kind: PerturbationKind::Paraphrase,
        tokens,
        tags,
        replaced_positions: Vec::new(),
        similarity,
    })
}

/// Meaning-preserving rewrites that only move or edit `Other` tokens.
struct RewriteTemplate {
    name: &'static str,
    apply: fn(&[String], &[String]) -> Option<Vec<String>>,
}

fn is_other(tags: &[String], range: std::ops::Range<usize>) -> bool {
    tags[range].iter().all(|t| t == OTHER)
}

fn words(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn tell_me_fronting(tokens: &[String], tags: &[String]) -> Option<Vec<String>> {
    (tokens.len() > 2 && tokens[0] == "tell" && tokens[1] == "me" && is_other(tags, 0..2))
        .then(|| [words(&["whats"]), tokens[2..].to_vec()].concat())
}

fn what_is_contraction(tokens: &[String], tags: &[String]) -> Option<Vec<String>> {
    (tokens.len() > 2 && tokens[0] == "what" && tokens[1] == "is" && is_other(tags, 0..2))
        .then(|| [words(&["whats"]), tokens[2..].to_vec()].concat())
}

fn please_to_end(tokens: &[String], tags: &[String]) -> Option<Vec<String>> {
    let n = tokens.len();
    (n > 1 && tokens[0] == "please" && tokens[n - 1] != "please" && is_other(tags, 0..1))
        .then(|| [tokens[1..].to_vec(), words(&["please"])].concat())
}

fn please_to_front(tokens: &[String], tags: &[String]) -> Option<Vec<String>> {
    let n = tokens.len();
    (n > 1 && tokens[n - 1] == "please" && tokens[0] != "please" && is_other(tags, n - 1..n))
        .then(|| [words(&["please"]), tokens[..n - 1].to_vec()].concat())
}

const QUESTION_OPENERS: &[&str] = &["i", "can", "could", "what", "whats", "is", "are", "will", "how", "when", "where"];

fn can_you_wrapper(tokens: &[String], tags: &[String]) -> Option<Vec<String>> {
    (!tokens.is_empty() && !QUESTION_OPENERS.contains(&tokens[0].as_str()) && is_other(tags, 0..1))
        .then(|| [words(&["can", "you"]), tokens.to_vec()].concat())
}

fn want_to_would_like(tokens: &[String], tags: &[String]) -> Option<Vec<String>> {
    let pos = tokens.windows(3).position(|w| w[0] == "i" && w[1] == "want" && w[2] == "to")?;
    is_other(tags, pos..pos + 3).then(|| {
        [tokens[..pos].to_vec(), words(&["i", "would", "like", "to"]), tokens[pos + 3..].to_vec()].concat()
    })
}

const TEMPLATES: &[RewriteTemplate] = &[
    RewriteTemplate { name: "tell-me-fronting", apply: tell_me_fronting },
    RewriteTemplate { name: "what-is-contraction", apply: what_is_contraction },
    RewriteTemplate { name: "please-to-end", apply: please_to_end },
    RewriteTemplate { name: "please-to-front", apply: please_to_front },
    RewriteTemplate { name: "can-you-wrapper", apply: can_you_wrapper },
    RewriteTemplate { name: "want-to-would-like", apply: want_to_would_like },
];

/// Names of the rewrite templates, in selection order.
pub fn template_names() -> Vec<&'static str> {
    TEMPLATES.iter().map(|t| t.name).collect()
}

/// Applies one seeded-random matching rewrite template and re-derives
/// labels through [`ingest_paraphrase`]. `None` when no template matches.
pub fn template_paraphrase(example: &Example, seed: u64) -> Option<PerturbedExample> {
    template_attempt(example, seed, 0)
}

fn template_attempt(example: &Example, seed: u64, attempt: u32) -> Option<PerturbedExample> {
    let rewrites: Vec<Vec<String>> = TEMPLATES
        .iter()
        .filter_map(|t| (t.apply)(&example.tokens, &example.tags))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &example.id, PerturbationKind::Paraphrase, attempt));
    let chosen = rewrites.choose(&mut rng)?;
    ingest_paraphrase(example, &chosen.join(" ")).ok()
}

/// Pairwise token similarity in `[0, 1]`.
pub trait SimilarityScorer {
    fn score(&self, clean: &[String], perturbed: &[String]) -> f64;
}

/// Greedy-matched character-trigram Dice, combined as an F-measure.
///
/// Each word is padded with `#` on both sides before its trigram set is
/// taken. Precision averages, over perturbed tokens, the best Dice match
/// against clean tokens; recall does the reverse.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramDice;

fn trigrams(word: &str) -> BTreeSet<[char; 3]> {
    let padded: Vec<char> = std::iter::once('#')
        .chain(word.to_lowercase().chars())
        .chain(std::iter::once('#'))
        .collect();
    padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

fn dice(a: &BTreeSet<[char; 3]>, b: &BTreeSet<[char; 3]>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

impl SimilarityScorer for TrigramDice {
    fn score(&self, clean: &[String], perturbed: &[String]) -> f64 {
        if clean.is_empty() || perturbed.is_empty() {
            return 0.0;
        }
        let c: Vec<_> = clean.iter().map(|w| trigrams(w)).collect();
        let p: Vec<_> = perturbed.iter().map(|w| trigrams(w)).collect();
        let best = |x: &BTreeSet<[char; 3]>, ys: &[BTreeSet<[char; 3]>]| {
            ys.iter().map(|y| dice(x, y)).fold(0.0, f64::max)
        };
        let precision = p.iter().map(|x| best(x, &c)).sum::<f64>() / p.len() as f64;
        let recall = c.iter().map(|x| best(x, &p)).sum::<f64>() / c.len() as f64;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

/// Default-scorer similarity with input validation.
pub fn similarity_score(clean_tokens: &[String], perturbed_tokens: &[String]) -> Result<f64, PerturbError> {
    if clean_tokens.is_empty() || perturbed_tokens.is_empty() {
        return Err(PerturbError::EmptyTokens);
    }
    Ok(TrigramDice.score(clean_tokens, perturbed_tokens))
}

/// Similarity scores computed elsewhere, keyed by clean id.
#[derive(Debug, Clone, Default)]
pub struct ExternalScores(pub HashMap<String, f64>);

impl ExternalScores {
    /// Lines of `clean_id<TAB>score`.
    pub fn parse(text: &str) -> Result<Self, PerturbError> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: &str| PerturbError::Malformed {
                line: i + 1,
                message: message.to_string(),
            };
            let (id, score) = line.split_once('\t').ok_or_else(|| malformed("missing tab"))?;
            let score: f64 = score.trim().parse().map_err(|_| malformed("bad score"))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(malformed("score outside [0, 1]"));
            }
            map.insert(id.trim().to_string(), score);
        }
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PerturbError> {
        Self::parse(&read(path.as_ref())?)
    }

    /// Overrides the similarity of every item whose clean id has a score.
    pub fn apply(&self, items: &mut [PerturbedExample]) {
        for item in items {
            if let Some(&s) = self.0.get(&item.clean_id) {
                item.similarity = s;
            }
        }
    }
}

/// Paraphrase texts keyed by clean id, in file order.
#[derive(Debug, Clone, Default)]
pub struct ParaphraseBank(pub HashMap<String, Vec<String>>);

#[derive(Deserialize)]
struct ParaphraseRecord {
    id: String,
    paraphrase: String,
}

impl ParaphraseBank {
    /// Lines of `{"id": ..., "paraphrase": ...}`.
    pub fn parse(text: &str) -> Result<Self, PerturbError> {
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ParaphraseRecord = serde_json::from_str(line).map_err(|e| PerturbError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            map.entry(rec.id).or_default().push(rec.paraphrase);
        }
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PerturbError> {
        Self::parse(&read(path.as_ref())?)
    }
}

fn read(path: &Path) -> Result<String, PerturbError> {
    fs::read_to_string(path).map_err(|source| PerturbError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Everything a generator needs besides the example and seed.
#[derive(Debug, Clone, Copy)]
pub struct Perturber<'a> {
    pub lexicons: &'a Lexicons,
    pub protected: &'a ProtectedVocab,
    pub paraphrases: Option<&'a ParaphraseBank>,
    pub max_words: usize,
}

impl<'a> Perturber<'a> {
    pub fn new(lexicons: &'a Lexicons, protected: &'a ProtectedVocab) -> Self {
        Self {
            lexicons,
            protected,
            paraphrases: None,
            max_words: DEFAULT_MAX_WORDS,
        }
    }

    pub fn with_paraphrases(mut self, bank: &'a ParaphraseBank) -> Self {
        self.paraphrases = Some(bank);
        self
    }

    /// Up to `attempts` candidates for one example, in attempt order.
    /// Ingested paraphrases come first, then template rewrites.
    pub fn candidates(
        &self,
        example: &Example,
        kind: PerturbationKind,
        seed: u64,
        attempts: u32,
    ) -> Vec<PerturbedExample> {
        let mut out = Vec::new();
        if kind.is_word_level() {
            for a in 0..attempts {
                if let Ok(Some(p)) = word_level_attempt(
                    example,
                    kind,
                    self.lexicons,
                    self.protected,
                    seed,
                    a,
                    self.max_words,
                ) {
                    out.push(p);
                }
            }
            return out;
        }
        if let Some(texts) = self.paraphrases.and_then(|b| b.0.get(&example.id)) {
            out.extend(texts.iter().filter_map(|t| ingest_paraphrase(example, t).ok()));
        }
        for a in 0..attempts {
            if let Some(p) = template_attempt(example, seed, a) {
                out.push(p);
            }
        }
        out
    }

    /// Candidate perturbations for every example of a dataset.
    pub fn perturb_dataset(
        &self,
        dataset: &Dataset,
        kind: PerturbationKind,
        seed: u64,
        attempts: u32,
    ) -> Vec<PerturbedExample> {
        dataset
            .examples
            .iter()
            .flat_map(|ex| self.candidates(ex, kind, seed, attempts))
            .collect()
    }
}

/// Keeps the first perturbed item at or above `threshold` for each clean
/// example, ordered as the clean dataset.
pub fn build_paired_set(
    dataset: &Dataset,
    perturbed: &[PerturbedExample],
    kind: PerturbationKind,
    threshold: f64,
) -> Result<PairedSet, PerturbError> {
    let index: HashMap<&str, usize> = dataset
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut chosen: HashMap<usize, &PerturbedExample> = HashMap::new();
    for p in perturbed {
        let &i = index
            .get(p.clean_id.as_str())
            .ok_or_else(|| PerturbError::DanglingId(p.clean_id.clone()))?;
        if p.kind == kind && p.similarity >= threshold {
            chosen.entry(i).or_insert(p);
        }
    }
    let mut keys: Vec<usize> = chosen.keys().copied().collect();
    keys.sort_unstable();
    let pairs = keys
        .into_iter()
        .map(|i| (dataset.examples[i].clone(), chosen[&i].clone()))
        .collect();
    Ok(PairedSet {
        pairs,
        kind,
        threshold,
    })
}

/// The clean dataset extended with up to `per_clean` distinct filtered
/// perturbations of every example.
pub fn augment(
    dataset: &Dataset,
    kind: PerturbationKind,
    per_clean: usize,
    seed: u64,
    threshold: f64,
    perturber: &Perturber<'_>,
) -> Dataset {
    assert!(per_clean >= 1, "augmentation needs at least one sample per example");
    let attempts = (4 * per_clean) as u32;
    let mut examples = dataset.examples.clone();
    for clean in &dataset.examples {
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        seen.insert(clean.tokens.clone());
        let mut n = 0;
        for cand in perturber.candidates(clean, kind, seed, attempts) {
            if n == per_clean {
                break;
            }
            if cand.similarity < threshold || !seen.insert(cand.tokens.clone()) {
                continue;
            }
            examples.push(cand.to_example(clean, format!("{}~{}{}", clean.id, kind, n)));
            n += 1;
        }
    }
    Dataset::from_examples(
        format!("{}+{}x{}", dataset.name, kind, per_clean),
        dataset.split,
        examples,
    )
    .expect("augmented ids are unique")
}
